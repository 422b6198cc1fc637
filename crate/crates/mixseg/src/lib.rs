//! Semi-supervised multi-label segmentation from a small pool of expert
//! masks and a large pool of saliency-derived pseudo-labels.
//!
//! The workflow, stage by stage:
//!
//! 1. [`classifier`]: train an image-level multi-label classifier and
//!    extract per-class Grad-CAM heatmaps.
//! 2. [`pseudolabels`]: calibrate per-class thresholds against expert
//!    masks, optionally refine heatmaps with an inter-pixel relation
//!    network, and write binary pseudo-label masks.
//! 3. [`segmentation`]: train a segmenter on expert and pseudo masks drawn
//!    by a probability-`p` mixed sampler.
//! 4. [`distillation`]: self-distill a student from a teacher's softened
//!    probability maps.
//! 5. [`evaluation`]: dataset-level IoU reports, bootstrap intervals,
//!    comparison with shipped reference rows, static plots.
//!
//! [`pipeline`] wires the stages behind the `mixseg` command-line tool.

pub mod classifier;
pub mod distillation;
pub mod evaluation;
pub mod pipeline;
pub mod pseudolabels;
pub mod segmentation;
pub mod training;

pub use mixseg_core as core;
pub use mixseg_nn as nn;
