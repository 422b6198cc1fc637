//! Core domain types for mixed-supervision multi-label segmentation.
//!
//! Everything downstream (classifier, pseudo-label generation, segmentation
//! training, evaluation) consumes the types defined here: the class
//! taxonomy, binary mask stacks, heatmap stacks, dataset manifests and the
//! IoU / mIoU metric primitives. The [`synth`] module generates
//! deterministic shape datasets in the same on-disk format so the whole
//! toolchain runs without external data.

pub mod error;
pub mod hash;
pub mod imageio;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
pub use manifest::{load_manifest, write_manifest, ImageSample, Label, SampleRecord, Split};
pub use mask::{HeatmapSet, MaskSet};
pub use metrics::{dataset_iou, iou, miou, IoUResult};
pub use taxonomy::ClassTaxonomy;
