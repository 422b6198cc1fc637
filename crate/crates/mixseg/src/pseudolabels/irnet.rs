//! Inter-pixel relation refinement: displacement field, class boundary
//! map, pairwise affinities and attention propagation.
//!
//! Everything here works at the network's head resolution (image / 4 for
//! the default backbone). Pixels are `(row, col)` pairs.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use mixseg_core::{hash, ClassTaxonomy, Error, HeatmapSet, Result};
use mixseg_nn::arch::{ArchSpec, IrnetSpec};
use mixseg_nn::{sigmoid, Checkpoint, CheckpointMeta, ParamGrads, ParamStore, PolyDecay, Sgd, Tape};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{common_shape, input_shape_of, set_input_shape};
use crate::training::{ensure_finite, image_tensor, LossGrad, MetricsLog, TrainOptions, TrainRun};

pub type Pixel = (usize, usize);
pub type PixelPair = (Pixel, Pixel);

/// Log-clamping margin for affinities in the boundary loss.
pub const AFFINITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrnetConfig {
    pub fg_attention_threshold: f64,
    pub bg_attention_threshold: f64,
    pub neighbor_radius: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub propagation_iterations: usize,
    pub affinity_exponent: f64,
    pub seed: u64,
}

impl Default for IrnetConfig {
    fn default() -> Self {
        Self {
            fg_attention_threshold: 0.3,
            bg_attention_threshold: 0.05,
            neighbor_radius: 5,
            learning_rate: 0.1,
            lr_decay: 0.9,
            batch_size: 16,
            epochs: 3,
            propagation_iterations: 8,
            affinity_exponent: 8.0,
            seed: 0,
        }
    }
}

impl IrnetConfig {
    pub fn validate(&self) -> Result<()> {
        let (bg, fg) = (self.bg_attention_threshold, self.fg_attention_threshold);
        if !(0.0 <= bg && bg < fg && fg <= 1.0) {
            return Err(Error::validation(format!(
                "attention thresholds must satisfy 0 <= bg ({bg}) < fg ({fg}) <= 1"
            )));
        }
        if self.neighbor_radius == 0 {
            return Err(Error::validation("neighbor_radius must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("irnet learning_rate must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("irnet batch_size and epochs must be at least 1"));
        }
        if self.affinity_exponent.is_nan() || self.affinity_exponent <= 0.0 {
            return Err(Error::validation("affinity_exponent must be positive"));
        }
        Ok(())
    }
}

/// Neighboring pixel pairs grouped by pseudo-label agreement.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelPairSets {
    /// Both foreground with the same label.
    pub fg: Vec<PixelPair>,
    /// Both background.
    pub bg: Vec<PixelPair>,
    /// Confident pixels with differing labels.
    pub neg: Vec<PixelPair>,
}

impl PixelPairSets {
    pub fn is_empty(&self) -> bool {
        self.fg.is_empty() && self.bg.is_empty() && self.neg.is_empty()
    }
}

/// Per-pixel pseudo label from class attention: `Some(0)` background,
/// `Some(1 + c)` foreground of class `c`, `None` ignored.
pub fn pixel_labels(attention: ArrayView3<'_, f64>, fg_threshold: f64, bg_threshold: f64) -> Array2<Option<usize>> {
    let (classes, h, w) = attention.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..classes {
            let v = attention[[c, i, j]];
            if v > best.1 {
                best = (c, v);
            }
        }
        if classes == 0 || best.1 < bg_threshold {
            Some(0)
        } else if best.1 > fg_threshold {
            Some(1 + best.0)
        } else {
            None
        }
    })
}

/// Offsets `(di, dj)` with `0 < |d| <= radius`, half-plane only, so every
/// unordered pair is produced once.
fn half_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for di in 0..=r {
        for dj in -r..=r {
            if di * di + dj * dj > r * r || (di == 0 && dj <= 0) {
                continue;
            }
            out.push((di, dj));
        }
    }
    out
}

/// Unordered neighbor pairs within Euclidean `radius`, partitioned by
/// pseudo label. Pairs touching an ignored pixel are dropped.
pub fn pair_sets(labels: &Array2<Option<usize>>, radius: usize) -> PixelPairSets {
    let (h, w) = labels.dim();
    let offsets = half_offsets(radius);
    let mut sets = PixelPairSets::default();
    for i in 0..h {
        for j in 0..w {
            let Some(a) = labels[[i, j]] else { continue };
            for &(di, dj) in &offsets {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let q = (ni as usize, nj as usize);
                let Some(b) = labels[q] else { continue };
                let pair = ((i, j), q);
                match (a, b) {
                    (0, 0) => sets.bg.push(pair),
                    (x, y) if x == y => sets.fg.push(pair),
                    _ => sets.neg.push(pair),
                }
            }
        }
    }
    sets
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Foreground displacement loss: mean L1 distance between the field
/// difference `D(x_j) − D(x_i)` and the coordinate offset `x_j − x_i`.
pub fn displacement_loss_fg(field: ArrayView3<'_, f64>, pairs: &[PixelPair]) -> LossGrad<Array3<f64>> {
    displacement_loss(field, pairs, true, "foreground")
}

/// Background displacement loss: mean L1 norm of `D(x_j) − D(x_i)`.
pub fn displacement_loss_bg(field: ArrayView3<'_, f64>, pairs: &[PixelPair]) -> LossGrad<Array3<f64>> {
    displacement_loss(field, pairs, false, "background")
}

fn displacement_loss(field: ArrayView3<'_, f64>, pairs: &[PixelPair], with_offset: bool, kind: &str) -> LossGrad<Array3<f64>> {
    let mut grad = Array3::zeros(field.dim());
    if pairs.is_empty() {
        warn!("empty {kind} pair set; displacement loss contributes 0");
        return LossGrad { value: 0.0, grad };
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for &(pi, pj) in pairs {
        let offset = [pj.0 as f64 - pi.0 as f64, pj.1 as f64 - pi.1 as f64];
        for (comp, off) in offset.iter().enumerate() {
            let delta = field[[comp, pj.0, pj.1]] - field[[comp, pi.0, pi.1]];
            let target = if with_offset { *off } else { 0.0 };
            let r = delta - target;
            total += r.abs();
            let g = sign(r) / n;
            grad[[comp, pj.0, pj.1]] += g;
            grad[[comp, pi.0, pi.1]] -= g;
        }
    }
    LossGrad { value: total / n, grad }
}

/// Pixels on the Bresenham line between `a` and `b`, endpoints included.
///
/// The endpoints are put in a canonical order first, so the path from `a`
/// to `b` is the same set as the path from `b` to `a`.
pub fn line_pixels(a: Pixel, b: Pixel) -> Vec<Pixel> {
    let (start, end) = if a <= b { (a, b) } else { (b, a) };
    let (mut y, mut x) = (start.0 as isize, start.1 as isize);
    let (y1, x1) = (end.0 as isize, end.1 as isize);
    let dy = -(y1 - y).abs();
    let dx = (x1 - x).abs();
    let sy = if y < y1 { 1 } else { -1 };
    let sx = if x < x1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy) as usize + 1);
    loop {
        out.push((y as usize, x as usize));
        if y == y1 && x == x1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Affinity and the on-path pixel holding the maximum boundary score.
fn affinity_argmax(boundary: ArrayView2<'_, f64>, i: Pixel, j: Pixel) -> (f64, Pixel) {
    let mut best = (f64::NEG_INFINITY, i);
    for p in line_pixels(i, j) {
        let v = boundary[p];
        if v > best.0 {
            best = (v, p);
        }
    }
    (1.0 - best.0, best.1)
}

/// `1 − max` boundary score along the line from `i` to `j`.
pub fn pairwise_affinity(boundary: ArrayView2<'_, f64>, i: Pixel, j: Pixel) -> f64 {
    affinity_argmax(boundary, i, j).0
}

/// Cross-entropy between affinity labels and predicted affinities:
/// positive pairs want affinity 1, negative pairs want 0. The gradient is
/// with respect to the boundary map.
pub fn boundary_loss(boundary: ArrayView2<'_, f64>, sets: &PixelPairSets) -> Result<LossGrad<Array2<f64>>> {
    if sets.is_empty() {
        return Err(Error::validation("boundary loss needs at least one pixel pair"));
    }
    let mut grad = Array2::zeros(boundary.dim());
    let mut value = 0.0;
    let mut term = |pairs: &[PixelPair], positive: bool, weight: f64| {
        if pairs.is_empty() {
            return;
        }
        let scale = weight / pairs.len() as f64;
        for &(i, j) in pairs {
            let (a, at) = affinity_argmax(boundary, i, j);
            let clamped = a.clamp(AFFINITY_EPS, 1.0 - AFFINITY_EPS);
            let inside = clamped == a;
            // d(−log a)/dB = 1/a ; d(−log(1 − a))/dB = −1/(1 − a), as da/dB = −1.
            if positive {
                value -= scale * clamped.ln();
                if inside {
                    grad[at] += scale / a;
                }
            } else {
                value -= scale * (1.0 - clamped).ln();
                if inside {
                    grad[at] -= scale / (1.0 - a);
                }
            }
        }
    };
    term(&sets.fg, true, 0.5);
    term(&sets.bg, true, 0.5);
    term(&sets.neg, false, 1.0);
    Ok(LossGrad { value, grad })
}

/// The three IRNet loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IrnetLossParts {
    pub displacement_fg: f64,
    pub displacement_bg: f64,
    pub boundary: f64,
}

/// Unweighted sum of the three terms.
pub fn irnet_total_loss(parts: &IrnetLossParts) -> f64 {
    parts.displacement_fg + parts.displacement_bg + parts.boundary
}

/// Mean pooling by an integer factor; used to bring heatmaps to head
/// resolution.
pub fn area_downsample(plane: ArrayView2<'_, f64>, factor: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (oh, ow) = (h / factor, w / factor);
    let n = (factor * factor) as f64;
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        plane
            .slice(s![i * factor..(i + 1) * factor, j * factor..(j + 1) * factor])
            .sum()
            / n
    })
}

/// Heatmaps at head resolution.
pub fn downsample_heatmaps(heatmaps: &HeatmapSet, factor: usize) -> Array3<f64> {
    let planes: Vec<Array2<f64>> = (0..heatmaps.classes())
        .map(|c| area_downsample(heatmaps.plane(c), factor))
        .collect();
    let (h, w) = planes.first().map(|p| p.dim()).unwrap_or((0, 0));
    let mut out = Array3::zeros((planes.len(), h, w));
    for (c, p) in planes.iter().enumerate() {
        out.index_axis_mut(Axis(0), c).assign(p);
    }
    out
}

/// A loaded IRNet checkpoint.
#[derive(Debug, Clone)]
pub struct Irnet {
    pub spec: IrnetSpec,
    pub params: ParamStore,
    input_shape: Option<(usize, usize)>,
}

/// Head outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct IrnetOutput {
    /// `(2, h, w)`, row and column components.
    pub displacement: Array3<f64>,
    /// `(h, w)`, sigmoid of the boundary logits.
    pub boundary: Array2<f64>,
}

impl Irnet {
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let ArchSpec::Irnet(spec) = &checkpoint.meta.arch else {
            return Err(Error::validation(format!(
                "checkpoint holds a {:?} model, expected irnet-lite",
                checkpoint.meta.architecture_id
            )));
        };
        let mut params = spec.init(0);
        params.load_from(&checkpoint.params)?;
        Ok(Self {
            spec: spec.clone(),
            params,
            input_shape: input_shape_of(&checkpoint.meta),
        })
    }

    pub fn stride(&self) -> usize {
        self.spec.stride()
    }

    pub fn infer(&self, image: &Array2<f64>) -> Result<IrnetOutput> {
        if let Some(s) = self.input_shape {
            if s != image.dim() {
                return Err(Error::validation(format!("image is {:?}, model expects {s:?}", image.dim())));
            }
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.input(image_tensor(image));
        let out = self.spec.forward(&mut tape, x)?;
        Ok(IrnetOutput {
            displacement: tape.value(out.displacement).clone(),
            boundary: tape.value(out.boundary_logits).index_axis(Axis(0), 0).mapv(sigmoid),
        })
    }
}

/// Training example: image plus pair sets at head resolution.
struct IrnetExample<'a> {
    image: &'a Array2<f64>,
    pairs: PixelPairSets,
}

fn example_loss(
    spec: &IrnetSpec,
    params: &ParamStore,
    ex: &IrnetExample<'_>,
) -> Result<(IrnetLossParts, ParamGrads)> {
    let mut tape = Tape::new(params);
    let x = tape.input(image_tensor(ex.image));
    let out = spec.forward(&mut tape, x)?;
    let field = tape.value(out.displacement);
    let logits = tape.value(out.boundary_logits).index_axis(Axis(0), 0).to_owned();
    let boundary = logits.mapv(sigmoid);
    let fg = displacement_loss_fg(field.view(), &ex.pairs.fg);
    let bg = displacement_loss_bg(field.view(), &ex.pairs.bg);
    let bd = if ex.pairs.is_empty() {
        LossGrad {
            value: 0.0,
            grad: Array2::zeros(boundary.dim()),
        }
    } else {
        boundary_loss(boundary.view(), &ex.pairs)?
    };
    let dfield = fg.grad + &bg.grad;
    let dlogits = (&bd.grad * &boundary.mapv(|b| b * (1.0 - b))).insert_axis(Axis(0));
    let grads = tape.backward(&[(out.displacement, dfield), (out.boundary_logits, dlogits)]);
    Ok((
        IrnetLossParts {
            displacement_fg: fg.value,
            displacement_bg: bg.value,
            boundary: bd.value,
        },
        grads.params,
    ))
}

fn build_examples<'a>(
    images: &'a [Array2<f64>],
    heatmaps: &[HeatmapSet],
    stride: usize,
    config: &IrnetConfig,
) -> Result<Vec<IrnetExample<'a>>> {
    if images.len() != heatmaps.len() {
        return Err(Error::validation("one heatmap set per image is required"));
    }
    let mut any_fg = false;
    let examples = images
        .iter()
        .zip(heatmaps)
        .map(|(image, hm)| {
            if (hm.dim().1, hm.dim().2) != image.dim() {
                return Err(Error::validation("heatmap and image shapes differ"));
            }
            let low = downsample_heatmaps(hm, stride);
            let labels = pixel_labels(low.view(), config.fg_attention_threshold, config.bg_attention_threshold);
            any_fg |= labels.iter().any(|l| matches!(l, Some(c) if *c > 0));
            Ok(IrnetExample {
                image,
                pairs: pair_sets(&labels, config.neighbor_radius),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if !any_fg {
        return Err(Error::validation(
            "no image has a foreground pixel above the attention threshold",
        ));
    }
    Ok(examples)
}

/// Mean loss parts of a checkpoint over a dataset.
pub fn irnet_dataset_loss(
    checkpoint: &Checkpoint,
    images: &[Array2<f64>],
    heatmaps: &[HeatmapSet],
    config: &IrnetConfig,
) -> Result<IrnetLossParts> {
    config.validate()?;
    let net = Irnet::from_checkpoint(checkpoint)?;
    let examples = build_examples(images, heatmaps, net.stride(), config)?;
    let mut sum = IrnetLossParts::default();
    for ex in &examples {
        let (p, _) = example_loss(&net.spec, &net.params, ex)?;
        sum.displacement_fg += p.displacement_fg;
        sum.displacement_bg += p.displacement_bg;
        sum.boundary += p.boundary;
    }
    let n = examples.len() as f64;
    Ok(IrnetLossParts {
        displacement_fg: sum.displacement_fg / n,
        displacement_bg: sum.displacement_bg / n,
        boundary: sum.boundary / n,
    })
}

/// Trains the displacement and boundary heads (with their shared backbone)
/// by SGD with polynomial learning-rate decay.
pub fn train_irnet(
    images: &[Array2<f64>],
    heatmaps: &[HeatmapSet],
    taxonomy: &ClassTaxonomy,
    config: &IrnetConfig,
    options: &TrainOptions,
) -> Result<TrainRun> {
    config.validate()?;
    let shape = common_shape(images)?;
    let spec = IrnetSpec::default();
    let stride = spec.stride();
    if shape.0 % stride != 0 || shape.1 % stride != 0 {
        return Err(Error::validation(format!("image sides must be multiples of {stride}")));
    }
    let examples = build_examples(images, heatmaps, stride, config)?;
    let arch = ArchSpec::Irnet(spec.clone());
    let mut params = arch.init(config.seed);
    let mut meta = CheckpointMeta::new(arch, taxonomy.hash(), config.seed, hash::hash_json(config));
    meta.extra.insert("init".into(), "random".into());
    set_input_shape(&mut meta, shape);

    let per_epoch = examples.len().div_ceil(config.batch_size) as u64;
    let schedule = PolyDecay {
        base_lr: config.learning_rate,
        power: config.lr_decay,
        total_steps: per_epoch * config.epochs as u64,
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = MetricsLog::new(options.metrics_path.as_deref())?;
    let mut step = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let lr = schedule.lr(step);
            step += 1;
            let parts: Vec<(IrnetLossParts, ParamGrads)> = {
                use rayon::prelude::*;
                batch
                    .par_iter()
                    .map(|&i| example_loss(&spec, &params, &examples[i]))
                    .collect::<Result<_>>()?
            };
            let mut mean = IrnetLossParts::default();
            let n = parts.len() as f64;
            let mut grads = params.zeros_like();
            for (p, g) in &parts {
                mean.displacement_fg += p.displacement_fg / n;
                mean.displacement_bg += p.displacement_bg / n;
                mean.boundary += p.boundary / n;
                grads.add_assign(g);
            }
            grads.scale(1.0 / n);
            let total = irnet_total_loss(&mean);
            ensure_finite(total, step)?;
            Sgd::step(&mut params, &grads, lr);
            let extra = BTreeMap::from([
                ("displacement_fg".to_string(), mean.displacement_fg),
                ("displacement_bg".to_string(), mean.displacement_bg),
                ("boundary".to_string(), mean.boundary),
            ]);
            log.record(step, total, lr, extra)?;
        }
    }
    meta.iteration = step;
    Ok(TrainRun {
        checkpoint: Checkpoint::new(meta, params),
        history: log.finish()?,
    })
}

/// Groups pixels whose displaced positions land in the same integer bin.
///
/// Target of pixel `x` is `round(x + field(x))`, clamped to the map. Ids
/// are assigned 0, 1, ... in row-major order of first occurrence.
pub fn instance_map(field: ArrayView3<'_, f64>) -> Array2<usize> {
    let (_, h, w) = field.dim();
    let mut ids: HashMap<Pixel, usize> = HashMap::new();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let ty = (i as f64 + field[[0, i, j]]).round().clamp(0.0, (h - 1) as f64) as usize;
            let tx = (j as f64 + field[[1, i, j]]).round().clamp(0.0, (w - 1) as f64) as usize;
            let next = ids.len();
            out[[i, j]] = *ids.entry((ty, tx)).or_insert(next);
        }
    }
    out
}

/// Sparse row-stochastic transition matrix over the pixels of an `h × w`
/// map, rows in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl TransitionMatrix {
    /// Entries `a_ij^β` for `j` within `radius` of `i`; the diagonal is 1.
    /// Rows are then normalized to sum to one.
    pub fn from_boundary(boundary: ArrayView2<'_, f64>, radius: usize, beta: f64) -> Self {
        let (h, w) = boundary.dim();
        let r = radius as isize;
        let mut rows = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let mut row = Vec::new();
                for di in -r..=r {
                    for dj in -r..=r {
                        if di * di + dj * dj > r * r {
                            continue;
                        }
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                            continue;
                        }
                        let q = (ni as usize, nj as usize);
                        let v = if q == (i, j) {
                            1.0
                        } else {
                            pairwise_affinity(boundary, (i, j), q).clamp(0.0, 1.0).powf(beta)
                        };
                        if v > 0.0 {
                            row.push((q.0 * w + q.1, v));
                        }
                    }
                }
                let total: f64 = row.iter().map(|e| e.1).sum();
                row.iter_mut().for_each(|e| e.1 /= total);
                rows.push(row);
            }
        }
        Self { rows }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, t)| t * v[j]).sum())
            .collect()
    }
}

/// Diffuses a class attention plane along high-affinity paths.
pub fn propagate_attention(cam: ArrayView2<'_, f64>, boundary: ArrayView2<'_, f64>, config: &IrnetConfig) -> Result<Array2<f64>> {
    if cam.dim() != boundary.dim() {
        return Err(Error::validation("attention and boundary maps differ in shape"));
    }
    if cam.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::validation("attention plane must lie in [0, 1]"));
    }
    let mut v: Vec<f64> = cam.iter().copied().collect();
    if config.propagation_iterations > 0 {
        let t = TransitionMatrix::from_boundary(boundary, config.neighbor_radius, config.affinity_exponent);
        for _ in 0..config.propagation_iterations {
            v = t.apply(&v);
        }
    }
    let mut out = Array2::from_shape_vec(cam.dim(), v).expect("same size");
    crate::training::min_max_normalize(&mut out);
    Ok(out)
}

/// Refines every positive heatmap plane of one image.
///
/// At head resolution the plane is propagated, then restricted to the
/// instances (from the displacement field) that contain a foreground seed,
/// then bilinearly resized back and min-max normalized.
///
/// Training pulls `D(x_j) − D(x_i)` toward `x_j − x_i`, so the learned field
/// is `x − centroid` up to a constant; the centroid-pointing field handed to
/// [`instance_map`] is its negation.
pub fn refine_heatmaps(net: &Irnet, image: &Array2<f64>, heatmaps: &HeatmapSet, config: &IrnetConfig) -> Result<HeatmapSet> {
    let (classes, h, w) = heatmaps.dim();
    let out = net.infer(image)?;
    let instances = instance_map(out.displacement.mapv(|v| -v).view());
    let stride = net.stride();
    let mut refined = HeatmapSet::zeros(classes, h, w);
    for c in 0..classes {
        let plane = heatmaps.plane(c);
        if plane.iter().all(|&v| v == 0.0) {
            continue;
        }
        let low = area_downsample(plane, stride);
        let mut prop = propagate_attention(low.view(), out.boundary.view(), config)?;
        let seeds: std::collections::HashSet<usize> = low
            .indexed_iter()
            .filter(|(_, &v)| v > config.fg_attention_threshold)
            .map(|(p, _)| instances[p])
            .collect();
        if !seeds.is_empty() {
            prop.indexed_iter_mut().for_each(|(p, v)| {
                if !seeds.contains(&instances[p]) {
                    *v = 0.0;
                }
            });
        }
        let mut up = mixseg_nn::ops::upsample_bilinear(prop.insert_axis(Axis(0)).view(), h, w)
            .index_axis_move(Axis(0), 0);
        crate::training::min_max_normalize(&mut up);
        refined.set_plane(c, up.view())?;
    }
    Ok(refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn defaults_and_threshold_order() {
        let c = IrnetConfig::default();
        assert_eq!((c.fg_attention_threshold, c.bg_attention_threshold), (0.3, 0.05));
        assert_eq!((c.learning_rate, c.batch_size), (0.1, 16));
        let bad = IrnetConfig {
            fg_attention_threshold: 0.05,
            bg_attention_threshold: 0.3,
            ..c
        };
        assert!(bad.validate().unwrap_err().is_validation());
    }

    #[test]
    fn bresenham_includes_endpoints() {
        assert_eq!(line_pixels((0, 0), (0, 3)), vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
        assert_eq!(line_pixels((2, 2), (2, 2)), vec![(2, 2)]);
        assert_eq!(line_pixels((3, 0), (0, 3)).len(), 4);
    }

    #[test]
    fn affinity_examples() {
        let zero = Array2::zeros((5, 5));
        assert_eq!(pairwise_affinity(zero.view(), (0, 0), (4, 3)), 1.0);
        let mut b = Array2::zeros((5, 5));
        b[[0, 2]] = 0.7;
        assert!((pairwise_affinity(b.view(), (0, 0), (0, 4)) - 0.3).abs() < 1e-15);
        b[[3, 3]] = 0.4;
        assert!((pairwise_affinity(b.view(), (3, 3), (3, 3)) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn displacement_examples() {
        let zero = Array3::zeros((2, 3, 3));
        let pair = [((0, 0), (1, 0))];
        assert_eq!(displacement_loss_fg(zero.view(), &pair).value, 1.0);
        assert_eq!(displacement_loss_bg(zero.view(), &pair).value, 0.0);
        // D(x) = −x doubles every offset.
        let neg = Array3::from_shape_fn((2, 4, 4), |(c, i, j)| -((if c == 0 { i } else { j }) as f64));
        let pairs = [((0, 0), (1, 2)), ((3, 3), (1, 0))];
        assert_eq!(displacement_loss_fg(neg.view(), &pairs).value, (2.0 * 3.0 + 2.0 * 5.0) / 2.0);
        let mut f = Array3::zeros((2, 2, 2));
        f[[0, 1, 1]] = 2.0;
        f[[1, 1, 1]] = -1.0;
        assert_eq!(displacement_loss_bg(f.view(), &[((0, 0), (1, 1))]).value, 3.0);
        let constant = Array3::from_elem((2, 3, 3), 0.7);
        assert_eq!(displacement_loss_bg(constant.view(), &pair).value, 0.0);
    }

    #[test]
    fn boundary_loss_examples() {
        let zero = Array2::zeros((3, 3));
        let sets = PixelPairSets {
            fg: vec![((0, 0), (0, 2))],
            bg: vec![((2, 0), (2, 2))],
            neg: vec![],
        };
        // a ≡ 1 is clamped to 1 − ε, leaving a residue of about ε.
        assert!(boundary_loss(zero.view(), &sets).unwrap().value < 2e-6);
        let half = Array2::from_elem((3, 3), 0.5);
        let sets = PixelPairSets {
            fg: vec![((0, 0), (0, 1))],
            bg: vec![],
            neg: vec![((1, 0), (1, 1))],
        };
        let v = boundary_loss(half.view(), &sets).unwrap().value;
        assert!((v - 1.5 * 2f64.ln()).abs() < 1e-12);
        let ones = Array2::ones((3, 3));
        let neg_only = PixelPairSets {
            neg: vec![((0, 0), (2, 2))],
            ..Default::default()
        };
        assert!(boundary_loss(ones.view(), &neg_only).unwrap().value < 2e-6);
        assert!(boundary_loss(ones.view(), &PixelPairSets::default()).unwrap_err().is_validation());
    }

    #[test]
    fn total_loss_is_plain_sum() {
        let p = IrnetLossParts {
            displacement_fg: 1.0,
            displacement_bg: 2.0,
            boundary: 3.0,
        };
        assert_eq!(irnet_total_loss(&p), 6.0);
        assert_eq!(irnet_total_loss(&IrnetLossParts::default()), 0.0);
    }

    #[test]
    fn instance_map_examples() {
        let zero = Array3::zeros((2, 3, 4));
        let ids = instance_map(zero.view());
        assert_eq!(ids.iter().copied().max(), Some(11));
        // Left half to (1,1), right half to (1,3).
        let field = Array3::from_shape_fn((2, 4, 4), |(c, i, j)| {
            let target = if j < 2 { (1.0, 1.0) } else { (1.0, 3.0) };
            if c == 0 {
                target.0 - i as f64
            } else {
                target.1 - j as f64
            }
        });
        let ids = instance_map(field.view());
        let expected = arr2(&[[0, 0, 1, 1], [0, 0, 1, 1], [0, 0, 1, 1], [0, 0, 1, 1]]);
        assert_eq!(ids, expected);
    }

    #[test]
    fn pair_sets_partition() {
        let mut att = Array3::zeros((2, 4, 4));
        att[[0, 0, 0]] = 0.9;
        att[[0, 0, 1]] = 0.8;
        att[[1, 3, 3]] = 0.9;
        att[[0, 2, 2]] = 0.1; // ignored band
        let labels = pixel_labels(att.view(), 0.3, 0.05);
        assert_eq!(labels[[0, 0]], Some(1));
        assert_eq!(labels[[3, 3]], Some(2));
        assert_eq!(labels[[2, 2]], None);
        let sets = pair_sets(&labels, 5);
        assert!(sets.fg.contains(&((0, 0), (0, 1))));
        assert!(sets.neg.contains(&((0, 0), (3, 3))));
        for (a, b) in sets.fg.iter().chain(&sets.bg).chain(&sets.neg) {
            assert!(a != b);
            assert!(labels[*a].is_some() && labels[*b].is_some());
        }
        let total = sets.fg.len() + sets.bg.len() + sets.neg.len();
        // 15 labeled pixels, all within radius 5 of each other on a 4x4 grid.
        assert_eq!(total, 15 * 14 / 2);
    }

    #[test]
    fn propagation_examples() {
        let cam = arr2(&[[1.0, 0.0]]);
        let zero = Array2::zeros((1, 2));
        let cfg = IrnetConfig {
            propagation_iterations: 1,
            neighbor_radius: 1,
            ..Default::default()
        };
        let t = TransitionMatrix::from_boundary(zero.view(), 1, 8.0);
        assert_eq!(t.apply(&[1.0, 0.0]), vec![0.5, 0.5]);
        // Uniform result renormalizes to a constant positive plane.
        assert_eq!(propagate_attention(cam.view(), zero.view(), &cfg).unwrap(), arr2(&[[1.0, 1.0]]));
        let none = IrnetConfig {
            propagation_iterations: 0,
            ..cfg.clone()
        };
        let cam = arr2(&[[0.0, 0.25], [1.0, 0.5]]);
        assert_eq!(propagate_attention(cam.view(), Array2::zeros((2, 2)).view(), &none).unwrap(), cam);
        let walls = Array2::ones((2, 2));
        assert_eq!(propagate_attention(cam.view(), walls.view(), &cfg).unwrap(), cam);
    }
}
