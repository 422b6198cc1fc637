//! Deterministic synthetic shape datasets.
//!
//! Each image is a noisy background with zero or more class shapes painted
//! on it. Expert masks are exact rasterizations of the analytic shapes
//! (pixel centre inside the region, boundary inclusive). Weak masks are the
//! expert masks of positive classes passed through [`corrupt_mask`], which
//! stands in for coarse saliency-derived labels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::manifest::{write_manifest, Label, SampleRecord, Split};
use crate::{imageio, ClassTaxonomy, Error, MaskSet, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Ring,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Ellipse,
        ShapeKind::Rectangle,
        ShapeKind::Ring,
        ShapeKind::Blob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Blob => "blob",
        }
    }

    fn intensity(self) -> f64 {
        match self {
            ShapeKind::Ellipse => 0.55,
            ShapeKind::Rectangle => 0.70,
            ShapeKind::Ring => 0.85,
            ShapeKind::Blob => 1.0,
        }
    }
}

/// Analytic shape parameters in pixel units (row, column order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeSpec {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rectangle { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ring { cy: f64, cx: f64, r_inner: f64, r_outer: f64 },
    Blob { circles: Vec<(f64, f64, f64)> },
}

impl ShapeSpec {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            ShapeSpec::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            ShapeSpec::Rectangle { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            ShapeSpec::Ring {
                cy,
                cx,
                r_inner,
                r_outer,
            } => {
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                d >= r_inner && d <= r_outer
            }
            ShapeSpec::Blob { ref circles } => circles
                .iter()
                .any(|&(cy, cx, r)| (y - cy).powi(2) + (x - cx).powi(2) <= r * r),
        }
    }

    /// Binary rasterization: a pixel is inside iff its centre is.
    pub fn rasterize(&self, height: usize, width: usize) -> Array2<u8> {
        Array2::from_shape_fn((height, width), |(r, c)| {
            u8::from(self.contains(r as f64 + 0.5, c as f64 + 0.5))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Corruption {
    pub dilation_radius: usize,
    pub flip_rate: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            dilation_radius: 2,
            flip_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: (usize, usize),
    pub classes: Vec<ShapeKind>,
    /// Per-class presence probability; one entry per class.
    pub class_prevalence: Vec<f64>,
    pub corruption: Corruption,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 400,
            image_size: (64, 64),
            classes: ShapeKind::ALL.to_vec(),
            class_prevalence: vec![0.5; 4],
            corruption: Corruption::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 5 {
            return Err(Error::validation("n_images must be at least 5 so every split is nonempty"));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::validation("image_size must be at least 16x16"));
        }
        if self.classes.is_empty() {
            return Err(Error::validation("at least one synthetic class is required"));
        }
        for (i, k) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(k) {
                return Err(Error::validation(format!("class {} listed twice", k.name())));
            }
        }
        if self.class_prevalence.len() != self.classes.len() {
            return Err(Error::validation(format!(
                "class_prevalence has {} entries for {} classes",
                self.class_prevalence.len(),
                self.classes.len()
            )));
        }
        if self.class_prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::validation("class_prevalence entries must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.corruption.flip_rate) {
            return Err(Error::validation("flip_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> ClassTaxonomy {
        ClassTaxonomy::new(self.classes.iter().map(|k| k.name())).expect("validated classes")
    }
}

/// One generated sample, kept in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub id: String,
    /// Quantized to multiples of 1/255 so it survives PNG round trips.
    pub image: Array2<f64>,
    pub shapes: Vec<Option<ShapeSpec>>,
    pub expert: MaskSet,
    pub weak: Option<MaskSet>,
    pub split: Split,
}

fn sample_shape(kind: ShapeKind, rng: &mut ChaCha8Rng, h: usize, w: usize) -> ShapeSpec {
    let s = h.min(w) as f64;
    let (hf, wf) = (h as f64, w as f64);
    let centre = |extent: f64, rng: &mut ChaCha8Rng| {
        let margin = extent + 1.0;
        let cy = rng.random_range(margin..(hf - margin).max(margin + 1e-9));
        let cx = rng.random_range(margin..(wf - margin).max(margin + 1e-9));
        (cy, cx)
    };
    match kind {
        ShapeKind::Ellipse => {
            let ry = rng.random_range(0.10 * s..0.20 * s);
            let rx = rng.random_range(0.10 * s..0.20 * s);
            let (cy, cx) = centre(ry.max(rx), rng);
            ShapeSpec::Ellipse { cy, cx, ry, rx }
        }
        ShapeKind::Rectangle => {
            let hh = rng.random_range(0.08 * s..0.18 * s);
            let hw = rng.random_range(0.08 * s..0.18 * s);
            let (cy, cx) = centre(hh.max(hw), rng);
            ShapeSpec::Rectangle {
                y0: cy - hh,
                x0: cx - hw,
                y1: cy + hh,
                x1: cx + hw,
            }
        }
        ShapeKind::Ring => {
            let r_outer = rng.random_range(0.14 * s..0.22 * s);
            let thickness = (0.07 * s).max(2.0);
            let (cy, cx) = centre(r_outer, rng);
            ShapeSpec::Ring {
                cy,
                cx,
                r_inner: r_outer - thickness,
                r_outer,
            }
        }
        ShapeKind::Blob => {
            let spread = 0.08 * s;
            let (cy, cx) = centre(spread + 0.13 * s, rng);
            let circles = (0..3)
                .map(|_| {
                    let oy = rng.random_range(-spread..spread);
                    let ox = rng.random_range(-spread..spread);
                    let r = rng.random_range(0.06 * s..0.12 * s);
                    (cy + oy, cx + ox, r)
                })
                .collect();
            ShapeSpec::Blob { circles }
        }
    }
}

fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut image_rng(seed, 0));
    let n_train = n * 7 / 10;
    let n_valid = (n / 10).max(1);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    splits
}

fn generate_one(config: &SynthConfig, index: usize, split: Split) -> Result<SynthSample> {
    let (h, w) = config.image_size;
    let mut rng = image_rng(config.seed, index as u64 + 1);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let background = rng.random_range(0.15..0.3);
    let mut image = Array2::from_shape_fn((h, w), |_| background + noise.sample(&mut rng));

    let classes = config.classes.len();
    let mut shapes = Vec::with_capacity(classes);
    let mut expert = MaskSet::zeros(classes, h, w);
    for (c, &kind) in config.classes.iter().enumerate() {
        let present = rng.random::<f64>() < config.class_prevalence[c];
        if !present {
            shapes.push(None);
            continue;
        }
        let spec = sample_shape(kind, &mut rng, h, w);
        let plane = spec.rasterize(h, w);
        for ((r, col), &v) in plane.indexed_iter() {
            if v == 1 {
                image[[r, col]] = kind.intensity() + noise.sample(&mut rng);
            }
        }
        expert.set_plane(c, plane.view())?;
        shapes.push(Some(spec));
    }
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);

    let positives: Vec<usize> = (0..classes).filter(|&c| shapes[c].is_some()).collect();
    let weak = if positives.is_empty() {
        None
    } else {
        let mut weak = MaskSet::zeros(classes, h, w);
        for &c in &positives {
            let seed = config.seed ^ ((index as u64 + 1) << 8) ^ (c as u64 + 1);
            let corrupted = corrupt_mask(
                &expert.plane(c).to_owned(),
                config.corruption.dilation_radius,
                config.corruption.flip_rate,
                seed,
            )?;
            weak.set_plane(c, corrupted.view())?;
        }
        Some(weak)
    };

    Ok(SynthSample {
        id: format!("img{index:05}"),
        image,
        shapes,
        expert,
        weak,
        split,
    })
}

/// Generates every sample in memory.
pub fn generate_samples(config: &SynthConfig) -> Result<Vec<SynthSample>> {
    config.validate()?;
    let splits = assign_splits(config.n_images, config.seed);
    (0..config.n_images)
        .map(|i| generate_one(config, i, splits[i]))
        .collect()
}

/// Writes images, expert masks, weak masks and `manifest.jsonl` under
/// `out_dir`; returns the manifest path.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let samples = generate_samples(config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let taxonomy = config.taxonomy();
    let mut records = Vec::with_capacity(samples.len());
    let mut shapes_log = String::new();
    for s in &samples {
        let image_rel = format!("images/{}.png", s.id);
        imageio::write_gray(&out_dir.join(&image_rel), s.image.view())?;
        let mut labels = BTreeMap::new();
        let mut expert = BTreeMap::new();
        for (c, name) in taxonomy.names().iter().enumerate() {
            let label = if s.shapes[c].is_some() { Label::Positive } else { Label::Negative };
            labels.insert(name.clone(), label);
            let rel = format!("masks/expert/{}/{}.png", s.id, name);
            imageio::write_mask(&out_dir.join(&rel), s.expert.plane(c))?;
            expert.insert(name.clone(), rel);
        }
        let pseudo = s.weak.as_ref().map(|weak| {
            let mut map = BTreeMap::new();
            for (c, name) in taxonomy.names().iter().enumerate() {
                if s.shapes[c].is_some() {
                    let rel = format!("masks/weak/{}/{}.png", s.id, name);
                    map.insert(name.clone(), rel);
                }
            }
            (map, weak)
        });
        let pseudo_map = match pseudo {
            Some((map, weak)) => {
                for (name, rel) in &map {
                    let c = taxonomy.index_of(name).expect("known class");
                    imageio::write_mask(&out_dir.join(rel), weak.plane(c))?;
                }
                Some(map)
            }
            None => None,
        };
        records.push(SampleRecord {
            id: s.id.clone(),
            image: image_rel,
            labels,
            expert_masks: Some(expert),
            pseudo_masks: pseudo_map,
            split: s.split,
        });
        shapes_log.push_str(&serde_json::to_string(&(&s.id, &s.shapes)).expect("serializable"));
        shapes_log.push('\n');
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    let shapes_path = out_dir.join("shapes.jsonl");
    std::fs::write(&shapes_path, shapes_log).map_err(|e| Error::io(&shapes_path, e))?;
    let cfg_path = out_dir.join("synth_config.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(config).expect("serializable"))
        .map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

/// Square (8-connected) dilation followed by independent pixel flips.
pub fn corrupt_mask(mask: &Array2<u8>, dilation_radius: usize, flip_rate: f64, seed: u64) -> Result<Array2<u8>> {
    if !(0.0..1.0).contains(&flip_rate) {
        return Err(Error::validation(format!("flip_rate {flip_rate} must lie in [0, 1)")));
    }
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::validation("corrupt_mask input must be binary"));
    }
    let (h, w) = mask.dim();
    let r = dilation_radius as isize;
    let mut out = Array2::zeros((h, w));
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        let (y, x) = (y as isize, x as isize);
        for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
            for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                out[[yy as usize, xx as usize]] = 1;
            }
        }
    }
    if flip_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in out.iter_mut() {
            if rng.random::<f64>() < flip_rate {
                *v ^= 1;
            }
        }
    }
    Ok(out)
}

/// Stacks the per-sample expert planes of one class (test helper for
/// callers that need a `(N, H, W)` view).
pub fn stack_class(samples: &[SynthSample], class: usize) -> Array3<u8> {
    let views: Vec<_> = samples.iter().map(|s| s.expert.plane(class)).collect();
    ndarray::stack(Axis(0), &views).expect("same-sized planes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::iou;
    use ndarray::array;

    #[test]
    fn corrupt_identity_and_dilation() {
        let mut m = Array2::<u8>::zeros((5, 5));
        m[[2, 2]] = 1;
        assert_eq!(corrupt_mask(&m, 0, 0.0, 1).unwrap(), m);
        let d = corrupt_mask(&m, 1, 0.0, 1).unwrap();
        let expected = Array2::from_shape_fn((5, 5), |(r, c)| {
            u8::from((1..=3).contains(&r) && (1..=3).contains(&c))
        });
        assert_eq!(d, expected);

        let mut corner = Array2::<u8>::zeros((3, 3));
        corner[[0, 0]] = 1;
        let d = corrupt_mask(&corner, 1, 0.0, 1).unwrap();
        assert_eq!(d, array![[1u8, 1, 0], [1, 1, 0], [0, 0, 0]]);

        assert!(corrupt_mask(&m, 0, 1.0, 1).unwrap_err().is_validation());
    }

    #[test]
    fn flip_count_within_binomial_bound() {
        let m = Array2::<u8>::zeros((100, 100));
        let n = corrupt_mask(&m, 0, 0.1, 7).unwrap().iter().filter(|&&v| v == 1).count();
        assert!((870..=1130).contains(&n), "{n}");
    }

    #[test]
    fn dilation_is_monotone() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((12, 12), |_| u8::from(rng.random::<f64>() < 0.1));
            for r in 0..3 {
                let d = corrupt_mask(&m, r, 0.0, seed).unwrap();
                assert!(m.iter().zip(d.iter()).all(|(&a, &b)| b >= a));
            }
        }
    }

    #[test]
    fn more_flips_lower_iou_on_average() {
        let spec = ShapeSpec::Ellipse { cy: 16.0, cx: 16.0, ry: 7.0, rx: 9.0 };
        let m = spec.rasterize(32, 32);
        let mean_iou = |flip: f64| {
            (0..20u64)
                .map(|s| {
                    let c = corrupt_mask(&m, 0, flip, s).unwrap();
                    iou(c.view(), m.view()).unwrap().iou.unwrap()
                })
                .sum::<f64>()
                / 20.0
        };
        assert!(mean_iou(0.2) < mean_iou(0.05));
    }

    #[test]
    fn masks_match_analytic_rasterization() {
        let cfg = SynthConfig { n_images: 30, ..Default::default() };
        for s in generate_samples(&cfg).unwrap() {
            for (c, shape) in s.shapes.iter().enumerate() {
                let expected = match shape {
                    Some(spec) => spec.rasterize(64, 64),
                    None => Array2::zeros((64, 64)),
                };
                assert_eq!(s.expert.plane(c), expected);
                if shape.is_some() {
                    assert!(s.expert.positive_count(c) > 0);
                }
            }
        }
    }

    #[test]
    fn prevalence_controls_labels() {
        let cfg = SynthConfig {
            n_images: 50,
            class_prevalence: vec![1.0, 0.0, 0.5, 0.5],
            ..Default::default()
        };
        let samples = generate_samples(&cfg).unwrap();
        assert!(samples.iter().all(|s| s.shapes[0].is_some() && s.expert.positive_count(0) > 0));
        assert!(samples.iter().all(|s| s.shapes[1].is_none()));

        let cfg = SynthConfig { n_images: 400, ..Default::default() };
        let n = generate_samples(&cfg).unwrap().iter().filter(|s| s.shapes[2].is_some()).count();
        assert!((160..=240).contains(&n), "{n}");
    }

    #[test]
    fn splits_follow_70_10_20() {
        let cfg = SynthConfig { n_images: 400, ..Default::default() };
        let s = generate_samples(&cfg).unwrap();
        let count = |sp| s.iter().filter(|x| x.split == sp).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (280, 40, 80));
        let cfg = SynthConfig { n_images: 4, ..Default::default() };
        assert!(generate_samples(&cfg).unwrap_err().is_validation());
    }
}
