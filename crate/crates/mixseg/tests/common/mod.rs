#![allow(dead_code)]

use mixseg::core::synth::{generate_samples, SynthConfig, SynthSample};
use mixseg::core::{ImageSample, Label, Split};
use ndarray::{Array3, ArrayView3};

/// A synthetic sample as a training record; the corrupted masks stand in
/// for pseudo labels.
pub fn to_sample(s: &SynthSample) -> ImageSample {
    ImageSample {
        id: s.id.clone(),
        image: s.image.clone(),
        labels: s
            .shapes
            .iter()
            .map(|x| if x.is_some() { Label::Positive } else { Label::Negative })
            .collect(),
        expert_masks: Some(s.expert.clone()),
        pseudo_masks: s.weak.clone(),
        split: s.split,
    }
}

pub fn synth_samples(config: &SynthConfig) -> Vec<ImageSample> {
    generate_samples(config).unwrap().iter().map(to_sample).collect()
}

pub fn split(samples: &[ImageSample], which: Split) -> Vec<ImageSample> {
    samples.iter().filter(|s| s.split == which).cloned().collect()
}

pub fn tiny_config(n: usize) -> SynthConfig {
    SynthConfig {
        n_images: n,
        image_size: (16, 16),
        ..Default::default()
    }
}

/// Central differences of `f` at every entry of `x`.
pub fn numeric_grad3(x: &Array3<f64>, h: f64, f: impl Fn(ArrayView3<'_, f64>) -> f64) -> Array3<f64> {
    let mut out = Array3::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, g) in out.indexed_iter_mut() {
        let v = probe[idx];
        probe[idx] = v + h;
        let up = f(probe.view());
        probe[idx] = v - h;
        let down = f(probe.view());
        probe[idx] = v;
        *g = (up - down) / (2.0 * h);
    }
    out
}

/// Largest entrywise error relative to the larger magnitude, with a tiny
/// absolute floor for entries that are zero in both.
pub fn max_rel_err<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
