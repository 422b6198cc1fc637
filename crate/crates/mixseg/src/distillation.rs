//! Self-distillation of a segmentation student from a teacher's softened
//! probability maps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mixseg_core::{hash, imageio, ClassTaxonomy, Error, Result};
use mixseg_nn::arch::{ArchSpec, SegmenterSpec};
use mixseg_nn::{sigmoid, softplus, Checkpoint, CheckpointMeta, ParamGrads, ParamStore, Tape};
use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{input_shape_of, set_input_shape};
use crate::segmentation::{check_init, fit, init_encoder, EncoderInit, FitPlan, Segmenter};
use crate::training::{image_tensor, LossGrad, TrainOptions, TrainRun};

/// Soft targets are kept this far from 0 and 1.
pub const SOFT_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub data_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Draws per epoch; defaults to the selected pool size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_epoch: Option<usize>,
    /// Start from the teacher's full weights instead of `encoder_init`.
    pub init_from_teacher: bool,
    pub encoder_init: EncoderInit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            learning_rate: 1e-3,
            data_fraction: 1.0,
            batch_size: 8,
            epochs: 10,
            samples_per_epoch: None,
            init_from_teacher: false,
            encoder_init: EncoderInit::Random,
            init_path: None,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::validation(format!("data_fraction {} outside (0, 1]", self.data_fraction)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("distillation learning_rate must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.samples_per_epoch == Some(0) {
            return Err(Error::validation("distillation batch_size, epochs and samples_per_epoch must be at least 1"));
        }
        if !self.init_from_teacher {
            check_init(self.encoder_init, self.init_path.as_deref())?;
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("temperature must be positive, got {t}")))
    }
}

/// `sigmoid(z / τ)` of the teacher's logits, one map set per image.
pub fn teacher_soft_labels(teacher: &Checkpoint, images: &[Array2<f64>], temperature: f64) -> Result<Vec<Array3<f64>>> {
    check_temperature(temperature)?;
    let net = Segmenter::from_checkpoint(teacher)?;
    images
        .par_iter()
        .map(|img| Ok(net.logits(img)?.mapv(|z| sigmoid(z / temperature))))
        .collect()
}

/// BCE between `sigmoid(z / τ)` and the soft targets, averaged over every
/// class and pixel.
pub fn distill_loss(student_logits: ArrayView3<'_, f64>, teacher_soft: ArrayView3<'_, f64>, temperature: f64) -> Result<f64> {
    Ok(distill_loss_grad(student_logits, teacher_soft, temperature)?.value)
}

/// Distillation loss with its gradient with respect to the student logits.
pub fn distill_loss_grad(
    student_logits: ArrayView3<'_, f64>,
    teacher_soft: ArrayView3<'_, f64>,
    temperature: f64,
) -> Result<LossGrad<Array3<f64>>> {
    check_temperature(temperature)?;
    if student_logits.dim() != teacher_soft.dim() {
        return Err(Error::validation(format!(
            "student output {:?} differs from soft labels {:?}",
            student_logits.dim(),
            teacher_soft.dim()
        )));
    }
    if teacher_soft.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::validation("soft labels must lie in [0, 1]"));
    }
    let n = student_logits.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Array3::zeros(student_logits.dim());
    Zip::from(&mut grad)
        .and(student_logits)
        .and(teacher_soft)
        .for_each(|g, &z, &t| {
            let t = t.clamp(SOFT_CLAMP, 1.0 - SOFT_CLAMP);
            let u = z / temperature;
            // -[t ln σ(u) + (1-t) ln(1-σ(u))] = softplus(u) - t·u
            total += softplus(u) - t * u;
            *g = (sigmoid(u) - t) / (temperature * n);
        });
    Ok(LossGrad { value: total / n, grad })
}

/// Mean binary entropy of the clamped soft targets: the lowest value the
/// distillation loss can take.
pub fn binary_entropy(teacher_soft: ArrayView3<'_, f64>) -> f64 {
    let n = teacher_soft.len().max(1) as f64;
    teacher_soft
        .iter()
        .map(|&t| {
            let t = t.clamp(SOFT_CLAMP, 1.0 - SOFT_CLAMP);
            -(t * t.ln() + (1.0 - t) * (1.0 - t).ln())
        })
        .sum::<f64>()
        / n
}

/// Seeded subsample of `floor(fraction · n)` indices, in ascending order.
/// Smaller fractions under one seed select subsets of larger ones.
pub fn subsample(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation(format!("data_fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::validation(format!(
            "data_fraction {fraction} of {n} samples selects nothing"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftStoreInfo {
    pub teacher_hash: String,
    pub temperature: f64,
    pub classes: Vec<String>,
    pub ids: Vec<String>,
}

/// Soft labels as 16-bit PNG planes: `<dir>/<id>/<class>.png`.
pub struct SoftLabelStore;

impl SoftLabelStore {
    pub const INFO: &'static str = "soft.json";

    pub fn write(
        dir: &Path,
        taxonomy: &ClassTaxonomy,
        ids: &[String],
        soft: &[Array3<f64>],
        teacher_hash: &str,
        temperature: f64,
    ) -> Result<PathBuf> {
        if ids.len() != soft.len() {
            return Err(Error::validation("one soft label set per id is required"));
        }
        for (id, maps) in ids.iter().zip(soft) {
            if maps.dim().0 != taxonomy.count() {
                return Err(Error::validation(format!("soft labels for {id} have the wrong class count")));
            }
            for (c, plane) in maps.axis_iter(Axis(0)).enumerate() {
                let path = dir.join(id).join(format!("{}.png", taxonomy.name(c)));
                imageio::write_prob16(&path, plane)?;
            }
        }
        let info = SoftStoreInfo {
            teacher_hash: teacher_hash.to_string(),
            temperature,
            classes: taxonomy.names().to_vec(),
            ids: ids.to_vec(),
        };
        let path = dir.join(Self::INFO);
        let text = serde_json::to_string_pretty(&info).map_err(|e| Error::runtime(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn info(dir: &Path) -> Result<SoftStoreInfo> {
        let path = dir.join(Self::INFO);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::validation(format!("soft label store {} not found", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    /// Reads every stored id, in store order.
    pub fn read(dir: &Path) -> Result<(SoftStoreInfo, Vec<Array3<f64>>)> {
        let info = Self::info(dir)?;
        let maps = info
            .ids
            .iter()
            .map(|id| {
                let planes: Vec<Array2<f64>> = info
                    .classes
                    .iter()
                    .map(|name| imageio::read_prob16(&dir.join(id).join(format!("{name}.png"))))
                    .collect::<Result<_>>()?;
                let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
                ndarray::stack(Axis(0), &views).map_err(|e| Error::validation(format!("soft labels for {id}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok((info, maps))
    }
}

fn student_loss(
    spec: &SegmenterSpec,
    params: &ParamStore,
    item: &(&Array2<f64>, &Array3<f64>),
    temperature: f64,
) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new(params);
    let x = tape.input(image_tensor(item.0));
    let logits = spec.forward(&mut tape, x)?;
    let lg = distill_loss_grad(tape.value(logits).view(), item.1.view(), temperature)?;
    let grads = tape.backward(&[(logits, lg.grad)]);
    Ok((lg.value, grads.params))
}

/// Trains a student of the teacher's architecture on the teacher's soft
/// labels over a seeded `data_fraction` of `images`.
///
/// `soft` holds precomputed soft labels aligned with `images`; `None`
/// computes them from the teacher.
pub fn train_student(
    teacher: &Checkpoint,
    images: &[Array2<f64>],
    soft: Option<&[Array3<f64>]>,
    config: &DistillConfig,
    options: &TrainOptions,
) -> Result<TrainRun> {
    config.validate()?;
    let ArchSpec::Segmenter(spec) = &teacher.meta.arch else {
        return Err(Error::validation(format!(
            "teacher checkpoint holds a {:?} model, not a segmenter",
            teacher.meta.architecture_id
        )));
    };
    let selected = subsample(images.len(), config.data_fraction, config.seed)?;
    let computed;
    let soft = match soft {
        Some(s) if s.len() == images.len() => s,
        Some(_) => return Err(Error::validation("soft labels must align with the images")),
        None => {
            let picked: Vec<Array2<f64>> = selected.iter().map(|&i| images[i].clone()).collect();
            let mut full = vec![Array3::zeros((0, 0, 0)); images.len()];
            for (i, s) in selected.iter().zip(teacher_soft_labels(teacher, &picked, config.temperature)?) {
                full[*i] = s;
            }
            computed = full;
            &computed
        }
    };
    let items: Vec<(&Array2<f64>, &Array3<f64>)> = selected.iter().map(|&i| (&images[i], &soft[i])).collect();

    let mut params = spec.init(config.seed);
    let provenance = if config.init_from_teacher {
        params.load_from(&teacher.params)?;
        format!("teacher:{}", teacher.hash())
    } else {
        let (encoder, p) = init_encoder(spec, config.encoder_init, config.init_path.as_deref(), config.seed)?;
        params.load_from(&encoder)?;
        p
    };

    let per_epoch = config.samples_per_epoch.unwrap_or(items.len());
    let iterations = (per_epoch.div_ceil(config.batch_size) * config.epochs) as u64;
    let mut meta = CheckpointMeta::new(
        ArchSpec::Segmenter(spec.clone()),
        teacher.meta.taxonomy_hash.clone(),
        config.seed,
        hash::hash_json(config),
    );
    meta.extra.insert("teacher_hash".into(), teacher.hash());
    meta.extra.insert("data_fraction".into(), config.data_fraction.to_string());
    meta.extra.insert("temperature".into(), config.temperature.to_string());
    meta.extra.insert("selected".into(), items.len().to_string());
    meta.extra.insert("init".into(), provenance);
    if let Some(shape) = input_shape_of(&teacher.meta) {
        set_input_shape(&mut meta, shape);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let history = fit(
        &mut params,
        &mut meta,
        &FitPlan {
            iterations,
            learning_rate: config.learning_rate,
            checkpoint_every: None,
            stem: "student",
        },
        options,
        |_| {
            let mut batch = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size {
                if order.is_empty() {
                    order = (0..items.len()).collect();
                    order.shuffle(&mut rng);
                    order.reverse();
                }
                batch.push(items[order.pop().expect("refilled above")]);
            }
            Ok(batch)
        },
        |p, item| student_loss(spec, p, item, config.temperature),
        BTreeMap::new,
    )?;
    Ok(TrainRun {
        checkpoint: Checkpoint::new(meta, params),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_label_examples() {
        assert!((sigmoid(10.0 / 10.0) - 0.731_058_578_6).abs() < 1e-9);
        let half = Array3::from_elem((1, 2, 2), 0.5);
        let zeros = Array3::zeros((1, 2, 2));
        let l = distill_loss(zeros.view(), half.view(), 10.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let t = Array3::from_elem((1, 1, 1), 0.7311);
        let l = distill_loss(Array3::zeros((1, 1, 1)).view(), t.view(), 10.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matching_student_reaches_entropy_floor() {
        let z = Array3::from_shape_fn((2, 3, 3), |(c, i, j)| (c as f64 - 0.5) * 7.0 + i as f64 - j as f64 * 2.0);
        let soft = z.mapv(|v| sigmoid(v / 10.0));
        let l = distill_loss(z.view(), soft.view(), 10.0).unwrap();
        assert!((l - binary_entropy(soft.view())).abs() < 1e-9);
    }

    #[test]
    fn subsample_rules() {
        assert!(subsample(10, 0.05, 0).unwrap_err().is_validation());
        assert!(subsample(10, 0.0, 0).is_err());
        let a = subsample(100, 0.1, 3).unwrap();
        let b = subsample(100, 0.5, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|i| b.contains(i)));
        assert_eq!(subsample(7, 1.0, 9).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn bad_inputs_rejected() {
        let a = Array3::zeros((1, 2, 2));
        assert!(distill_loss(a.view(), Array3::from_elem((1, 2, 2), 1.2).view(), 10.0).is_err());
        assert!(distill_loss(a.view(), Array3::zeros((1, 2, 3)).view(), 10.0).is_err());
        assert!(distill_loss(a.view(), a.view(), 0.0).is_err());
        assert!(DistillConfig { data_fraction: 0.0, ..Default::default() }.validate().is_err());
    }
}
