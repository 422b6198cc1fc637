//! Segmentation training under full, weak or mixed supervision.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use mixseg_core::{hash, ClassTaxonomy, Error, ImageSample, MaskSet, Result};
use mixseg_nn::arch::{reserved_error, ArchSpec, SegmenterSpec, ENCODER_ID, ENCODER_PREFIX, RESERVED_IDS};
use mixseg_nn::{sigmoid, Adam, AdamConfig, Checkpoint, CheckpointMeta, ParamGrads, ParamStore, Tape};
use ndarray::{Array2, Array3, ArrayView3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{input_shape_of, set_input_shape};
use crate::training::{
    batch_gradients, ensure_finite, image_tensor, save_intermediate, LossGrad, MetricsLog, TrainOptions, TrainRun,
};

pub const DECODER_ID: &str = "deeplab-lite";

/// Dice smoothing constant, added to numerator and denominator.
pub const DICE_EPS: f64 = 1.0;

/// Pool size below which the larger default learning rate applies.
pub const SMALL_DATA_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderInit {
    Random,
    ImagenetFile,
    MocoFile,
    ClassifierCheckpoint,
}

impl EncoderInit {
    pub fn name(self) -> &'static str {
        match self {
            EncoderInit::Random => "random",
            EncoderInit::ImagenetFile => "imagenet-file",
            EncoderInit::MocoFile => "moco-file",
            EncoderInit::ClassifierCheckpoint => "classifier-checkpoint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub decoder_id: String,
    pub encoder_id: String,
    pub encoder_init: EncoderInit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_path: Option<PathBuf>,
    /// `None` picks 1e-3 for pools under 1000 samples and 1e-4 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Draws per epoch; defaults to the size of the pools in use.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_epoch: Option<usize>,
    pub p_expert: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            decoder_id: DECODER_ID.into(),
            encoder_id: ENCODER_ID.into(),
            encoder_init: EncoderInit::Random,
            init_path: None,
            learning_rate: None,
            batch_size: 8,
            epochs: 10,
            samples_per_epoch: None,
            p_expert: 0.9,
            seed: 0,
        }
    }
}

pub(crate) fn check_ids(decoder_id: &str, encoder_id: &str) -> Result<()> {
    match decoder_id {
        DECODER_ID => {}
        id if RESERVED_IDS.contains(&id) => return Err(reserved_error(id)),
        id => return Err(Error::validation(format!("unknown decoder {id:?}"))),
    }
    match encoder_id {
        ENCODER_ID => Ok(()),
        id if RESERVED_IDS.contains(&id) => Err(reserved_error(id)),
        id => Err(Error::validation(format!("unknown encoder {id:?}"))),
    }
}

pub(crate) fn check_init(init: EncoderInit, path: Option<&Path>) -> Result<()> {
    match (init, path) {
        (EncoderInit::Random, Some(_)) => Err(Error::validation("init_path given but encoder_init is random")),
        (EncoderInit::Random, None) => Ok(()),
        (other, None) => Err(Error::validation(format!("encoder_init {} requires init_path", other.name()))),
        (_, Some(_)) => Ok(()),
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        check_ids(&self.decoder_id, &self.encoder_id)?;
        check_init(self.encoder_init, self.init_path.as_deref())?;
        if !(0.0..=1.0).contains(&self.p_expert) {
            return Err(Error::validation(format!("p_expert {} outside [0, 1]", self.p_expert)));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::validation("segmentation learning_rate must be non-negative"));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::validation("segmentation batch_size and epochs must be at least 1"));
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::validation("samples_per_epoch must be at least 1"));
        }
        Ok(())
    }

    pub fn resolved_learning_rate(&self, pool_size: usize) -> f64 {
        self.learning_rate
            .unwrap_or(if pool_size < SMALL_DATA_LIMIT { 1e-3 } else { 1e-4 })
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub image: Array2<f64>,
    pub masks: MaskSet,
}

/// Random-access source of training examples.
pub trait SamplePool: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<TrainItem>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples paired with their expert masks.
pub struct ExpertPool<'a> {
    samples: Vec<&'a ImageSample>,
}

impl<'a> ExpertPool<'a> {
    pub fn new(samples: impl IntoIterator<Item = &'a ImageSample>) -> Result<Self> {
        let samples: Vec<_> = samples.into_iter().collect();
        if let Some(s) = samples.iter().find(|s| s.expert_masks.is_none()) {
            return Err(Error::validation(format!("sample {} has no expert masks", s.id)));
        }
        Ok(Self { samples })
    }
}

impl SamplePool for ExpertPool<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<TrainItem> {
        let s = self.samples[index];
        Ok(TrainItem {
            image: s.image.clone(),
            masks: s.expert_masks.clone().expect("checked at construction"),
        })
    }
}

/// Samples paired with their pseudo masks. A sample without any positive
/// label trains against empty masks.
pub struct PseudoPool<'a> {
    samples: Vec<&'a ImageSample>,
    classes: usize,
}

impl<'a> PseudoPool<'a> {
    pub fn new(samples: impl IntoIterator<Item = &'a ImageSample>, classes: usize) -> Result<Self> {
        let samples: Vec<_> = samples.into_iter().collect();
        if let Some(s) = samples
            .iter()
            .find(|s| s.pseudo_masks.is_none() && !s.positive_classes().is_empty())
        {
            return Err(Error::validation(format!("sample {} has positive labels but no pseudo masks", s.id)));
        }
        Ok(Self { samples, classes })
    }
}

impl SamplePool for PseudoPool<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<TrainItem> {
        let s = self.samples[index];
        let (h, w) = s.image.dim();
        Ok(TrainItem {
            image: s.image.clone(),
            masks: s
                .pseudo_masks
                .clone()
                .unwrap_or_else(|| MaskSet::zeros(self.classes, h, w)),
        })
    }
}

/// A pool with nothing in it.
pub struct EmptyPool;

impl SamplePool for EmptyPool {
    fn len(&self) -> usize {
        0
    }

    fn get(&self, index: usize) -> Result<TrainItem> {
        Err(Error::validation(format!("index {index} requested from an empty pool")))
    }
}

/// Wraps a pool and counts reads.
pub struct CountingPool<'a> {
    inner: &'a dyn SamplePool,
    reads: AtomicUsize,
}

impl<'a> CountingPool<'a> {
    pub fn new(inner: &'a dyn SamplePool) -> Self {
        Self {
            inner,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

impl SamplePool for CountingPool<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn get(&self, index: usize) -> Result<TrainItem> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.inner.get(index)
    }
}

/// The two supervision sources.
#[derive(Clone, Copy)]
pub struct SupervisionPools<'a> {
    pub expert: &'a dyn SamplePool,
    pub pseudo: &'a dyn SamplePool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Expert,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub pool: PoolKind,
    pub index: usize,
}

/// Endless stream of draws: expert with probability `p`, otherwise
/// pseudo; uniform with replacement inside the chosen pool.
#[derive(Debug, Clone)]
pub struct MixedSampler {
    rng: ChaCha8Rng,
    p_expert: f64,
    expert_len: usize,
    pseudo_len: usize,
}

impl MixedSampler {
    pub fn new(expert_len: usize, pseudo_len: usize, p_expert: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_expert) {
            return Err(Error::validation(format!("p_expert {p_expert} outside [0, 1]")));
        }
        if p_expert > 0.0 && expert_len == 0 {
            return Err(Error::validation("p_expert > 0 but the expert pool is empty"));
        }
        if p_expert < 1.0 && pseudo_len == 0 {
            return Err(Error::validation("p_expert < 1 but the pseudo-label pool is empty"));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            p_expert,
            expert_len,
            pseudo_len,
        })
    }
}

impl Iterator for MixedSampler {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        let expert = self.rng.random::<f64>() < self.p_expert;
        let (pool, len) = if expert {
            (PoolKind::Expert, self.expert_len)
        } else {
            (PoolKind::Pseudo, self.pseudo_len)
        };
        Some(Draw {
            pool,
            index: self.rng.random_range(0..len),
        })
    }
}

pub fn mixed_sampler(pools: &SupervisionPools<'_>, p_expert: f64, seed: u64) -> Result<MixedSampler> {
    MixedSampler::new(pools.expert.len(), pools.pseudo.len(), p_expert, seed)
}

fn check_dice_inputs(probs: ArrayView3<'_, f64>, target: &MaskSet) -> Result<()> {
    if probs.dim() != target.dim() {
        return Err(Error::validation(format!(
            "prediction shape {:?} differs from target {:?}",
            probs.dim(),
            target.dim()
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::validation("dice loss expects probabilities in [0, 1]"));
    }
    Ok(())
}

/// `1 − mean_c (2Σpt + ε)/(Σp + Σt + ε)` over all classes.
pub fn dice_loss(probs: ArrayView3<'_, f64>, target: &MaskSet) -> Result<f64> {
    Ok(dice_loss_grad(probs, target)?.value)
}

/// Dice loss and its gradient with respect to the probabilities.
pub fn dice_loss_grad(probs: ArrayView3<'_, f64>, target: &MaskSet) -> Result<LossGrad<Array3<f64>>> {
    check_dice_inputs(probs, target)?;
    Ok(dice_unchecked(probs, target.as_array().view()))
}

fn dice_unchecked(probs: ArrayView3<'_, f64>, target: ndarray::ArrayView3<'_, u8>) -> LossGrad<Array3<f64>> {
    let classes = probs.dim().0;
    let mut grad = Array3::zeros(probs.dim());
    let mut dice_sum = 0.0;
    for c in 0..classes {
        let p = probs.index_axis(ndarray::Axis(0), c);
        let t = target.index_axis(ndarray::Axis(0), c);
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        Zip::from(&p).and(&t).for_each(|&pv, &tv| {
            let tv = tv as f64;
            inter += pv * tv;
            psum += pv;
            tsum += tv;
        });
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + tsum + DICE_EPS;
        dice_sum += num / den;
        let scale = -1.0 / classes as f64;
        let mut g = grad.index_axis_mut(ndarray::Axis(0), c);
        Zip::from(&mut g).and(&t).for_each(|gv, &tv| {
            *gv = scale * (2.0 * tv as f64 * den - num) / (den * den);
        });
    }
    LossGrad {
        value: 1.0 - dice_sum / classes as f64,
        grad,
    }
}

/// Dice loss of an image through the segmenter, with parameter gradients.
pub(crate) fn segment_loss(spec: &SegmenterSpec, params: &ParamStore, item: &TrainItem) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new(params);
    let x = tape.input(image_tensor(&item.image));
    let logits = spec.forward(&mut tape, x)?;
    let probs = tape.value(logits).mapv(sigmoid);
    if probs.dim() != item.masks.dim() {
        return Err(Error::validation("mask shape does not match the image"));
    }
    let lg = dice_unchecked(probs.view(), item.masks.as_array().view());
    let seed = lg.grad * probs.mapv(|p| p * (1.0 - p));
    let grads = tape.backward(&[(logits, seed)]);
    Ok((lg.value, grads.params))
}

/// Encoder weights from the configured source, plus a provenance string.
pub fn init_encoder(
    spec: &SegmenterSpec,
    encoder_init: EncoderInit,
    init_path: Option<&Path>,
    seed: u64,
) -> Result<(ParamStore, String)> {
    check_init(encoder_init, init_path)?;
    let Some(path) = init_path else {
        return Ok((spec.init(seed).subtree(ENCODER_PREFIX), format!("random:{seed}")));
    };
    let source = Checkpoint::load(path)?;
    let arch = &source.meta.arch;
    if encoder_init == EncoderInit::ClassifierCheckpoint && !matches!(arch, ArchSpec::Classifier(_)) {
        return Err(Error::validation(format!(
            "architecture mismatch: {} is a {} checkpoint, a {} classifier is required",
            path.display(),
            arch.id(),
            ENCODER_ID
        )));
    }
    if arch.encoder() != Some(&spec.encoder) {
        return Err(Error::validation(format!(
            "architecture mismatch: {} encoder of {} differs from the {} encoder required by {}",
            arch.id(),
            path.display(),
            ENCODER_ID,
            DECODER_ID
        )));
    }
    let weights = source.params.subtree(ENCODER_PREFIX);
    let mut check = spec.init(0).subtree(ENCODER_PREFIX);
    check.load_from(&weights)?;
    Ok((weights, format!("{}:{}", encoder_init.name(), source.hash())))
}

/// A loaded segmentation checkpoint.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub spec: SegmenterSpec,
    pub params: ParamStore,
    input_shape: Option<(usize, usize)>,
}

impl Segmenter {
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let ArchSpec::Segmenter(spec) = &checkpoint.meta.arch else {
            return Err(Error::validation(format!(
                "checkpoint holds a {:?} model, expected {DECODER_ID}",
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

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Per-class logits at image resolution.
    pub fn logits(&self, image: &Array2<f64>) -> Result<Array3<f64>> {
        if let Some(s) = self.input_shape {
            if s != image.dim() {
                return Err(Error::validation(format!("image is {:?}, model expects {s:?}", image.dim())));
            }
        }
        let (h, w) = image.dim();
        let m = 1 << self.spec.encoder.widths.len();
        if h < m || w < m {
            return Err(Error::validation(format!("image {h}x{w} smaller than minimum {m}x{m}")));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.input(image_tensor(image));
        let out = self.spec.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_masks(&self, image: &Array2<f64>, cutoff: f64) -> Result<MaskSet> {
        let logits = self.logits(image)?;
        MaskSet::new(logits.mapv(|z| u8::from(sigmoid(z) > cutoff)))
    }
}

/// Per-class sigmoid maps thresholded strictly above `cutoff`.
pub fn predict_masks(checkpoint: &Checkpoint, image: &Array2<f64>, cutoff: f64) -> Result<MaskSet> {
    Segmenter::from_checkpoint(checkpoint)?.predict_masks(image, cutoff)
}

/// Shared Adam loop for segmenter-shaped students.
pub(crate) struct FitPlan {
    pub iterations: u64,
    pub learning_rate: f64,
    pub checkpoint_every: Option<u64>,
    pub stem: &'static str,
}

pub(crate) fn fit<T, N, L, E>(
    params: &mut ParamStore,
    meta: &mut CheckpointMeta,
    plan: &FitPlan,
    options: &TrainOptions,
    mut next_batch: N,
    per_item: L,
    mut extra: E,
) -> Result<Vec<crate::training::IterationRecord>>
where
    T: Sync,
    N: FnMut(u64) -> Result<Vec<T>>,
    L: Fn(&ParamStore, &T) -> Result<(f64, ParamGrads)> + Sync,
    E: FnMut() -> BTreeMap<String, f64>,
{
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: plan.learning_rate,
            ..AdamConfig::default()
        },
        params,
    );
    let mut log = MetricsLog::new(options.metrics_path.as_deref())?;
    for iteration in 1..=plan.iterations {
        let batch = next_batch(iteration)?;
        let (loss, grads) = {
            let p: &ParamStore = params;
            batch_gradients(&batch, |item| per_item(p, item))?
        };
        ensure_finite(loss, iteration)?;
        adam.step(params, &grads);
        log.record(iteration, loss, plan.learning_rate, extra())?;
        if let Some(every) = plan.checkpoint_every.filter(|&e| e > 0) {
            if iteration % every == 0 {
                meta.iteration = iteration;
                save_intermediate(
                    options.checkpoint_dir.as_deref(),
                    plan.stem,
                    &Checkpoint::new(meta.clone(), params.clone()),
                )?;
            }
        }
    }
    meta.iteration = plan.iterations;
    log.finish()
}

/// Trains a segmenter with Adam on class-average dice loss, drawing each
/// example from the expert pool with probability `p_expert`.
pub fn train_segmentation(
    pools: &SupervisionPools<'_>,
    taxonomy: &ClassTaxonomy,
    config: &SegConfig,
    options: &TrainOptions,
) -> Result<TrainRun> {
    config.validate()?;
    let mut sampler = mixed_sampler(pools, config.p_expert, config.seed)?;
    let mut pool_size = 0;
    if config.p_expert > 0.0 {
        pool_size += pools.expert.len();
    }
    if config.p_expert < 1.0 {
        pool_size += pools.pseudo.len();
    }
    let spec = SegmenterSpec::new(taxonomy.count());
    let mut params = spec.init(config.seed);
    let (encoder, provenance) = init_encoder(&spec, config.encoder_init, config.init_path.as_deref(), config.seed)?;
    params.load_from(&encoder)?;

    let learning_rate = config.resolved_learning_rate(pool_size);
    let per_epoch = config.samples_per_epoch.unwrap_or(pool_size);
    let iterations = (per_epoch.div_ceil(config.batch_size) * config.epochs) as u64;
    let arch = ArchSpec::Segmenter(spec.clone());
    let mut meta = CheckpointMeta::new(arch, taxonomy.hash(), config.seed, hash::hash_json(config));
    meta.extra.insert("p_expert".into(), config.p_expert.to_string());
    meta.extra.insert("encoder_init".into(), config.encoder_init.name().into());
    meta.extra.insert("init".into(), provenance);
    meta.extra.insert("learning_rate".into(), learning_rate.to_string());

    let mut counts = [0u64; 2];
    let batch_counts = std::cell::Cell::new([0u64; 2]);
    let mut shape = None;
    let history = fit(
        &mut params,
        &mut meta,
        &FitPlan {
            iterations,
            learning_rate,
            checkpoint_every: None,
            stem: "segmenter",
        },
        options,
        |_| {
            let mut bc = [0u64; 2];
            let mut batch = Vec::with_capacity(config.batch_size);
            for draw in sampler.by_ref().take(config.batch_size) {
                let item = match draw.pool {
                    PoolKind::Expert => {
                        bc[0] += 1;
                        pools.expert.get(draw.index)?
                    }
                    PoolKind::Pseudo => {
                        bc[1] += 1;
                        pools.pseudo.get(draw.index)?
                    }
                };
                match shape {
                    None => shape = Some(item.image.dim()),
                    Some(s) if s != item.image.dim() => {
                        return Err(Error::validation("training images differ in shape"))
                    }
                    _ => {}
                }
                batch.push(item);
            }
            counts[0] += bc[0];
            counts[1] += bc[1];
            batch_counts.set(bc);
            Ok(batch)
        },
        |p, item| segment_loss(&spec, p, item),
        || {
            let bc = batch_counts.get();
            BTreeMap::from([
                ("expert_draws".to_string(), bc[0] as f64),
                ("pseudo_draws".to_string(), bc[1] as f64),
            ])
        },
    )?;
    meta.extra.insert("expert_draws".into(), counts[0].to_string());
    meta.extra.insert("pseudo_draws".into(), counts[1].to_string());
    if let Some(s) = shape {
        set_input_shape(&mut meta, s);
    }
    Ok(TrainRun {
        checkpoint: Checkpoint::new(meta, params),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn dice_examples() {
        let t = MaskSet::new(Array3::ones((1, 2, 2))).unwrap();
        let zeros = Array3::zeros((1, 2, 2));
        assert!((dice_loss(zeros.view(), &t).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(dice_loss(t.to_f64().view(), &t).unwrap(), 0.0);
        let empty = MaskSet::zeros(2, 3, 3);
        assert_eq!(dice_loss(Array3::zeros((2, 3, 3)).view(), &empty).unwrap(), 0.0);
        let bad = Array3::from_elem((1, 2, 2), 1.5);
        assert!(dice_loss(bad.view(), &t).unwrap_err().is_validation());
    }

    #[test]
    fn sampler_purity_and_errors() {
        let s = MixedSampler::new(3, 5, 0.0, 1).unwrap();
        assert!(s.take(500).all(|d| d.pool == PoolKind::Pseudo && d.index < 5));
        let s = MixedSampler::new(3, 5, 1.0, 1).unwrap();
        assert!(s.take(500).all(|d| d.pool == PoolKind::Expert && d.index < 3));
        assert!(MixedSampler::new(0, 5, 0.1, 1).unwrap_err().is_validation());
        assert!(MixedSampler::new(5, 0, 0.9, 1).unwrap_err().is_validation());
        assert!(MixedSampler::new(0, 5, 0.0, 1).is_ok());
    }

    #[test]
    fn config_rules() {
        let c = SegConfig::default();
        c.validate().unwrap();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.resolved_learning_rate(999), 1e-3);
        assert_eq!(c.resolved_learning_rate(1000), 1e-4);
        let bad = SegConfig { p_expert: 1.3, ..c.clone() };
        assert!(bad.validate().unwrap_err().is_validation());
        let needs_path = SegConfig {
            encoder_init: EncoderInit::MocoFile,
            ..c.clone()
        };
        assert!(needs_path.validate().is_err());
        let reserved = SegConfig {
            decoder_id: "deeplabv3plus".into(),
            ..c
        };
        assert!(reserved.validate().unwrap_err().to_string().contains("reserved"));
    }

    #[test]
    fn constant_logit_model_predicts_full_plane() {
        let spec = SegmenterSpec::new(1);
        let mut params = spec.init(0);
        for (name, v) in params.iter_mut() {
            v.fill(if name == "decoder.classifier.bias" { 2.0 } else { 0.0 });
        }
        let ck = Checkpoint::new(CheckpointMeta::new(ArchSpec::Segmenter(spec), "t", 0, "c"), params);
        let image = Array2::from_elem((16, 16), 0.4);
        let m = predict_masks(&ck, &image, 0.5).unwrap();
        assert_eq!(m.positive_count(0), 256);
        assert_eq!(predict_masks(&ck, &image, 1.0).unwrap().positive_count(0), 0);
        assert_eq!(predict_masks(&ck, &image, 0.0).unwrap().positive_count(0), 256);
    }
}
