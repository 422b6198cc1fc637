//! Image-level multi-label classifier and Grad-CAM saliency.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mixseg_core::{hash, imageio, ClassTaxonomy, Error, HeatmapSet, ImageSample, Result};
use mixseg_nn::arch::{reserved_error, ArchSpec, ClassifierSpec, LinearSpec, RESERVED_IDS};
use mixseg_nn::ops::upsample_bilinear;
use mixseg_nn::{sigmoid, softplus, Adam, AdamConfig, Checkpoint, CheckpointMeta, ParamGrads, ParamStore, Tape};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::training::{
    batch_gradients, ensure_finite, image_tensor, min_max_normalize, save_intermediate, MetricsLog, TrainOptions,
    TrainRun,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub architecture_id: String,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            architecture_id: "small-cnn".into(),
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 16,
            epochs: 3,
            checkpoint_every: 4800,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("classifier learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("classifier batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("classifier epochs must be at least 1"));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation("adam betas must lie in [0, 1)"));
            }
        }
        match self.architecture_id.as_str() {
            "small-cnn" | "linear-probe" => Ok(()),
            id if RESERVED_IDS.contains(&id) => Err(reserved_error(id)),
            id => Err(Error::validation(format!("unknown classifier architecture {id:?}"))),
        }
    }
}

/// Inputs to Grad-CAM for one image: activations of the designated layer,
/// class scores and the gradient of every score with respect to every
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub struct CamContext {
    /// `(K, h, w)`.
    pub features: Array3<f64>,
    /// Pre-sigmoid class scores, length `C`.
    pub scores: Vec<f64>,
    /// `(C, K, h, w)`.
    pub gradients: Array4<f64>,
}

impl CamContext {
    pub fn classes(&self) -> usize {
        self.scores.len()
    }

    /// Per-map importance weights: spatial mean of the score gradient.
    pub fn alpha(&self, class: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        let g = self.gradients.index_axis(Axis(0), class);
        let z = (g.dim().1 * g.dim().2) as f64;
        Ok(g.outer_iter().map(|m| m.sum() / z).collect())
    }

    /// `ReLU(Σ_k α_k A^k)` at feature resolution.
    pub fn coarse_map(&self, class: usize) -> Result<Array2<f64>> {
        let alpha = self.alpha(class)?;
        let (_, h, w) = self.features.dim();
        let mut map = Array2::zeros((h, w));
        for (a, fmap) in alpha.iter().zip(self.features.outer_iter()) {
            map.scaled_add(*a, &fmap);
        }
        map.mapv_inplace(|v| v.max(0.0));
        Ok(map)
    }

    /// Coarse map, bilinearly resized to `(height, width)` and min-max
    /// normalized.
    pub fn heatmap(&self, class: usize, height: usize, width: usize) -> Result<Array2<f64>> {
        let coarse = self.coarse_map(class)?.insert_axis(Axis(0));
        let mut up = upsample_bilinear(coarse.view(), height, width).index_axis_move(Axis(0), 0);
        up.mapv_inplace(|v| v.max(0.0));
        min_max_normalize(&mut up);
        Ok(up)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::validation(format!(
                "class index {class} out of range for {} classes",
                self.classes()
            )));
        }
        Ok(())
    }
}

/// Anything that can expose Grad-CAM inputs for an image.
pub trait CamModel: Sync {
    fn classes(&self) -> usize;
    fn cam_context(&self, image: &Array2<f64>) -> Result<CamContext>;

    fn grad_cam(&self, image: &Array2<f64>, class: usize) -> Result<Array2<f64>> {
        let (h, w) = image.dim();
        self.cam_context(image)?.heatmap(class, h, w)
    }
}

/// Runs the `small-cnn` head on fixed activations and returns per-class
/// gradients with respect to those activations.
fn head_gradients(spec: &ClassifierSpec, params: &ParamStore, features: &Array3<f64>) -> Result<(Vec<f64>, Array4<f64>)> {
    let classes = spec.classes;
    let (k, h, w) = features.dim();
    let mut grads = Array4::zeros((classes, k, h, w));
    let mut scores = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut tape = Tape::new(params);
        let a = tape.leaf(features.clone());
        let logits = spec.head_forward(&mut tape, a)?;
        if c == 0 {
            scores.extend(tape.value(logits).iter().copied());
        }
        let mut seed = Array3::zeros((classes, 1, 1));
        seed[[c, 0, 0]] = 1.0;
        let g = tape.backward(&[(logits, seed)]);
        grads.index_axis_mut(Axis(0), c).assign(g.node(a).expect("leaf gradient"));
    }
    Ok((scores, grads))
}

/// A fixed set of feature maps followed by global average pooling and a
/// linear head. The image argument is ignored; this is the reference
/// network for checking Grad-CAM against hand calculations.
#[derive(Debug, Clone)]
pub struct FixedFeatureHead {
    spec: ClassifierSpec,
    params: ParamStore,
    features: Array3<f64>,
}

impl FixedFeatureHead {
    /// `weights` is `(C, K)`; `features` is `(K, h, w)`.
    pub fn new(features: Array3<f64>, weights: Array2<f64>, bias: Vec<f64>) -> Result<Self> {
        let (classes, k) = weights.dim();
        if k != features.dim().0 || bias.len() != classes {
            return Err(Error::validation("head weights do not match feature maps"));
        }
        let mut spec = ClassifierSpec::new(classes);
        spec.cam_width = k;
        let mut params = ParamStore::new();
        params.insert("head.weight", weights.into_shape_with_order((classes, k, 1, 1)).expect("reshape").into_dyn());
        params.insert("head.bias", ndarray::Array1::from(bias).into_dyn());
        Ok(Self { spec, params, features })
    }

    pub fn features(&self) -> &Array3<f64> {
        &self.features
    }

    /// Class scores for arbitrary feature maps.
    pub fn scores_for(&self, features: &Array3<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let a = tape.input(features.clone());
        let logits = self.spec.head_forward(&mut tape, a)?;
        Ok(tape.value(logits).iter().copied().collect())
    }
}

impl CamModel for FixedFeatureHead {
    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn cam_context(&self, _image: &Array2<f64>) -> Result<CamContext> {
        let (scores, gradients) = head_gradients(&self.spec, &self.params, &self.features)?;
        Ok(CamContext {
            features: self.features.clone(),
            scores,
            gradients,
        })
    }
}

#[derive(Debug, Clone)]
enum Net {
    Cnn(ClassifierSpec),
    Linear(LinearSpec),
}

/// A loaded classifier checkpoint.
#[derive(Debug, Clone)]
pub struct Classifier {
    net: Net,
    pub params: ParamStore,
    input_shape: Option<(usize, usize)>,
}

fn bce_with_logits(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

impl Classifier {
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let net = match &checkpoint.meta.arch {
            ArchSpec::Classifier(s) => Net::Cnn(s.clone()),
            ArchSpec::Linear(s) => Net::Linear(s.clone()),
            other => {
                return Err(Error::validation(format!(
                    "checkpoint holds a {:?} model, expected a classifier",
                    other.id()
                )))
            }
        };
        let input_shape = input_shape_of(&checkpoint.meta);
        let template = checkpoint.meta.arch.init(0);
        let mut params = template;
        params.load_from(&checkpoint.params)?;
        Ok(Self {
            net,
            params,
            input_shape,
        })
    }

    pub fn classes(&self) -> usize {
        match &self.net {
            Net::Cnn(s) => s.classes,
            Net::Linear(s) => s.classes,
        }
    }

    fn check_image(&self, image: &Array2<f64>) -> Result<()> {
        let (h, w) = image.dim();
        let expected = match &self.net {
            Net::Linear(s) => Some((s.height, s.width)),
            Net::Cnn(_) => self.input_shape,
        };
        if let Some(e) = expected {
            if e != (h, w) {
                return Err(Error::validation(format!("image is {h}x{w}, model expects {}x{}", e.0, e.1)));
            }
        }
        if let Net::Cnn(s) = &self.net {
            let m = s.min_input();
            if h < m || w < m {
                return Err(Error::validation(format!("image {h}x{w} smaller than minimum {m}x{m}")));
            }
        }
        Ok(())
    }

    /// Pre-sigmoid class scores.
    pub fn logits(&self, image: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_image(image)?;
        logits_with(&self.net, &self.params, image)
    }

    pub fn predict_probs(&self, image: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.logits(image)?.into_iter().map(sigmoid).collect())
    }
}

fn logits_with(net: &Net, params: &ParamStore, image: &Array2<f64>) -> Result<Vec<f64>> {
    match net {
        Net::Cnn(spec) => {
            let mut tape = Tape::new(params);
            let x = tape.input(image_tensor(image));
            let out = spec.forward(&mut tape, x)?;
            Ok(tape.value(out.logits).iter().copied().collect())
        }
        Net::Linear(spec) => {
            let w = params.get("linear.weight").expect("linear weight");
            let b = params.get("linear.bias").expect("linear bias");
            let x: Vec<f64> = image.iter().copied().collect();
            Ok((0..spec.classes)
                .map(|c| {
                    let row = w.index_axis(Axis(0), c);
                    row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b[c]
                })
                .collect())
        }
    }
}

/// Mean multi-label BCE of one image and its parameter gradient.
fn loss_and_grads(net: &Net, params: &ParamStore, image: &Array2<f64>, targets: &[f64]) -> Result<(f64, ParamGrads)> {
    let classes = targets.len() as f64;
    match net {
        Net::Cnn(spec) => {
            let mut tape = Tape::new(params);
            let x = tape.input(image_tensor(image));
            let out = spec.forward(&mut tape, x)?;
            let z = tape.value(out.logits);
            let mut loss = 0.0;
            let mut seed = Array3::zeros(z.dim());
            for (c, &y) in targets.iter().enumerate() {
                let zc = z[[c, 0, 0]];
                loss += bce_with_logits(zc, y) / classes;
                seed[[c, 0, 0]] = (sigmoid(zc) - y) / classes;
            }
            let g = tape.backward(&[(out.logits, seed)]);
            Ok((loss, g.params))
        }
        Net::Linear(spec) => {
            let z = logits_with(net, params, image)?;
            let mut grads = params.zeros_like();
            let wid = params.id("linear.weight")?;
            let bid = params.id("linear.bias")?;
            let mut loss = 0.0;
            for c in 0..spec.classes {
                loss += bce_with_logits(z[c], targets[c]) / classes;
                let d = (sigmoid(z[c]) - targets[c]) / classes;
                grads.grads[bid.0][c] += d;
                let mut row = grads.grads[wid.0].index_axis_mut(Axis(0), c);
                row.iter_mut().zip(image.iter()).for_each(|(g, x)| *g += d * x);
            }
            Ok((loss, grads))
        }
    }
}

impl CamModel for Classifier {
    fn classes(&self) -> usize {
        Classifier::classes(self)
    }

    fn cam_context(&self, image: &Array2<f64>) -> Result<CamContext> {
        self.check_image(image)?;
        let Net::Cnn(spec) = &self.net else {
            return Err(Error::validation("linear-probe classifiers have no Grad-CAM layer"));
        };
        let mut tape = Tape::new(&self.params);
        let x = tape.input(image_tensor(image));
        let out = spec.forward(&mut tape, x)?;
        let features = tape.value(out.cam_layer).clone();
        let (scores, gradients) = head_gradients(spec, &self.params, &features)?;
        Ok(CamContext {
            features,
            scores,
            gradients,
        })
    }
}

pub(crate) fn input_shape_of(meta: &CheckpointMeta) -> Option<(usize, usize)> {
    let h = meta.extra.get("input_height")?.parse().ok()?;
    let w = meta.extra.get("input_width")?.parse().ok()?;
    Some((h, w))
}

pub(crate) fn set_input_shape(meta: &mut CheckpointMeta, (h, w): (usize, usize)) {
    meta.extra.insert("input_height".into(), h.to_string());
    meta.extra.insert("input_width".into(), w.to_string());
}

pub(crate) fn common_shape<'a>(images: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<(usize, usize)> {
    let mut shape = None;
    for img in images {
        match shape {
            None => shape = Some(img.dim()),
            Some(s) if s != img.dim() => {
                return Err(Error::validation(format!("images differ in shape: {s:?} vs {:?}", img.dim())))
            }
            _ => {}
        }
    }
    shape.ok_or_else(|| Error::validation("no images"))
}

/// Trains a classifier on image-level labels (unknown counts as negative).
pub fn train_classifier(
    samples: &[ImageSample],
    taxonomy: &ClassTaxonomy,
    config: &ClassifierConfig,
    options: &TrainOptions,
) -> Result<TrainRun> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::validation("classifier training set is empty"));
    }
    let shape = common_shape(samples.iter().map(|s| &s.image))?;
    let classes = taxonomy.count();
    let arch = match config.architecture_id.as_str() {
        "linear-probe" => ArchSpec::Linear(LinearSpec {
            height: shape.0,
            width: shape.1,
            classes,
        }),
        _ => {
            let spec = ClassifierSpec::new(classes);
            if shape.0 < spec.min_input() || shape.1 < spec.min_input() {
                return Err(Error::validation(format!("images must be at least {0}x{0}", spec.min_input())));
            }
            ArchSpec::Classifier(spec)
        }
    };
    let net = match &arch {
        ArchSpec::Classifier(s) => Net::Cnn(s.clone()),
        ArchSpec::Linear(s) => Net::Linear(s.clone()),
        _ => unreachable!("classifier architectures only"),
    };
    let mut params = arch.init(config.seed);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut meta = CheckpointMeta::new(arch, taxonomy.hash(), config.seed, hash::hash_json(config));
    meta.extra.insert("init".into(), "random".into());
    set_input_shape(&mut meta, shape);

    let targets: Vec<Vec<f64>> = samples.iter().map(|s| s.label_targets()).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = MetricsLog::new(options.metrics_path.as_deref())?;
    let mut iteration = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            iteration += 1;
            let (loss, grads) = batch_gradients(batch, |&i| {
                loss_and_grads(&net, &params, &samples[i].image, &targets[i])
            })?;
            ensure_finite(loss, iteration)?;
            adam.step(&mut params, &grads);
            log.record(iteration, loss, config.learning_rate, BTreeMap::new())?;
            if config.checkpoint_every > 0 && iteration.is_multiple_of(config.checkpoint_every) {
                meta.iteration = iteration;
                save_intermediate(
                    options.checkpoint_dir.as_deref(),
                    "classifier",
                    &Checkpoint::new(meta.clone(), params.clone()),
                )?;
            }
        }
    }
    meta.iteration = iteration;
    Ok(TrainRun {
        checkpoint: Checkpoint::new(meta, params),
        history: log.finish()?,
    })
}

/// Sigmoid probabilities of a classifier checkpoint on one image.
pub fn predict_probs(checkpoint: &Checkpoint, image: &Array2<f64>) -> Result<Vec<f64>> {
    Classifier::from_checkpoint(checkpoint)?.predict_probs(image)
}

/// Grad-CAM heatmap of one class, at image resolution, in `[0, 1]`.
pub fn grad_cam(checkpoint: &Checkpoint, image: &Array2<f64>, class: usize) -> Result<Array2<f64>> {
    let model = Classifier::from_checkpoint(checkpoint)?;
    if class >= model.classes() {
        return Err(Error::validation(format!("class index {class} out of range")));
    }
    model.grad_cam(image, class)
}

/// Heatmaps for every positively labeled class; other planes stay zero.
pub fn heatmaps_for(model: &dyn CamModel, sample: &ImageSample) -> Result<HeatmapSet> {
    let (h, w) = sample.image.dim();
    let mut set = HeatmapSet::zeros(model.classes(), h, w);
    let positives = sample.positive_classes();
    if positives.is_empty() {
        return Ok(set);
    }
    let ctx = model.cam_context(&sample.image)?;
    for c in positives {
        set.set_plane(c, ctx.heatmap(c, h, w)?.view())?;
    }
    Ok(set)
}

pub fn generate_heatmaps(model: &dyn CamModel, samples: &[ImageSample]) -> Result<Vec<HeatmapSet>> {
    samples.par_iter().map(|s| heatmaps_for(model, s)).collect()
}

/// Metadata written next to a directory of heatmap planes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapStoreInfo {
    pub classes: Vec<String>,
    pub checkpoint_hash: String,
    pub ids: Vec<String>,
    /// Which classes have a stored plane, per id. Missing planes are zero.
    pub planes: BTreeMap<String, Vec<String>>,
}

/// Heatmaps stored as 16-bit PNG planes: `<dir>/<id>/<class>.png`.
pub struct HeatmapStore;

impl HeatmapStore {
    pub const INFO: &'static str = "heatmaps.json";

    pub fn write(
        dir: &Path,
        taxonomy: &ClassTaxonomy,
        samples: &[ImageSample],
        heatmaps: &[HeatmapSet],
        checkpoint_hash: &str,
    ) -> Result<PathBuf> {
        if samples.len() != heatmaps.len() {
            return Err(Error::validation("one heatmap set per sample is required"));
        }
        let mut planes = BTreeMap::new();
        for (s, hm) in samples.iter().zip(heatmaps) {
            let mut names = Vec::new();
            for c in s.positive_classes() {
                let name = taxonomy.name(c);
                imageio::write_prob16(&dir.join(&s.id).join(format!("{name}.png")), hm.plane(c))?;
                names.push(name.to_string());
            }
            planes.insert(s.id.clone(), names);
        }
        let info = HeatmapStoreInfo {
            classes: taxonomy.names().to_vec(),
            checkpoint_hash: checkpoint_hash.to_string(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            planes,
        };
        let path = dir.join(Self::INFO);
        let text = serde_json::to_string_pretty(&info).map_err(|e| Error::runtime(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads the heatmaps of `samples`, in order.
    pub fn read(dir: &Path, taxonomy: &ClassTaxonomy, samples: &[ImageSample]) -> Result<Vec<HeatmapSet>> {
        let info = Self::info(dir)?;
        if info.classes != taxonomy.names() {
            return Err(Error::validation("heatmap store taxonomy differs from the dataset's"));
        }
        samples
            .iter()
            .map(|s| {
                let (h, w) = s.image.dim();
                let mut set = HeatmapSet::zeros(taxonomy.count(), h, w);
                let names = info
                    .planes
                    .get(&s.id)
                    .ok_or_else(|| Error::validation(format!("no heatmaps stored for {}", s.id)))?;
                for name in names {
                    let c = taxonomy
                        .index_of(name)
                        .ok_or_else(|| Error::validation(format!("unknown class {name:?} in heatmap store")))?;
                    let plane = imageio::read_prob16(&dir.join(&s.id).join(format!("{name}.png")))?;
                    if plane.dim() != (h, w) {
                        return Err(Error::validation(format!("heatmap for {} has the wrong shape", s.id)));
                    }
                    set.set_plane(c, plane.view())?;
                }
                Ok(set)
            })
            .collect()
    }

    pub fn info(dir: &Path) -> Result<HeatmapStoreInfo> {
        let path = dir.join(Self::INFO);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::validation(format!("heatmap store {} not found", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1};

    #[test]
    fn config_defaults_and_validation() {
        let c = ClassifierConfig::default();
        assert_eq!((c.learning_rate, c.adam_beta1, c.adam_beta2), (1e-4, 0.9, 0.999));
        assert_eq!((c.batch_size, c.epochs, c.checkpoint_every), (16, 3, 4800));
        c.validate().unwrap();
        let bad = ClassifierConfig { epochs: 0, ..c.clone() };
        assert!(bad.validate().unwrap_err().is_validation());
        let reserved = ClassifierConfig { architecture_id: "densenet121-like".into(), ..c };
        assert!(reserved.validate().unwrap_err().to_string().contains("reserved"));
    }

    #[test]
    fn single_map_mean_score_gives_relu_of_map() {
        let fmap = arr2(&[[0.2, -0.4], [1.0, 0.6]]).insert_axis(Axis(0));
        let head = FixedFeatureHead::new(fmap, arr2(&[[1.0]]), vec![0.0]).unwrap();
        let ctx = head.cam_context(&Array2::zeros((2, 2))).unwrap();
        // Gradient of a spatial mean is 1/Z everywhere.
        assert_eq!(ctx.alpha(0).unwrap(), vec![0.25]);
        let coarse = ctx.coarse_map(0).unwrap();
        assert_eq!(coarse, arr2(&[[0.05, 0.0], [0.25, 0.15]]));
        let hm = ctx.heatmap(0, 2, 2).unwrap();
        assert_eq!(hm, arr2(&[[0.2, 0.0], [1.0, 0.6]]));
    }

    #[test]
    fn negated_score_on_nonnegative_map_is_empty() {
        let fmap = arr2(&[[0.2, 0.4], [1.0, 0.6]]).insert_axis(Axis(0));
        let head = FixedFeatureHead::new(fmap, arr2(&[[-1.0]]), vec![0.0]).unwrap();
        let hm = head.grad_cam(&Array2::zeros((4, 4)), 0).unwrap();
        assert!(hm.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_out_of_range_is_rejected() {
        let head = FixedFeatureHead::new(Array3::ones((1, 2, 2)), arr2(&[[1.0]]), vec![0.0]).unwrap();
        assert!(head.grad_cam(&Array2::zeros((2, 2)), 1).unwrap_err().is_validation());
    }

    #[test]
    fn positive_rescaling_leaves_heatmap_unchanged() {
        let fmaps = Array3::from_shape_fn((2, 3, 3), |(k, i, j)| ((k * 9 + i * 3 + j) as f64 * 0.37).sin());
        let w = arr2(&[[0.8, -0.3]]);
        let a = FixedFeatureHead::new(fmaps.clone(), w.clone(), vec![0.1]).unwrap();
        let b = FixedFeatureHead::new(fmaps * 4.0, w, vec![0.1]).unwrap();
        let img = Array2::zeros((12, 12));
        assert_eq!(a.grad_cam(&img, 0).unwrap(), b.grad_cam(&img, 0).unwrap());
    }

    #[test]
    fn linear_probe_matches_closed_form() {
        let spec = LinearSpec {
            height: 2,
            width: 2,
            classes: 2,
        };
        let mut params = spec.init(0);
        params
            .get_mut("linear.weight")
            .unwrap()
            .assign(&arr2(&[[0.5, -1.0, 2.0, 0.0], [0.0, 0.0, 0.0, 0.0]]).into_dyn());
        params.get_mut("linear.bias").unwrap().assign(&Array1::from(vec![0.25, 0.0]).into_dyn());
        let meta = CheckpointMeta::new(ArchSpec::Linear(spec), "t", 0, "c");
        let ck = Checkpoint::new(meta, params);
        let image = arr2(&[[0.2, 0.4], [0.6, 0.8]]);
        let p = predict_probs(&ck, &image).unwrap();
        // 0.5*0.2 - 1.0*0.4 + 2.0*0.6 + 0.25 = 1.15
        assert!((p[0] - 1.0 / (1.0 + (-1.15f64).exp())).abs() < 1e-15);
        assert_eq!(p[1], 0.5);
        assert!(predict_probs(&ck, &Array2::zeros((3, 2))).unwrap_err().is_validation());
        assert!(grad_cam(&ck, &image, 0).unwrap_err().is_validation());
    }

    #[test]
    fn zero_weight_classifier_predicts_one_half() {
        let spec = ClassifierSpec::new(3);
        let mut params = spec.init(1);
        for (_, v) in params.iter_mut() {
            v.fill(0.0);
        }
        let ck = Checkpoint::new(CheckpointMeta::new(ArchSpec::Classifier(spec), "t", 1, "c"), params);
        let p = predict_probs(&ck, &Array2::from_elem((16, 16), 0.7)).unwrap();
        assert_eq!(p, vec![0.5; 3]);
    }
}
