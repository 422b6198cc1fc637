//! Architecture registry.
//!
//! Three desk-scale networks share one encoder layout (`small-cnn`):
//! three `conv3x3 → group-norm → ReLU → max-pool` blocks whose parameters
//! live under the `encoder.` prefix. Copying that subtree between
//! checkpoints is how encoder initialization works.
//!
//! * `small-cnn` classifier: encoder, a fourth conv block (the Grad-CAM
//!   layer), global average pool and a per-class linear head. Class scores
//!   are therefore linear in the Grad-CAM activations.
//! * `deeplab-lite` segmenter: encoder, a dilated context block (rates
//!   1/2/4), fusion with stride-4 low-level features and bilinear
//!   upsampling to the input size.
//! * `irnet-lite`: encoder with a displacement head (2 channels) and a
//!   boundary head (1 channel, pre-sigmoid) at stride 4.
//! * `linear-probe`: one dense layer over raw pixels. It has no encoder and
//!   no Grad-CAM layer; it exists as a transparent baseline.

use mixseg_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::init;
use crate::ops::ConvGeom;
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};

pub const ENCODER_ID: &str = "small-cnn";
pub const ENCODER_PREFIX: &str = "encoder.";

/// Identifiers reserved for full-scale backbones that this build does not
/// ship.
pub const RESERVED_IDS: [&str; 4] = ["densenet121-like", "deeplabv3plus", "resnet50", "resnet18"];

pub fn reserved_error(id: &str) -> Error {
    Error::validation(format!(
        "architecture {id:?} is reserved for full-scale runtimes and is not available in this build"
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub groups: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![8, 16, 32],
            groups: 4,
        }
    }
}

fn add_conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{prefix}.weight"), init::kaiming_conv(rng, cout, cin, k));
    store.insert(format!("{prefix}.bias"), init::zeros(&[cout]));
}

fn add_norm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), init::ones(&[c]));
    store.insert(format!("{prefix}.beta"), init::zeros(&[c]));
}

fn conv(tape: &mut Tape<'_>, x: NodeId, prefix: &str, geom: ConvGeom) -> Result<NodeId> {
    let p = tape.params();
    let w = p.id(&format!("{prefix}.weight"))?;
    let b = p.id(&format!("{prefix}.bias"))?;
    Ok(tape.conv2d(x, w, Some(b), geom))
}

fn norm_relu(tape: &mut Tape<'_>, x: NodeId, prefix: &str, groups: usize) -> Result<NodeId> {
    let p = tape.params();
    let g = p.id(&format!("{prefix}.gamma"))?;
    let b = p.id(&format!("{prefix}.beta"))?;
    let n = tape.group_norm(x, g, b, groups);
    Ok(tape.relu(n))
}

fn conv_norm_relu(tape: &mut Tape<'_>, x: NodeId, prefix: &str, geom: ConvGeom, groups: usize) -> Result<NodeId> {
    let c = conv(tape, x, &format!("{prefix}.conv"), geom)?;
    norm_relu(tape, c, &format!("{prefix}.norm"), groups)
}

fn add_conv_norm(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, cout: usize, k: usize) {
    add_conv(store, rng, &format!("{prefix}.conv"), cin, cout, k);
    add_norm(store, &format!("{prefix}.norm"), cout);
}

impl EncoderSpec {
    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("nonempty widths")
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            add_conv_norm(store, rng, &format!("encoder.block{i}"), cin, w, 3);
            cin = w;
        }
    }

    /// Outputs of every block (after pooling), finest first.
    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<Vec<NodeId>> {
        let mut feats = Vec::with_capacity(self.widths.len());
        let mut h = x;
        for i in 0..self.widths.len() {
            let a = conv_norm_relu(tape, h, &format!("encoder.block{i}"), ConvGeom::same(3, 1), self.groups)?;
            h = tape.max_pool2(a);
            feats.push(h);
        }
        Ok(feats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|w| w % self.groups != 0) {
            return Err(Error::validation("encoder widths must be nonempty multiples of groups"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub encoder: EncoderSpec,
    pub cam_width: usize,
    pub classes: usize,
}

pub struct ClassifierForward {
    pub logits: NodeId,
    /// Activations of the designated Grad-CAM layer.
    pub cam_layer: NodeId,
}

impl ClassifierSpec {
    pub fn new(classes: usize) -> Self {
        Self {
            encoder: EncoderSpec::default(),
            cam_width: 32,
            classes,
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        add_conv_norm(&mut store, &mut rng, "cam", self.encoder.out_channels(), self.cam_width, 3);
        store.insert("head.weight", init::normal(&mut rng, &[self.classes, self.cam_width, 1, 1], 0.01));
        store.insert("head.bias", init::zeros(&[self.classes]));
        store
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<ClassifierForward> {
        let feats = self.encoder.forward(tape, x)?;
        let last = *feats.last().expect("nonempty encoder");
        let cam_layer = conv_norm_relu(tape, last, "cam", ConvGeom::same(3, 1), self.encoder.groups)?;
        let logits = self.head_forward(tape, cam_layer)?;
        Ok(ClassifierForward { logits, cam_layer })
    }

    /// Global average pool plus the linear head, applied to Grad-CAM layer
    /// activations.
    pub fn head_forward(&self, tape: &mut Tape<'_>, cam_layer: NodeId) -> Result<NodeId> {
        let gap = tape.global_avg_pool(cam_layer);
        conv(tape, gap, "head", ConvGeom::same(1, 1))
    }

    /// Smallest input side the forward pass accepts.
    pub fn min_input(&self) -> usize {
        1 << self.encoder.widths.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterSpec {
    pub encoder: EncoderSpec,
    pub context_branch_width: usize,
    pub context_rates: Vec<usize>,
    pub context_width: usize,
    pub decoder_width: usize,
    pub classes: usize,
}

impl SegmenterSpec {
    pub fn new(classes: usize) -> Self {
        Self {
            encoder: EncoderSpec::default(),
            context_branch_width: 12,
            context_rates: vec![1, 2, 4],
            context_width: 32,
            decoder_width: 16,
            classes,
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        let deep = self.encoder.out_channels();
        for (i, _) in self.context_rates.iter().enumerate() {
            add_conv_norm(&mut store, &mut rng, &format!("context.branch{i}"), deep, self.context_branch_width, 3);
        }
        let cat = self.context_branch_width * self.context_rates.len();
        add_conv_norm(&mut store, &mut rng, "context.project", cat, self.context_width, 1);
        let low = self.low_level_channels();
        add_conv_norm(&mut store, &mut rng, "decoder.low", low, low, 1);
        add_conv_norm(&mut store, &mut rng, "decoder.fuse", self.context_width + low, self.decoder_width, 3);
        add_conv(&mut store, &mut rng, "decoder.classifier", self.decoder_width, self.classes, 1);
        store
    }

    fn low_level_index(&self) -> usize {
        self.encoder.widths.len().saturating_sub(2)
    }

    fn low_level_channels(&self) -> usize {
        self.encoder.widths[self.low_level_index()]
    }

    /// Returns per-class logits at input resolution.
    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        let (_, h, w) = tape.value(x).dim();
        let g = self.encoder.groups;
        let feats = self.encoder.forward(tape, x)?;
        let deep = *feats.last().expect("nonempty encoder");
        let mut branches = Vec::with_capacity(self.context_rates.len());
        for (i, &rate) in self.context_rates.iter().enumerate() {
            branches.push(conv_norm_relu(tape, deep, &format!("context.branch{i}"), ConvGeom::same(3, rate), g)?);
        }
        let cat = tape.concat(&branches);
        let ctx = conv_norm_relu(tape, cat, "context.project", ConvGeom::same(1, 1), g)?;
        let low_feat = feats[self.low_level_index()];
        let (_, lh, lw) = tape.value(low_feat).dim();
        let up = tape.upsample(ctx, lh, lw);
        let low = conv_norm_relu(tape, low_feat, "decoder.low", ConvGeom::same(1, 1), g)?;
        let fused_in = tape.concat(&[up, low]);
        let fused = conv_norm_relu(tape, fused_in, "decoder.fuse", ConvGeom::same(3, 1), g)?;
        let logits = conv(tape, fused, "decoder.classifier", ConvGeom::same(1, 1))?;
        Ok(tape.upsample(logits, h, w))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrnetSpec {
    pub encoder: EncoderSpec,
    pub width: usize,
}

pub struct IrnetForward {
    /// `(2, h, w)` displacement field (row, column components).
    pub displacement: NodeId,
    /// `(1, h, w)` boundary logits.
    pub boundary_logits: NodeId,
}

impl Default for IrnetSpec {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            width: 16,
        }
    }
}

impl IrnetSpec {
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        let n = self.encoder.widths.len();
        let cin = self.encoder.widths[n - 1] + self.encoder.widths[n.saturating_sub(2)];
        add_conv_norm(&mut store, &mut rng, "irnet.trunk", cin, self.width, 3);
        add_conv(&mut store, &mut rng, "irnet.displacement", self.width, 2, 1);
        add_conv(&mut store, &mut rng, "irnet.boundary", self.width, 1, 1);
        store
    }

    /// Downsampling factor between image and head resolution.
    pub fn stride(&self) -> usize {
        1 << (self.encoder.widths.len() - 1)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<IrnetForward> {
        let feats = self.encoder.forward(tape, x)?;
        let n = feats.len();
        let mid = feats[n.saturating_sub(2)];
        let (_, mh, mw) = tape.value(mid).dim();
        let deep = tape.upsample(feats[n - 1], mh, mw);
        let cat = tape.concat(&[deep, mid]);
        let trunk = conv_norm_relu(tape, cat, "irnet.trunk", ConvGeom::same(3, 1), self.encoder.groups)?;
        let displacement = conv(tape, trunk, "irnet.displacement", ConvGeom::same(1, 1))?;
        let boundary_logits = conv(tape, trunk, "irnet.boundary", ConvGeom::same(1, 1))?;
        Ok(IrnetForward {
            displacement,
            boundary_logits,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl LinearSpec {
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert("linear.weight", init::normal(&mut rng, &[self.classes, self.height * self.width], 0.01));
        store.insert("linear.bias", init::zeros(&[self.classes]));
        store
    }
}

/// Serialized architecture description stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture_id")]
pub enum ArchSpec {
    #[serde(rename = "small-cnn")]
    Classifier(ClassifierSpec),
    #[serde(rename = "deeplab-lite")]
    Segmenter(SegmenterSpec),
    #[serde(rename = "irnet-lite")]
    Irnet(IrnetSpec),
    #[serde(rename = "linear-probe")]
    Linear(LinearSpec),
}

impl ArchSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ArchSpec::Classifier(_) => "small-cnn",
            ArchSpec::Segmenter(_) => "deeplab-lite",
            ArchSpec::Irnet(_) => "irnet-lite",
            ArchSpec::Linear(_) => "linear-probe",
        }
    }

    pub fn encoder(&self) -> Option<&EncoderSpec> {
        match self {
            ArchSpec::Classifier(s) => Some(&s.encoder),
            ArchSpec::Segmenter(s) => Some(&s.encoder),
            ArchSpec::Irnet(s) => Some(&s.encoder),
            ArchSpec::Linear(_) => None,
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        match self {
            ArchSpec::Classifier(s) => s.init(seed),
            ArchSpec::Segmenter(s) => s.init(seed),
            ArchSpec::Irnet(s) => s.init(seed),
            ArchSpec::Linear(s) => s.init(seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn forward_shapes() {
        let x = Array3::from_elem((1, 64, 64), 0.3);
        let cls = ClassifierSpec::new(4);
        let p = cls.init(1);
        let mut t = Tape::new(&p);
        let xi = t.input(x.clone());
        let out = cls.forward(&mut t, xi).unwrap();
        assert_eq!(t.value(out.logits).dim(), (4, 1, 1));
        assert_eq!(t.value(out.cam_layer).dim(), (32, 8, 8));

        let seg = SegmenterSpec::new(3);
        let p = seg.init(1);
        let mut t = Tape::new(&p);
        let xi = t.input(x.clone());
        let out = seg.forward(&mut t, xi).unwrap();
        assert_eq!(t.value(out).dim(), (3, 64, 64));

        let ir = IrnetSpec::default();
        let p = ir.init(1);
        let mut t = Tape::new(&p);
        let xi = t.input(x);
        let out = ir.forward(&mut t, xi).unwrap();
        assert_eq!(t.value(out.displacement).dim(), (2, 16, 16));
        assert_eq!(t.value(out.boundary_logits).dim(), (1, 16, 16));
        assert_eq!(ir.stride(), 4);
    }

    #[test]
    fn encoder_subtrees_line_up() {
        let a = ClassifierSpec::new(4).init(3).subtree(ENCODER_PREFIX);
        let mut b = SegmenterSpec::new(4).init(9);
        b.load_from(&a).unwrap();
        assert_eq!(b.subtree(ENCODER_PREFIX), a);
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let s = ArchSpec::Segmenter(SegmenterSpec::new(4));
        let v = serde_json::to_string(&s).unwrap();
        assert!(v.contains("deeplab-lite"));
        let back: ArchSpec = serde_json::from_str(&v).unwrap();
        assert_eq!(back, s);
    }
}
