//! Heatmaps to binary pseudo-label masks.

pub mod irnet;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mixseg_core::manifest::{self, SampleRecord};
use mixseg_core::{dataset_iou, hash, imageio, ClassTaxonomy, Error, HeatmapSet, ImageSample, MaskSet, Result};
use mixseg_nn::Checkpoint;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use irnet::{
    boundary_loss, displacement_loss_bg, displacement_loss_fg, instance_map, irnet_total_loss, pair_sets,
    pairwise_affinity, propagate_attention, refine_heatmaps, train_irnet, Irnet, IrnetConfig, IrnetLossParts,
    PixelPairSets, TransitionMatrix,
};

/// `{0.05, 0.10, …, 0.95}`.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

/// Which planes a threshold table was calibrated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoLabelMethod {
    CamThreshold,
    Irnet,
}

impl std::fmt::Display for PseudoLabelMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PseudoLabelMethod::CamThreshold => "cam-threshold",
            PseudoLabelMethod::Irnet => "irnet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdEntry {
    pub class: String,
    pub threshold: f64,
    /// Dataset IoU reached at `threshold`; absent when undefined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    /// Set when the class had no positive expert pixel anywhere.
    #[serde(default)]
    pub no_positive_pixels: bool,
}

/// Per-class heatmap thresholds with calibration metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdTable {
    pub method: PseudoLabelMethod,
    pub grid: Vec<f64>,
    /// Mean of the defined per-class IoUs; absent when none is defined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_miou: Option<f64>,
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdTable {
    pub fn thresholds(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.threshold).collect()
    }

    pub fn check_taxonomy(&self, taxonomy: &ClassTaxonomy) -> Result<()> {
        let names: Vec<&str> = self.entries.iter().map(|e| e.class.as_str()).collect();
        if names != taxonomy.names().iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::validation("threshold table classes do not match the taxonomy"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("threshold table serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("threshold table: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::validation(format!("threshold table {} not found", path.display())))?;
        Self::from_toml(&text)
    }
}

/// `1` where the heatmap is strictly above `t`.
pub fn threshold_cam(heatmap: ArrayView2<'_, f64>, t: f64) -> Result<Array2<u8>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("threshold {t} outside [0, 1]")));
    }
    Ok(heatmap.mapv(|v| u8::from(v > t)))
}

/// Picks, per class, the grid threshold that maximizes dataset IoU between
/// thresholded heatmaps and expert masks. Ties go to the smallest
/// threshold. Classes without any positive expert pixel get the grid
/// maximum and are flagged.
pub fn calibrate_thresholds(
    heatmaps: &[HeatmapSet],
    expert: &[MaskSet],
    grid: &[f64],
    taxonomy: &ClassTaxonomy,
    method: PseudoLabelMethod,
) -> Result<ThresholdTable> {
    if heatmaps.is_empty() {
        return Err(Error::validation("calibration needs at least one sample with expert masks"));
    }
    if heatmaps.len() != expert.len() {
        return Err(Error::validation("one expert mask set per heatmap set is required"));
    }
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::validation("threshold grid must be nonempty and within [0, 1]"));
    }
    let classes = taxonomy.count();
    for (h, m) in heatmaps.iter().zip(expert) {
        if h.dim() != m.dim() || h.classes() != classes {
            return Err(Error::validation("heatmap and expert mask shapes differ"));
        }
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let grid_max = *sorted.last().expect("nonempty");

    let entries: Vec<ThresholdEntry> = (0..classes)
        .into_par_iter()
        .map(|c| {
            let name = taxonomy.name(c).to_string();
            if expert.iter().all(|m| m.positive_count(c) == 0) {
                return Ok(ThresholdEntry {
                    class: name,
                    threshold: grid_max,
                    iou: None,
                    no_positive_pixels: true,
                });
            }
            let mut best: Option<(f64, f64)> = None;
            for &t in &sorted {
                let preds: Vec<Array2<u8>> = heatmaps
                    .iter()
                    .map(|h| threshold_cam(h.plane(c), t))
                    .collect::<Result<_>>()?;
                let r = dataset_iou(preds.iter().map(|p| p.view()), expert.iter().map(|m| m.plane(c)))?;
                let v = r.iou.unwrap_or(0.0);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((t, v));
                }
            }
            let (threshold, iou) = best.expect("nonempty grid");
            Ok(ThresholdEntry {
                class: name,
                threshold,
                iou: Some(iou),
                no_positive_pixels: false,
            })
        })
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = entries.iter().filter_map(|e| e.iou).collect();
    let achieved_miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(ThresholdTable {
        method,
        grid: sorted,
        achieved_miou,
        entries,
    })
}

/// Binary masks for the positively labeled classes of one sample; `None`
/// when the sample has no positive label.
pub fn pseudo_masks_for(sample: &ImageSample, heatmaps: &HeatmapSet, thresholds: &[f64]) -> Result<Option<MaskSet>> {
    let positives = sample.positive_classes();
    if positives.is_empty() {
        return Ok(None);
    }
    let (classes, h, w) = heatmaps.dim();
    let mut set = MaskSet::zeros(classes, h, w);
    for c in positives {
        set.set_plane(c, threshold_cam(heatmaps.plane(c), thresholds[c])?.view())?;
    }
    Ok(Some(set))
}

/// IRNet artifacts needed by the refinement path.
pub struct IrnetInputs<'a> {
    pub checkpoint: &'a Checkpoint,
    pub config: &'a IrnetConfig,
}

/// Heatmaps after IRNet refinement, one set per sample.
pub fn refined_heatmaps(
    inputs: &IrnetInputs<'_>,
    samples: &[ImageSample],
    heatmaps: &[HeatmapSet],
) -> Result<Vec<HeatmapSet>> {
    let net = Irnet::from_checkpoint(inputs.checkpoint)?;
    samples
        .par_iter()
        .zip(heatmaps)
        .map(|(s, h)| refine_heatmaps(&net, &s.image, h, inputs.config))
        .collect()
}

/// Store manifest written alongside pseudo-label masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreInfo {
    pub method: PseudoLabelMethod,
    pub thresholds: ThresholdTable,
    pub config_hash: String,
    /// Hashes of the checkpoints the labels derive from, keyed by role.
    pub source_checkpoints: BTreeMap<String, String>,
    pub classes: Vec<String>,
}

/// Pseudo-label masks on disk: `<root>/masks/<id>/<class>.png`, a dataset
/// manifest with `pseudo_masks` filled in, and `store.json`.
pub struct PseudoLabelStore;

impl PseudoLabelStore {
    pub const INFO: &'static str = "store.json";
    pub const MANIFEST: &'static str = "manifest.jsonl";

    /// Writes masks for every sample and returns the store manifest path.
    ///
    /// `image_root` is the directory the samples' images live under; image
    /// paths in the store manifest point there.
    pub fn write(
        root: &Path,
        records: &[SampleRecord],
        image_root: &Path,
        masks: &[Option<MaskSet>],
        taxonomy: &ClassTaxonomy,
        info: &StoreInfo,
    ) -> Result<PathBuf> {
        if records.len() != masks.len() {
            return Err(Error::validation("one mask entry per record is required"));
        }
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let image_root = std::path::absolute(image_root).map_err(|e| Error::io(image_root, e))?;
        let mut out = Vec::with_capacity(records.len());
        for (record, mask) in records.iter().zip(masks) {
            let mut r = record.clone();
            r.image = manifest::resolve(&image_root, &record.image).to_string_lossy().into_owned();
            r.expert_masks = record.expert_masks.as_ref().map(|m| {
                m.iter()
                    .map(|(k, v)| (k.clone(), manifest::resolve(&image_root, v).to_string_lossy().into_owned()))
                    .collect()
            });
            r.pseudo_masks = match mask {
                None => None,
                Some(set) => {
                    let mut map = BTreeMap::new();
                    for (c, name) in taxonomy.names().iter().enumerate() {
                        if !record.labels.get(name).is_some_and(|l| *l == mixseg_core::Label::Positive) {
                            continue;
                        }
                        let rel = format!("masks/{}/{}.png", record.id, name);
                        imageio::write_mask(&root.join(&rel), set.plane(c))?;
                        map.insert(name.clone(), rel);
                    }
                    Some(map)
                }
            };
            out.push(r);
        }
        let manifest_path = root.join(Self::MANIFEST);
        manifest::write_manifest(&manifest_path, &out)?;
        let info_path = root.join(Self::INFO);
        let text = serde_json::to_string_pretty(info).map_err(|e| Error::runtime(e.to_string()))?;
        std::fs::write(&info_path, text).map_err(|e| Error::io(&info_path, e))?;
        Ok(manifest_path)
    }

    pub fn info(root: &Path) -> Result<StoreInfo> {
        let path = root.join(Self::INFO);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::validation(format!("pseudo-label store {} not found", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }

    /// Loads the store's samples, pseudo masks included.
    pub fn load(root: &Path, taxonomy: &ClassTaxonomy) -> Result<Vec<ImageSample>> {
        Self::info(root)?;
        manifest::load_manifest(&root.join(Self::MANIFEST), taxonomy)
    }
}

/// Everything [`generate_pseudolabels`] needs besides the samples.
pub struct GenerateRequest<'a> {
    pub method: PseudoLabelMethod,
    pub thresholds: &'a ThresholdTable,
    pub irnet: Option<IrnetInputs<'a>>,
    pub config_hash: String,
    pub source_checkpoints: BTreeMap<String, String>,
}

/// Thresholds heatmaps (refined first for the IRNet method) into binary
/// masks for each sample's positive classes and writes a store.
///
/// For the IRNet method the table must have been calibrated on refined
/// heatmaps (see [`refined_heatmaps`]).
pub fn generate_pseudolabels(
    request: &GenerateRequest<'_>,
    samples: &[ImageSample],
    records: &[SampleRecord],
    heatmaps: &[HeatmapSet],
    taxonomy: &ClassTaxonomy,
    store_root: Option<(&Path, &Path)>,
) -> Result<Vec<Option<MaskSet>>> {
    request.thresholds.check_taxonomy(taxonomy)?;
    if samples.len() != heatmaps.len() {
        return Err(Error::validation("one heatmap set per sample is required"));
    }
    if request.thresholds.method != request.method {
        return Err(Error::validation(format!(
            "threshold table was calibrated for {}, not {}",
            request.thresholds.method, request.method
        )));
    }
    let planes = match request.method {
        PseudoLabelMethod::CamThreshold => None,
        PseudoLabelMethod::Irnet => {
            let inputs = request
                .irnet
                .as_ref()
                .ok_or_else(|| Error::validation("the irnet method needs an IRNet checkpoint"))?;
            Some(refined_heatmaps(inputs, samples, heatmaps)?)
        }
    };
    let planes = planes.as_deref().unwrap_or(heatmaps);
    let thresholds = request.thresholds.thresholds();
    let masks: Vec<Option<MaskSet>> = samples
        .par_iter()
        .zip(planes)
        .map(|(s, h)| pseudo_masks_for(s, h, &thresholds))
        .collect::<Result<_>>()?;
    if let Some((root, image_root)) = store_root {
        let info = StoreInfo {
            method: request.method,
            thresholds: request.thresholds.clone(),
            config_hash: request.config_hash.clone(),
            source_checkpoints: request.source_checkpoints.clone(),
            classes: taxonomy.names().to_vec(),
        };
        PseudoLabelStore::write(root, records, image_root, &masks, taxonomy, &info)?;
    }
    Ok(masks)
}

/// Hash of a threshold table's serialized form.
pub fn table_hash(table: &ThresholdTable) -> String {
    hash::sha256_hex(table.to_toml().as_bytes())
}
