//! Newline-delimited JSON dataset manifests.
//!
//! One record per line:
//!
//! ```text
//! {"id":"img0001","image":"images/img0001.png","labels":{"ring":"pos","blob":"neg"},
//!  "expert_masks":{"ring":"masks/expert/img0001/ring.png"},"split":"train"}
//! ```
//!
//! Relative paths resolve against the manifest's directory. Mask maps may
//! list a subset of classes; unlisted classes load as empty planes.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{imageio, ClassTaxonomy, Error, MaskSet, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
    #[serde(rename = "unk")]
    Unknown,
}

impl Label {
    /// Training target: unknown counts as negative.
    pub fn as_target(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative | Label::Unknown => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One manifest line, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub labels: BTreeMap<String, Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_masks: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_masks: Option<BTreeMap<String, String>>,
    pub split: Split,
}

/// A fully loaded, validated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Array2<f64>,
    pub labels: Vec<Label>,
    pub expert_masks: Option<MaskSet>,
    pub pseudo_masks: Option<MaskSet>,
    pub split: Split,
}

impl ImageSample {
    pub fn is_positive(&self, class: usize) -> bool {
        self.labels[class] == Label::Positive
    }

    pub fn positive_classes(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&c| self.is_positive(c)).collect()
    }

    pub fn label_targets(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.as_target()).collect()
    }
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| {
            Error::validation(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_mask_map(
    base: &Path,
    record: &SampleRecord,
    map: &BTreeMap<String, String>,
    taxonomy: &ClassTaxonomy,
    (h, w): (usize, usize),
) -> Result<MaskSet> {
    let mut set = MaskSet::zeros(taxonomy.count(), h, w);
    for (class, rel) in map {
        let c = taxonomy.index_of(class).ok_or_else(|| {
            Error::validation(format!("record {}: unknown class {class:?} in mask map", record.id))
        })?;
        let path = resolve(base, rel);
        let mask = imageio::read_mask(&path)
            .map_err(|e| Error::validation(format!("record {}: {e}", record.id)))?;
        if mask.dim() != (h, w) {
            return Err(Error::validation(format!(
                "record {}: mask {} is {:?}, image is {:?}",
                record.id,
                path.display(),
                mask.dim(),
                (h, w)
            )));
        }
        set.set_plane(c, mask.view())?;
    }
    Ok(set)
}

/// Loads a single record relative to `base`.
pub fn load_record(base: &Path, record: &SampleRecord, taxonomy: &ClassTaxonomy) -> Result<ImageSample> {
    let mut labels = vec![Label::Unknown; taxonomy.count()];
    for (class, label) in &record.labels {
        let c = taxonomy.index_of(class).ok_or_else(|| {
            Error::validation(format!("record {}: unknown class {class:?}", record.id))
        })?;
        labels[c] = *label;
    }
    let image_path = resolve(base, &record.image);
    let image = imageio::read_gray(&image_path)
        .map_err(|e| Error::validation(format!("record {}: {e}", record.id)))?;
    let dim = image.dim();
    let expert_masks = record
        .expert_masks
        .as_ref()
        .map(|m| load_mask_map(base, record, m, taxonomy, dim))
        .transpose()?;
    let pseudo_masks = record
        .pseudo_masks
        .as_ref()
        .map(|m| load_mask_map(base, record, m, taxonomy, dim))
        .transpose()?;
    Ok(ImageSample {
        id: record.id.clone(),
        image,
        labels,
        expert_masks,
        pseudo_masks,
        split: record.split,
    })
}

/// Parses and validates a manifest, loading every referenced file.
pub fn load_manifest(path: &Path, taxonomy: &ClassTaxonomy) -> Result<Vec<ImageSample>> {
    if !path.exists() {
        return Err(Error::validation(format!("manifest {} not found", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let records = read_records(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for record in &records {
        if !seen.insert(record.id.as_str()) {
            return Err(Error::validation(format!("duplicate id {}", record.id)));
        }
        out.push(load_record(base, record, taxonomy)?);
    }
    Ok(out)
}
