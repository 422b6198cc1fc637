//! IoU and mIoU.
//!
//! IoU is aggregated at dataset level: intersections and unions are summed
//! over all images before dividing. A zero union yields `iou: None`, which
//! is excluded from the mIoU mean.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUResult {
    pub class_id: String,
    pub intersection: u64,
    pub union: u64,
    /// `None` is the UNDEFINED sentinel (empty union).
    pub iou: Option<f64>,
}

impl IoUResult {
    pub fn from_counts(class_id: impl Into<String>, intersection: u64, union: u64) -> Self {
        let iou = (union > 0).then(|| intersection as f64 / union as f64);
        Self {
            class_id: class_id.into(),
            intersection,
            union,
            iou,
        }
    }

    pub fn with_class(mut self, class_id: impl Into<String>) -> Self {
        self.class_id = class_id.into();
        self
    }

    pub fn is_defined(&self) -> bool {
        self.iou.is_some()
    }
}

/// Intersection and union pixel counts of two binary masks.
pub fn overlap_counts(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<(u64, u64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::validation(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if p > 1 || g > 1 {
            return Err(Error::validation("iou inputs must be binary"));
        }
        inter += u64::from(p & g);
        union += u64::from(p | g);
    }
    Ok((inter, union))
}

pub fn iou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<IoUResult> {
    let (inter, union) = overlap_counts(pred, gt)?;
    Ok(IoUResult::from_counts("", inter, union))
}

/// Dataset-level IoU: summed intersections over summed unions.
pub fn dataset_iou<'a, P, G>(preds: P, gts: G) -> Result<IoUResult>
where
    P: IntoIterator<Item = ArrayView2<'a, u8>>,
    G: IntoIterator<Item = ArrayView2<'a, u8>>,
{
    let mut preds = preds.into_iter();
    let mut gts = gts.into_iter();
    let (mut inter, mut union, mut n) = (0u64, 0u64, 0usize);
    loop {
        match (preds.next(), gts.next()) {
            (Some(p), Some(g)) => {
                let (i, u) = overlap_counts(p, g)?;
                inter += i;
                union += u;
                n += 1;
            }
            (None, None) => break,
            _ => return Err(Error::validation("prediction and ground-truth counts differ")),
        }
    }
    if n == 0 {
        return Err(Error::validation("dataset_iou needs at least one mask pair"));
    }
    Ok(IoUResult::from_counts("", inter, union))
}

/// Mean of the defined per-class IoUs.
pub fn miou(per_class: &[IoUResult]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().filter_map(|r| r.iou).collect();
    if defined.is_empty() {
        return Err(Error::validation("every class IoU is undefined"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}
