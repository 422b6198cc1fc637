//! Pieces shared by every training loop: batch gradients, the metrics log
//! and run outputs.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mixseg_core::{Error, Result};
use mixseg_nn::{Checkpoint, ParamGrads};
use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A scalar loss with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<G> {
    pub value: f64,
    pub grad: G,
}

/// One line of a metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the run started.
    pub wall_clock: f64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, f64>,
}

/// Append-only metrics log, kept in memory and optionally mirrored to an
/// NDJSON file.
pub struct MetricsLog {
    records: Vec<IterationRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
    start: Instant,
}

impl MetricsLog {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let sink = match path {
            Some(p) => {
                if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Some((p.to_path_buf(), BufWriter::new(f)))
            }
            None => None,
        };
        Ok(Self {
            records: Vec::new(),
            sink,
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, iteration: u64, loss: f64, lr: f64, extra: BTreeMap<String, f64>) -> Result<()> {
        let rec = IterationRecord {
            iteration,
            loss,
            lr,
            wall_clock: self.start.elapsed().as_secs_f64(),
            extra,
        };
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&rec).map_err(|e| Error::runtime(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.clone(), e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<IterationRecord>> {
        if let Some((path, w)) = &mut self.sink {
            w.flush().map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(std::mem::take(&mut self.records))
    }
}

/// Reads a metrics log written by [`MetricsLog`].
pub fn read_metrics(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::validation(format!("{}: {e}", path.display()))))
        .collect()
}

/// Where a training run writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub metrics_path: Option<PathBuf>,
    /// Directory for intermediate checkpoints; none are written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Final checkpoint plus the per-iteration history.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<IterationRecord>,
}

/// Mean loss of each consecutive block of `per_epoch` iterations.
pub fn epoch_means(history: &[IterationRecord], per_epoch: usize) -> Vec<f64> {
    history
        .chunks(per_epoch.max(1))
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect()
}

pub fn ensure_finite(loss: f64, iteration: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { iteration, loss })
    }
}

/// Mean loss and mean gradient over a batch.
///
/// Items are processed in parallel but reduced in slice order, so the
/// result does not depend on the number of worker threads.
pub fn batch_gradients<T, F>(items: &[T], per_item: F) -> Result<(f64, ParamGrads)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, ParamGrads)> + Sync,
{
    if items.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let parts: Vec<(f64, ParamGrads)> = items.par_iter().map(&per_item).collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

pub fn save_intermediate(dir: Option<&Path>, stem: &str, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(dir) = dir {
        checkpoint.save(&dir.join(format!("{stem}_iter{:06}.ckpt", checkpoint.meta.iteration)))?;
    }
    Ok(())
}

/// Adds a leading channel axis.
pub fn image_tensor(image: &Array2<f64>) -> Array3<f64> {
    image.clone().insert_axis(Axis(0))
}

/// Min-max normalization to `[0, 1]`. Constant planes map to zeros when
/// they are zero and to ones otherwise.
pub fn min_max_normalize(plane: &mut Array2<f64>) {
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if plane.is_empty() {
        return;
    }
    if hi > lo {
        let span = hi - lo;
        plane.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
    } else {
        let fill = if hi == 0.0 { 0.0 } else { 1.0 };
        plane.fill(fill);
    }
}
