//! Scoring, confidence intervals, reference comparisons and report plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mixseg_core::metrics::{overlap_counts, IoUResult};
use mixseg_core::{miou, ClassTaxonomy, Error, ImageSample, MaskSet, Result};
use mixseg_nn::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::segmentation::Segmenter;

/// Anything that turns a sample into per-class masks.
pub trait MaskPredictor: Sync {
    fn predict(&self, sample: &ImageSample) -> Result<MaskSet>;

    /// Identifier recorded in reports, normally a checkpoint hash.
    fn identity(&self) -> String;
}

/// A segmentation checkpoint thresholded at a fixed cutoff.
pub struct CheckpointPredictor {
    net: Segmenter,
    cutoff: f64,
    hash: String,
}

impl CheckpointPredictor {
    pub fn new(checkpoint: &Checkpoint, cutoff: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&cutoff) {
            return Err(Error::validation(format!("cutoff {cutoff} outside [0, 1]")));
        }
        Ok(Self {
            net: Segmenter::from_checkpoint(checkpoint)?,
            cutoff,
            hash: checkpoint.hash(),
        })
    }
}

impl MaskPredictor for CheckpointPredictor {
    fn predict(&self, sample: &ImageSample) -> Result<MaskSet> {
        self.net.predict_masks(&sample.image, self.cutoff)
    }

    fn identity(&self) -> String {
        self.hash.clone()
    }
}

/// Returns each sample's own expert masks.
pub struct OraclePredictor;

impl MaskPredictor for OraclePredictor {
    fn predict(&self, sample: &ImageSample) -> Result<MaskSet> {
        sample
            .expert_masks
            .clone()
            .ok_or_else(|| Error::validation(format!("sample {} has no expert masks", sample.id)))
    }

    fn identity(&self) -> String {
        "oracle".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMode {
    #[default]
    OverImages,
    OverTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CiOptions {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for CiOptions {
    fn default() -> Self {
        Self {
            level: 0.95,
            resamples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInterval {
    pub class_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub n_images: usize,
    pub per_class: Vec<IoUResult>,
    pub miou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_intervals: Option<Vec<ClassInterval>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou_interval: Option<Interval>,
}

impl EvaluationReport {
    /// Checks the report's internal consistency.
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.per_class.is_empty() {
            return Err(Error::validation("report has no images or classes"));
        }
        for r in &self.per_class {
            if r.intersection > r.union {
                return Err(Error::validation(format!("class {}: intersection exceeds union", r.class_id)));
            }
            if let Some(v) = r.iou {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::validation(format!("class {}: IoU {v} outside [0, 1]", r.class_id)));
                }
            }
        }
        if (miou(&self.per_class)? - self.miou).abs() > 1e-12 {
            return Err(Error::validation("miou disagrees with the per-class entries"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::runtime(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: Self =
            serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        report.validate()?;
        Ok(report)
    }

    /// A report whose per-class IoUs are a reference row's values.
    pub fn from_reference(table: &ReferenceTable, row: &str) -> Result<Self> {
        let r = table.row(row)?;
        let values = r
            .per_class
            .as_ref()
            .ok_or_else(|| Error::validation(format!("reference row {} has no per-class values", r.name)))?;
        let per_class: Vec<IoUResult> = table
            .classes
            .iter()
            .zip(values)
            .map(|(c, &v)| IoUResult {
                class_id: c.clone(),
                intersection: 0,
                union: 0,
                iou: Some(v),
            })
            .collect();
        Ok(Self {
            checkpoint_hash: format!("reference:{}", r.name),
            config_hash: String::new(),
            n_images: 1,
            miou: miou(&per_class)?,
            per_class,
            class_intervals: None,
            miou_interval: None,
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-image (intersection, union) counts for every class.
pub fn overlap_table(
    predictor: &dyn MaskPredictor,
    samples: &[ImageSample],
    classes: usize,
) -> Result<Vec<Vec<(u64, u64)>>> {
    if samples.is_empty() {
        return Err(Error::validation("evaluation needs at least one test sample"));
    }
    samples
        .par_iter()
        .map(|s| {
            let gt = s
                .expert_masks
                .as_ref()
                .ok_or_else(|| Error::validation(format!("test sample {} has no expert masks", s.id)))?;
            let pred = predictor.predict(s)?;
            if pred.classes() != classes || gt.classes() != classes {
                return Err(Error::validation(format!("sample {}: class count differs from the taxonomy", s.id)));
            }
            (0..classes)
                .map(|c| overlap_counts(pred.plane(c), gt.plane(c)))
                .collect()
        })
        .collect()
}

fn class_results(taxonomy: &ClassTaxonomy, counts: &[Vec<(u64, u64)>], picks: impl Iterator<Item = usize> + Clone) -> Vec<IoUResult> {
    (0..taxonomy.count())
        .map(|c| {
            let (i, u) = picks
                .clone()
                .fold((0, 0), |(i, u), k| (i + counts[k][c].0, u + counts[k][c].1));
            IoUResult::from_counts(taxonomy.name(c), i, u)
        })
        .collect()
}

/// Dataset-level per-class IoU and mIoU of `predictor` on `samples`.
pub fn evaluate(
    predictor: &dyn MaskPredictor,
    samples: &[ImageSample],
    taxonomy: &ClassTaxonomy,
    config_hash: &str,
    ci: Option<&CiOptions>,
) -> Result<EvaluationReport> {
    let counts = overlap_table(predictor, samples, taxonomy.count())?;
    let per_class = class_results(taxonomy, &counts, 0..counts.len());
    let mut report = EvaluationReport {
        checkpoint_hash: predictor.identity(),
        config_hash: config_hash.to_string(),
        n_images: samples.len(),
        miou: miou(&per_class)?,
        per_class,
        class_intervals: None,
        miou_interval: None,
    };
    if let Some(opts) = ci {
        let (classes, overall) = image_bootstrap(taxonomy, &counts, opts)?;
        report.class_intervals = Some(classes);
        report.miou_interval = overall;
    }
    Ok(report)
}

/// Loads a segmentation checkpoint and evaluates it at `cutoff`.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    samples: &[ImageSample],
    taxonomy: &ClassTaxonomy,
    cutoff: f64,
    ci: Option<&CiOptions>,
) -> Result<EvaluationReport> {
    if checkpoint.meta.taxonomy_hash != taxonomy.hash() {
        return Err(Error::validation("checkpoint was trained on a different taxonomy"));
    }
    let predictor = CheckpointPredictor::new(checkpoint, cutoff)?;
    evaluate(&predictor, samples, taxonomy, &checkpoint.meta.config_hash, ci)
}

fn check_ci(level: f64, resamples: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::validation(format!("confidence level {level} outside [0, 1]")));
    }
    if resamples == 0 {
        return Err(Error::validation("bootstrap needs at least one resample"));
    }
    Ok(())
}

/// Resample index sets: `resamples` draws of `n` indices, uniform with
/// replacement, from a ChaCha8 stream seeded with `seed`.
fn resample_indices(n: usize, resamples: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..resamples)
        .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
        .collect()
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn percentile_interval(mut stats: Vec<f64>, level: f64) -> Interval {
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Interval {
        lower: quantile(&stats, tail),
        upper: quantile(&stats, 1.0 - tail),
        level,
    }
}

/// Percentile bootstrap interval for the mean of `scores`.
pub fn bootstrap_ci(scores: &[f64], level: f64, resamples: usize, seed: u64) -> Result<Interval> {
    if scores.len() < 2 {
        return Err(Error::validation("bootstrap needs at least two scores"));
    }
    check_ci(level, resamples)?;
    let means = resample_indices(scores.len(), resamples, seed)
        .iter()
        .map(|idx| {
            // Offsetting by the first pick keeps identical scores exact.
            let base = scores[idx[0]];
            base + idx.iter().map(|&i| scores[i] - base).sum::<f64>() / idx.len() as f64
        })
        .collect();
    Ok(percentile_interval(means, level))
}

/// Interval across independent trials of the same configuration.
pub fn trial_ci(trial_scores: &[f64], options: &CiOptions) -> Result<Interval> {
    bootstrap_ci(trial_scores, options.level, options.resamples, options.seed)
}

/// Bootstrap over test images, recomputing dataset-level IoU per resample.
fn image_bootstrap(
    taxonomy: &ClassTaxonomy,
    counts: &[Vec<(u64, u64)>],
    opts: &CiOptions,
) -> Result<(Vec<ClassInterval>, Option<Interval>)> {
    if counts.len() < 2 {
        return Err(Error::validation("bootstrap needs at least two test images"));
    }
    check_ci(opts.level, opts.resamples)?;
    let draws = resample_indices(counts.len(), opts.resamples, opts.seed);
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); taxonomy.count()];
    let mut means = Vec::new();
    for idx in &draws {
        let results = class_results(taxonomy, counts, idx.iter().copied());
        for (c, r) in results.iter().enumerate() {
            if let Some(v) = r.iou {
                per_class[c].push(v);
            }
        }
        if let Ok(m) = miou(&results) {
            means.push(m);
        }
    }
    let classes = per_class
        .into_iter()
        .enumerate()
        .map(|(c, stats)| ClassInterval {
            class_id: taxonomy.name(c).to_string(),
            interval: (!stats.is_empty()).then(|| percentile_interval(stats, opts.level)),
        })
        .collect();
    Ok((classes, (!means.is_empty()).then(|| percentile_interval(means, opts.level))))
}

pub const REFERENCE_JSON: &str = include_str!("../data/reference.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRow {
    pub name: String,
    pub source: String,
    pub mean: f64,
    pub per_class: Option<Vec<f64>>,
    pub ci_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadlineClaim {
    pub name: String,
    pub value: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadiologistReference {
    pub absolute_available: bool,
    /// Relative IoU advantage of the best mixed model over radiologists.
    pub relative_to_radiologist: BTreeMap<String, f64>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTable {
    pub version: u32,
    pub classes: Vec<String>,
    pub rows: Vec<ReferenceRow>,
    pub aliases: BTreeMap<String, String>,
    pub headline: Vec<HeadlineClaim>,
    pub radiologist: RadiologistReference,
}

impl ReferenceTable {
    /// The reference values bundled with the crate.
    pub fn shipped() -> Self {
        Self::from_json(REFERENCE_JSON).expect("bundled reference data is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text).map_err(|e| Error::validation(format!("reference table: {e}")))?;
        for r in &table.rows {
            if r.per_class.as_ref().is_some_and(|v| v.len() != table.classes.len()) {
                return Err(Error::validation(format!("reference row {} has the wrong class count", r.name)));
            }
        }
        Ok(table)
    }

    /// Looks a row up by name or alias.
    pub fn row(&self, name: &str) -> Result<&ReferenceRow> {
        let target = self.aliases.get(name).map_or(name, String::as_str);
        self.rows
            .iter()
            .find(|r| r.name == target)
            .ok_or_else(|| Error::validation(format!("no reference row named {name:?}")))
    }

    pub fn headline(&self, name: &str) -> Option<f64> {
        self.headline.iter().find(|h| h.name == name).map(|h| h.value)
    }
}

/// A ratio that may be undefined; serialized as a number or "UNDEFINED".
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Defined(f64),
    Undefined,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Ratio::Undefined
        } else {
            Ratio::Defined(num / den)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Defined(v) => Some(v),
            Ratio::Undefined => None,
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ratio::Defined(v) => s.serialize_f64(*v),
            Ratio::Undefined => s.serialize_str("UNDEFINED"),
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Ratio::Defined(v)),
            Raw::Text(t) if t == "UNDEFINED" => Ok(Ratio::Undefined),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected ratio {t:?}"))),
        }
    }
}

/// `(ours − baseline) / (target − baseline)`.
pub fn gap_closure(ours: f64, baseline: f64, target: f64) -> Ratio {
    Ratio::of(ours - baseline, target - baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class_id: String,
    pub ours: Option<f64>,
    pub reference: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapClosure {
    pub baseline: String,
    pub target: String,
    pub baseline_mean: f64,
    pub target_mean: f64,
    pub closure: Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ours: String,
    pub reference: String,
    pub ours_mean: f64,
    pub reference_mean: f64,
    pub mean_delta: f64,
    /// `(ours − reference) / reference` on the means.
    pub relative_improvement: Ratio,
    pub classes: Vec<ClassDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<GapClosure>,
}

impl Comparison {
    /// Adds the share of the baseline-to-target gap that `ours` closes.
    pub fn with_gap(mut self, table: &ReferenceTable, baseline: &str, target: &str) -> Result<Self> {
        let b = table.row(baseline)?;
        let t = table.row(target)?;
        self.gap = Some(GapClosure {
            baseline: b.name.clone(),
            target: t.name.clone(),
            baseline_mean: b.mean,
            target_mean: t.mean,
            closure: gap_closure(self.ours_mean, b.mean, t.mean),
        });
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::runtime(e.to_string()))
    }
}

/// Per-class and mean differences `ours − other`.
pub fn compare_reports(ours: &EvaluationReport, other: &EvaluationReport) -> Result<Comparison> {
    let ours_ids: Vec<_> = ours.per_class.iter().map(|r| &r.class_id).collect();
    let other_ids: Vec<_> = other.per_class.iter().map(|r| &r.class_id).collect();
    if ours_ids != other_ids {
        return Err(Error::validation("reports cover different classes"));
    }
    Ok(build_comparison(
        &ours.checkpoint_hash,
        ours.miou,
        &ours.per_class,
        &other.checkpoint_hash,
        other.miou,
        other.per_class.iter().map(|r| r.iou).collect(),
    ))
}

fn build_comparison(
    ours_name: &str,
    ours_mean: f64,
    ours: &[IoUResult],
    ref_name: &str,
    ref_mean: f64,
    reference: Vec<Option<f64>>,
) -> Comparison {
    let classes = ours
        .iter()
        .zip(reference)
        .map(|(o, r)| ClassDelta {
            class_id: o.class_id.clone(),
            ours: o.iou,
            reference: r,
            delta: o.iou.zip(r).map(|(a, b)| a - b),
        })
        .collect();
    Comparison {
        ours: ours_name.to_string(),
        reference: ref_name.to_string(),
        ours_mean,
        reference_mean: ref_mean,
        mean_delta: ours_mean - ref_mean,
        relative_improvement: Ratio::of(ours_mean - ref_mean, ref_mean),
        classes,
        gap: None,
    }
}

/// Compares a report against a reference row. Rows without per-class
/// values yield mean-level differences only.
pub fn compare_reference(report: &EvaluationReport, table: &ReferenceTable, row: &str) -> Result<Comparison> {
    let r = table.row(row)?;
    let ids: Vec<_> = report.per_class.iter().map(|c| &c.class_id).collect();
    if ids != table.classes.iter().collect::<Vec<_>>() {
        return Err(Error::validation(format!(
            "report classes {:?} do not match the reference classes",
            ids
        )));
    }
    let values = match &r.per_class {
        Some(v) => v.iter().map(|&x| Some(x)).collect(),
        None => vec![None; table.classes.len()],
    };
    Ok(build_comparison(&report.checkpoint_hash, report.miou, &report.per_class, &r.name, r.mean, values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FigureStyle {
    /// Line chart of IoU against the expert-sampling probability.
    PSweep,
    /// Grouped bars per encoder initialization.
    InitComparison,
    /// Grouped bars per class against a radiologist benchmark.
    RadiologistComparison,
}

impl FigureStyle {
    pub fn stem(self) -> &'static str {
        match self {
            FigureStyle::PSweep => "p-sweep",
            FigureStyle::InitComparison => "init-comparison",
            FigureStyle::RadiologistComparison => "radiologist-comparison",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<Point>,
}

impl Series {
    /// Series over the standard p grid from a list of `(p, value)`.
    pub fn from_xy(name: impl Into<String>, xy: &[(f64, f64)]) -> Self {
        Self {
            name: name.into(),
            points: xy
                .iter()
                .map(|&(x, y)| Point {
                    label: x.to_string(),
                    x,
                    y,
                })
                .collect(),
        }
    }

    pub fn from_labels(name: impl Into<String>, values: &[(String, f64)]) -> Self {
        Self {
            name: name.into(),
            points: values
                .iter()
                .enumerate()
                .map(|(i, (l, y))| Point {
                    label: l.clone(),
                    x: i as f64,
                    y: *y,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub style: FigureStyle,
    pub title: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// One line of a plot sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub figure: String,
    pub series: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

/// Writes `<stem>.svg` and `<stem>.ndjson` for each figure. The sidecar
/// holds the plotted numbers exactly.
pub fn emit_plots(figures: &[Figure], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if figures.is_empty() || figures.iter().any(|f| f.series.is_empty()) {
        return Err(Error::validation("nothing to plot: no series given"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for fig in figures {
        let mut sidecar = String::new();
        for s in &fig.series {
            for p in &s.points {
                let rec = SidecarRecord {
                    figure: fig.style.stem().into(),
                    series: s.name.clone(),
                    label: p.label.clone(),
                    x: p.x,
                    y: p.y,
                };
                let line = serde_json::to_string(&rec).map_err(|e| Error::runtime(e.to_string()))?;
                sidecar.push_str(&line);
                sidecar.push('\n');
            }
        }
        let data_path = out_dir.join(format!("{}.ndjson", fig.style.stem()));
        std::fs::write(&data_path, sidecar).map_err(|e| Error::io(&data_path, e))?;
        let svg_path = out_dir.join(format!("{}.svg", fig.style.stem()));
        std::fs::write(&svg_path, render_svg(fig)).map_err(|e| Error::io(&svg_path, e))?;
        written.push(svg_path);
        written.push(data_path);
    }
    Ok(written)
}

/// Reads a sidecar file back.
pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::validation(format!("{}: {e}", path.display()))))
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_svg(fig: &Figure) -> String {
    let ys = fig.series.iter().flat_map(|s| s.points.iter().map(|p| p.y));
    let y_max = ys.fold(0.0_f64, f64::max).max(1e-9) * 1.1;
    let y_min = fig
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.y))
        .fold(0.0_f64, f64::min);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(&fig.title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    );
    for k in 0..=4 {
        let y = y_min + (y_max - y_min) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            MARGIN - 4.0,
            sy(y) + 4.0,
            y
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(&fig.y_label)
    );

    match fig.style {
        FigureStyle::PSweep => {
            let xs = fig.series.iter().flat_map(|s| s.points.iter().map(|p| p.x));
            let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
            let sx = |x: f64| MARGIN + (x - x_lo) / span * plot_w;
            for (i, s) in fig.series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                let pts: Vec<String> = s.points.iter().map(|p| format!("{:.1},{:.1}", sx(p.x), sy(p.y))).collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    pts.join(" ")
                );
                for p in &s.points {
                    let _ = writeln!(
                        svg,
                        r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                        sx(p.x),
                        sy(p.y)
                    );
                }
            }
            if let Some(s) = fig.series.first() {
                for p in &s.points {
                    let _ = writeln!(
                        svg,
                        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                        sx(p.x),
                        HEIGHT - MARGIN + 16.0,
                        escape(&p.label)
                    );
                }
            }
        }
        FigureStyle::InitComparison | FigureStyle::RadiologistComparison => {
            let mut labels: Vec<&str> = Vec::new();
            for s in &fig.series {
                for p in &s.points {
                    if !labels.contains(&p.label.as_str()) {
                        labels.push(&p.label);
                    }
                }
            }
            let group_w = plot_w / labels.len().max(1) as f64;
            let bar_w = group_w * 0.8 / fig.series.len() as f64;
            for (i, s) in fig.series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                for p in &s.points {
                    let g = labels.iter().position(|l| *l == p.label).unwrap_or(0);
                    let x = MARGIN + g as f64 * group_w + group_w * 0.1 + i as f64 * bar_w;
                    let (top, bottom) = (sy(p.y.max(0.0)), sy(p.y.min(0.0)));
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{x:.1}" y="{top:.1}" width="{bar_w:.1}" height="{:.1}" fill="{color}"/>"#,
                        bottom - top
                    );
                }
            }
            for (g, l) in labels.iter().enumerate() {
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                    MARGIN + (g as f64 + 0.5) * group_w,
                    HEIGHT - MARGIN + 16.0,
                    escape(l)
                );
            }
        }
    }
    for (i, s) in fig.series.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            WIDTH - MARGIN - 106.0,
            y,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Series of a reference table's p-sweep for one pseudo-label method,
/// including the shared p = 1 column.
pub fn reference_sweep(table: &ReferenceTable, method: &str) -> Result<Series> {
    let prefix = format!("semi-supervised/{method}/p=");
    let mut xy: Vec<(f64, f64)> = table
        .rows
        .iter()
        .filter_map(|r| {
            let p: f64 = r.name.strip_prefix(&prefix)?.parse().ok()?;
            Some((p, r.mean))
        })
        .collect();
    if xy.is_empty() {
        return Err(Error::validation(format!("no sweep rows for method {method:?}")));
    }
    xy.push((1.0, table.row("full")?.mean));
    Ok(Series::from_xy(format!("reference {method}"), &xy))
}

/// Bars of the radiologist comparison: relative advantage per class.
pub fn radiologist_series(table: &ReferenceTable) -> Series {
    let values: Vec<(String, f64)> = table
        .classes
        .iter()
        .filter_map(|c| table.radiologist.relative_to_radiologist.get(c).map(|v| (c.clone(), *v)))
        .collect();
    Series::from_labels("relative IoU vs radiologists", &values)
}

/// Per-class means across several reports of the same classes.
pub fn average_reports(reports: &[EvaluationReport]) -> Result<Vec<Option<f64>>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::validation("no reports to average"))?;
    let mut out = Vec::with_capacity(first.per_class.len());
    for c in 0..first.per_class.len() {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.per_class.get(c).and_then(|x| x.iou)).collect();
        out.push((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_table_loads_and_aliases_resolve() {
        let t = ReferenceTable::shipped();
        assert_eq!(t.classes.len(), 10);
        assert_eq!(t.row("mixed").unwrap().mean, 0.299);
        assert_eq!(t.row("full").unwrap().mean, 0.263);
        assert_eq!(t.row("weak-best").unwrap().mean, 0.156);
        assert!(t.row("nope").is_err());
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let same = [0.4; 10];
        let i = bootstrap_ci(&same, 0.95, 200, 1).unwrap();
        assert_eq!((i.lower, i.upper), (0.4, 0.4));
        let mixed: Vec<f64> = (0..20).map(|k| k as f64).collect();
        let i = bootstrap_ci(&mixed, 0.0, 201, 1).unwrap();
        assert_eq!(i.lower, i.upper);
        assert!(bootstrap_ci(&[1.0], 0.95, 10, 0).unwrap_err().is_validation());
    }

    #[test]
    fn gap_closure_guard() {
        assert_eq!(gap_closure(0.3, 0.2, 0.2), Ratio::Undefined);
        assert_eq!(gap_closure(0.3, 0.2, 0.4).value().unwrap(), (0.3 - 0.2) / (0.4 - 0.2));
        let text = serde_json::to_string(&Ratio::Undefined).unwrap();
        assert_eq!(text, "\"UNDEFINED\"");
        assert_eq!(serde_json::from_str::<Ratio>(&text).unwrap(), Ratio::Undefined);
    }

    #[test]
    fn empty_plot_request_rejected() {
        let dir = std::env::temp_dir();
        assert!(emit_plots(&[], &dir).unwrap_err().is_validation());
    }
}
