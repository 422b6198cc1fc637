//! Run configuration, the artifact ledger, stage orchestration and the
//! `mixseg` command line.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use mixseg_core::manifest::read_records;
use mixseg_core::synth::{generate_dataset, SynthConfig};
use mixseg_core::{hash, load_manifest, ClassTaxonomy, Error, ImageSample, MaskSet, Result, Split};
use mixseg_nn::Checkpoint;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::classifier::{generate_heatmaps, train_classifier, Classifier, ClassifierConfig, HeatmapStore};
use crate::distillation::{teacher_soft_labels, train_student, DistillConfig, SoftLabelStore};
use crate::evaluation::{
    average_reports, compare_reference, compare_reports, emit_plots, evaluate, evaluate_checkpoint,
    radiologist_series, reference_sweep, trial_ci, CheckpointPredictor, CiMode, CiOptions, EvaluationReport, Figure,
    FigureStyle, Interval, OraclePredictor, ReferenceTable, Series,
};
use crate::pseudolabels::irnet::{train_irnet, IrnetConfig};
use crate::pseudolabels::{
    calibrate_thresholds, default_grid, generate_pseudolabels, refined_heatmaps, GenerateRequest, IrnetInputs,
    PseudoLabelMethod, PseudoLabelStore, ThresholdTable,
};
use crate::segmentation::{
    train_segmentation, CountingPool, EncoderInit, ExpertPool, PseudoPool, SegConfig, SupervisionPools,
};
use crate::training::TrainOptions;

/// Expert-sampling probabilities swept by default.
pub const DEFAULT_P_GRID: [f64; 8] = [0.0, 0.2, 0.4, 0.6, 0.8, 0.85, 0.9, 1.0];

/// Overrides `paths.artifact_root` when set.
pub const ARTIFACT_ROOT_ENV: &str = "MIXSEG_ARTIFACT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    pub artifact_root: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            artifact_root: "artifacts".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    pub method: PseudoLabelMethod,
    pub grid: Vec<f64>,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            method: PseudoLabelMethod::CamThreshold,
            grid: default_grid(),
        }
    }
}

/// Where the pseudo pool's masks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoSource {
    /// The run's pseudo-label store.
    #[default]
    Store,
    /// `pseudo_masks` already present in the dataset manifest.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// Expert pool size: the first `n` training samples. All when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expert_count: Option<usize>,
    /// Pseudo pool size, drawn per trial. All candidates when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_count: Option<usize>,
    pub pseudo_source: PseudoSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cutoff: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<CiOptions>,
    pub ci_mode: CiMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cutoff: 0.5,
            ci: None,
            ci_mode: CiMode::OverImages,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub p_values: Vec<f64>,
    pub trials: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            p_values: DEFAULT_P_GRID.to_vec(),
            trials: 3,
        }
    }
}

/// Every setting of a run, one section per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub paths: PathsConfig,
    pub synthdata: SynthConfig,
    pub classifier: ClassifierConfig,
    pub irnet: IrnetConfig,
    pub pseudolabels: PseudoLabelConfig,
    pub pools: PoolConfig,
    pub segmentation: SegConfig,
    pub distillation: DistillConfig,
    pub evaluation: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            paths: PathsConfig::default(),
            synthdata: SynthConfig::default(),
            classifier: ClassifierConfig::default(),
            irnet: IrnetConfig::default(),
            pseudolabels: PseudoLabelConfig::default(),
            pools: PoolConfig::default(),
            segmentation: SegConfig::default(),
            distillation: DistillConfig::default(),
            evaluation: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn check_p(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::validation(format!("p_expert {p} outside [0, 1]")))
    }
}

impl RunConfig {
    /// Parses TOML text; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("config: {}", e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::runtime(format!("config serialization: {e}")))
    }

    pub fn hash(&self) -> String {
        hash::hash_json(self)
    }

    pub fn taxonomy(&self) -> ClassTaxonomy {
        self.synthdata.taxonomy()
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.run_id.starts_with('.')
        {
            return Err(Error::validation(format!(
                "run_id {:?} must be nonempty and use only letters, digits, '-', '_' and '.'",
                self.run_id
            )));
        }
        self.synthdata.validate()?;
        self.classifier.validate()?;
        self.irnet.validate()?;
        self.segmentation.validate()?;
        self.distillation.validate()?;
        if self.pseudolabels.grid.is_empty() || self.pseudolabels.grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::validation("pseudolabels.grid must be a nonempty list of values in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.evaluation.cutoff) {
            return Err(Error::validation("evaluation.cutoff must lie in [0, 1]"));
        }
        if let Some(ci) = &self.evaluation.ci {
            if !(0.0..=1.0).contains(&ci.level) || ci.resamples == 0 {
                return Err(Error::validation("evaluation.ci needs a level in [0, 1] and at least one resample"));
            }
        }
        if self.sweep.p_values.is_empty() {
            return Err(Error::validation("sweep.p_values is empty"));
        }
        for &p in &self.sweep.p_values {
            check_p(p)?;
        }
        if self.sweep.trials == 0 {
            return Err(Error::validation("sweep.trials must be at least 1"));
        }
        if self.pools.expert_count == Some(0) || self.pools.weak_count == Some(0) {
            return Err(Error::validation("pool sizes must be at least 1 when given"));
        }
        for path in [&self.segmentation.init_path, &self.distillation.init_path].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::validation(format!("init_path {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.data_root);
        fix(&mut self.paths.artifact_root);
        if let Some(p) = self.segmentation.init_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.distillation.init_path.as_mut() {
            fix(p);
        }
    }
}

/// Reads, resolves and validates a run configuration file. Relative paths
/// are taken relative to the file's directory; the artifact root may be
/// overridden through [`ARTIFACT_ROOT_ENV`].
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = RunConfig::from_toml_str(&text)?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let base = std::path::absolute(&base).map_err(|e| Error::io(&base, e))?;
    apply_env(&mut config);
    config.resolve_paths(&base);
    config.validate()?;
    Ok(config)
}

fn apply_env(config: &mut RunConfig) {
    if let Some(root) = std::env::var_os(ARTIFACT_ROOT_ENV).filter(|v| !v.is_empty()) {
        config.paths.artifact_root = PathBuf::from(root);
    }
}

/// Content hash of a file, or of a directory tree (relative paths plus
/// file hashes, sorted). `None` when the path does not exist.
pub fn artifact_hash(path: &Path) -> Result<Option<String>> {
    if path.is_file() {
        return hash::hash_file(path).map(Some);
    }
    if !path.is_dir() {
        return Ok(None);
    }
    let mut listing = Vec::new();
    collect_files(path, path, &mut listing)?;
    listing.sort();
    Ok(Some(hash::hash_json(&listing)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.push((rel, hash::hash_file(&path)?));
        }
    }
    Ok(())
}

/// One completed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub stage: String,
    /// Hash of the stage settings and input hashes.
    pub key: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    /// Output paths (relative to the run directory) and their hashes.
    pub outputs: BTreeMap<String, String>,
    pub details: BTreeMap<String, Value>,
    pub timestamp: u64,
}

/// Append-only record of completed stages, one JSON object per line.
#[derive(Debug)]
pub struct RunLedger {
    path: PathBuf,
    entries: Vec<LedgerEntry>,
}

impl RunLedger {
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| Error::validation(format!("{}: {e}", path.display()))))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn latest(&self, stage: &str) -> Option<&LedgerEntry> {
        self.entries.iter().rev().find(|e| e.stage == stage)
    }

    /// True when the latest record of `stage` has this key and every
    /// recorded output still hashes to its recorded value.
    pub fn is_current(&self, stage: &str, key: &str, base: &Path) -> Result<bool> {
        let Some(entry) = self.latest(stage) else {
            return Ok(false);
        };
        if entry.key != key {
            return Ok(false);
        }
        for (rel, recorded) in &entry.outputs {
            if artifact_hash(&base.join(rel))?.as_deref() != Some(recorded.as_str()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<()> {
        use std::io::Write;
        let line = serde_json::to_string(&entry).map_err(|e| Error::runtime(e.to_string()))?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.entries.push(entry);
        Ok(())
    }
}

/// Machine-readable result of one stage, printed as a single line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    /// `ok` or `skipped`.
    pub status: String,
    pub outputs: BTreeMap<String, String>,
    pub details: BTreeMap<String, Value>,
}

impl StageSummary {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunStamp {
    run_id: String,
    config_hash: String,
}

/// Which stages feed the pseudo pool, resolved for one training call.
pub struct PoolSelection {
    pub expert: Vec<ImageSample>,
    pub weak: Vec<ImageSample>,
}

/// `k` of `n` indices chosen by a seeded shuffle, ascending.
fn choose(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = order[..k.min(n)].to_vec();
    picked.sort_unstable();
    picked
}

/// Expert pool: the first `expert_count` training samples with expert
/// masks. Pseudo pool: non-test candidates outside the expert pool, with
/// `weak_count` of them drawn under `trial_seed`.
pub fn select_pools(
    samples: &[ImageSample],
    pseudo_candidates: &[ImageSample],
    config: &PoolConfig,
    trial_seed: u64,
) -> PoolSelection {
    let mut expert: Vec<ImageSample> = samples
        .iter()
        .filter(|s| s.split == Split::Train && s.expert_masks.is_some())
        .cloned()
        .collect();
    if let Some(k) = config.expert_count {
        expert.truncate(k);
    }
    let taken: std::collections::HashSet<&str> = expert.iter().map(|s| s.id.as_str()).collect();
    let candidates: Vec<&ImageSample> = pseudo_candidates
        .iter()
        .filter(|s| s.split != Split::Test && !taken.contains(s.id.as_str()))
        .filter(|s| s.pseudo_masks.is_some() || s.positive_classes().is_empty())
        .collect();
    let weak = match config.weak_count {
        Some(k) if k < candidates.len() => choose(candidates.len(), k, trial_seed)
            .into_iter()
            .map(|i| candidates[i].clone())
            .collect(),
        _ => candidates.into_iter().cloned().collect(),
    };
    PoolSelection { expert, weak }
}

/// One (p, trial) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub p: f64,
    pub trial: usize,
    pub miou: f64,
    pub expert_reads: usize,
    pub pseudo_reads: usize,
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub trial_miou: Vec<f64>,
    /// Arithmetic mean of `trial_miou`.
    pub mean_miou: f64,
    /// Per-class IoU averaged over trials.
    pub per_class: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub classes: Vec<String>,
    pub trials: usize,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    /// Classes down, p across, mean IoU first: the layout of a
    /// semi-supervised results table.
    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut out = String::from("| Task |");
        for r in &self.rows {
            out.push_str(&format!(" p={} |", r.p));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.rows.len()));
        out.push_str("\n| Avg. IoU |");
        for r in &self.rows {
            out.push_str(&format!(" {} |", fmt(Some(r.mean_miou))));
        }
        for (c, name) in self.classes.iter().enumerate() {
            out.push_str(&format!("\n| {name} |"));
            for r in &self.rows {
                out.push_str(&format!(" {} |", fmt(r.per_class[c])));
            }
        }
        out.push('\n');
        out
    }

    pub fn series(&self, name: &str) -> Series {
        let xy: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.p, r.mean_miou)).collect();
        Series::from_xy(name, &xy)
    }
}

/// A run's artifact directory with its ledger.
pub struct RunContext {
    pub config: RunConfig,
    pub run_dir: PathBuf,
    pub taxonomy: ClassTaxonomy,
    pub force: bool,
    config_hash: String,
    ledger: RefCell<RunLedger>,
}

fn p_label(p: f64) -> String {
    format!("p{p}")
}

fn remove_path(path: &Path) -> Result<()> {
    if path.is_dir() {
        std::fs::remove_dir_all(path).map_err(|e| Error::io(path, e))
    } else if path.exists() {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))
    } else {
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::runtime(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn details(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

impl RunContext {
    /// Opens `<artifact_root>/<run_id>`. A run id already used with a
    /// different configuration is rejected.
    pub fn open(config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let run_dir = config.paths.artifact_root.join(&config.run_id);
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let config_hash = config.hash();
        let stamp_path = run_dir.join("run.json");
        if stamp_path.exists() {
            let text = std::fs::read_to_string(&stamp_path).map_err(|e| Error::io(&stamp_path, e))?;
            let stamp: RunStamp =
                serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", stamp_path.display())))?;
            if stamp.config_hash != config_hash && !force {
                return Err(Error::validation(format!(
                    "run_id {:?} already holds a run with a different configuration; pick a new run_id or pass --force",
                    config.run_id
                )));
            }
        }
        write_json(
            &stamp_path,
            &RunStamp {
                run_id: config.run_id.clone(),
                config_hash: config_hash.clone(),
            },
        )?;
        std::fs::write(run_dir.join("config.toml"), config.to_toml()?).map_err(|e| Error::io(&run_dir, e))?;
        let ledger = RunLedger::open(&run_dir.join("ledger.jsonl"))?;
        Ok(Self {
            taxonomy: config.taxonomy(),
            config,
            run_dir,
            force,
            config_hash,
            ledger: RefCell::new(ledger),
        })
    }

    pub fn ledger_entries(&self) -> Vec<LedgerEntry> {
        self.ledger.borrow().entries().to_vec()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.config.paths.data_root.join("manifest.jsonl")
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.run_dir.join("classifier/classifier.ckpt")
    }

    pub fn cams_dir(&self) -> PathBuf {
        self.run_dir.join("cams")
    }

    pub fn thresholds_path(&self) -> PathBuf {
        self.run_dir.join("pseudolabels/thresholds.toml")
    }

    pub fn irnet_path(&self) -> PathBuf {
        self.run_dir.join("irnet/irnet.ckpt")
    }

    pub fn pseudo_store(&self) -> PathBuf {
        self.run_dir.join("pseudolabels/store")
    }

    pub fn seg_dir(&self, p: f64) -> PathBuf {
        self.run_dir.join("seg").join(p_label(p))
    }

    pub fn seg_path(&self, p: f64) -> PathBuf {
        self.seg_dir(p).join("segmenter.ckpt")
    }

    pub fn student_path(&self) -> PathBuf {
        self.run_dir.join("distill/student.ckpt")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.run_dir.join("reports")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.run_dir.join("plots")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.run_dir.join("sweep")
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.run_dir)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| path.to_string_lossy().into_owned())
    }

    /// Runs `body` unless the ledger shows the same stage already completed
    /// with identical settings, inputs and outputs.
    fn run_stage<F>(
        &self,
        stage: &str,
        settings: Value,
        inputs: &[(&str, PathBuf)],
        outputs: &[(&str, PathBuf)],
        body: F,
    ) -> Result<StageSummary>
    where
        F: FnOnce() -> Result<BTreeMap<String, Value>>,
    {
        let mut input_hashes = BTreeMap::new();
        for (name, path) in inputs {
            let h = artifact_hash(path)?.ok_or_else(|| {
                Error::validation(format!("{stage}: input {name} ({}) is missing; run its stage first", path.display()))
            })?;
            input_hashes.insert(name.to_string(), h);
        }
        let key = hash::hash_json(&json!({ "stage": stage, "settings": settings, "inputs": input_hashes }));
        let output_map: BTreeMap<String, String> =
            outputs.iter().map(|(n, p)| (n.to_string(), p.to_string_lossy().into_owned())).collect();

        if !self.force && self.ledger.borrow().is_current(stage, &key, &self.run_dir)? {
            let entry = self.ledger.borrow().latest(stage).cloned().expect("current entry exists");
            log::info!("{stage}: up to date, skipping");
            return Ok(StageSummary {
                stage: stage.into(),
                status: "skipped".into(),
                outputs: output_map,
                details: entry.details,
            });
        }
        for (_, p) in outputs {
            remove_path(p)?;
        }
        log::info!("{stage}: running");
        let details = body()?;
        let mut out_hashes = BTreeMap::new();
        for (name, path) in outputs {
            let h = artifact_hash(path)?
                .ok_or_else(|| Error::runtime(format!("{stage}: output {name} was not written")))?;
            out_hashes.insert(self.rel(path), h);
        }
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.ledger.borrow_mut().append(LedgerEntry {
            stage: stage.into(),
            key,
            config_hash: self.config_hash.clone(),
            inputs: input_hashes,
            outputs: out_hashes,
            details: details.clone(),
            timestamp,
        })?;
        Ok(StageSummary {
            stage: stage.into(),
            status: "ok".into(),
            outputs: output_map,
            details,
        })
    }

    pub fn load_samples(&self) -> Result<Vec<ImageSample>> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(Error::validation(format!(
                "manifest {} not found; run synth-data first",
                path.display()
            )));
        }
        load_manifest(&path, &self.taxonomy)
    }

    fn split(samples: &[ImageSample], keep: impl Fn(Split) -> bool) -> Vec<ImageSample> {
        samples.iter().filter(|s| keep(s.split)).cloned().collect()
    }

    pub fn synth_data(&self) -> Result<StageSummary> {
        let cfg = &self.config.synthdata;
        let root = self.config.paths.data_root.clone();
        self.run_stage(
            "synth-data",
            json!(cfg),
            &[],
            &[("dataset", root.clone())],
            || {
                let manifest = generate_dataset(cfg, &root)?;
                Ok(details(&[
                    ("n_images", json!(cfg.n_images)),
                    ("manifest", json!(manifest)),
                ]))
            },
        )
    }

    pub fn train_classifier(&self) -> Result<StageSummary> {
        let cfg = &self.config.classifier;
        let out = self.classifier_path();
        let dir = out.parent().expect("nested path").to_path_buf();
        self.run_stage(
            "train-classifier",
            json!(cfg),
            &[("manifest", self.manifest_path())],
            &[("checkpoint", out.clone()), ("metrics", dir.join("metrics.ndjson"))],
            || {
                let samples = Self::split(&self.load_samples()?, |s| s == Split::Train);
                let opts = TrainOptions {
                    metrics_path: Some(dir.join("metrics.ndjson")),
                    checkpoint_dir: None,
                };
                let run = train_classifier(&samples, &self.taxonomy, cfg, &opts)?;
                run.checkpoint.save(&out)?;
                let last = run.history.last().map_or(f64::NAN, |r| r.loss);
                Ok(details(&[("iterations", json!(run.history.len())), ("final_loss", json!(last))]))
            },
        )
    }

    pub fn gen_cams(&self) -> Result<StageSummary> {
        let cams = self.cams_dir();
        self.run_stage(
            "gen-cams",
            json!({}),
            &[("manifest", self.manifest_path()), ("classifier", self.classifier_path())],
            &[("cams", cams.clone())],
            || {
                let ckpt = Checkpoint::load(&self.classifier_path())?;
                let model = Classifier::from_checkpoint(&ckpt)?;
                let samples = Self::split(&self.load_samples()?, |s| s != Split::Test);
                let heatmaps = generate_heatmaps(&model, &samples)?;
                std::fs::create_dir_all(&cams).map_err(|e| Error::io(&cams, e))?;
                HeatmapStore::write(&cams, &self.taxonomy, &samples, &heatmaps, &ckpt.hash())?;
                Ok(details(&[("samples", json!(samples.len()))]))
            },
        )
    }

    fn irnet_inputs(&self) -> Vec<(&'static str, PathBuf)> {
        match self.config.pseudolabels.method {
            PseudoLabelMethod::Irnet => vec![("irnet", self.irnet_path())],
            PseudoLabelMethod::CamThreshold => Vec::new(),
        }
    }

    fn pseudo_settings(&self) -> Value {
        match self.config.pseudolabels.method {
            PseudoLabelMethod::Irnet => json!({ "pseudolabels": self.config.pseudolabels, "irnet": self.config.irnet }),
            PseudoLabelMethod::CamThreshold => json!({ "pseudolabels": self.config.pseudolabels }),
        }
    }

    /// Heatmaps of `samples` as used by the configured method.
    fn method_heatmaps(&self, samples: &[ImageSample]) -> Result<Vec<mixseg_core::HeatmapSet>> {
        let heatmaps = HeatmapStore::read(&self.cams_dir(), &self.taxonomy, samples)?;
        match self.config.pseudolabels.method {
            PseudoLabelMethod::CamThreshold => Ok(heatmaps),
            PseudoLabelMethod::Irnet => {
                let ckpt = Checkpoint::load(&self.irnet_path())?;
                let inputs = IrnetInputs {
                    checkpoint: &ckpt,
                    config: &self.config.irnet,
                };
                refined_heatmaps(&inputs, samples, &heatmaps)
            }
        }
    }

    pub fn calibrate_thresholds(&self) -> Result<StageSummary> {
        let out = self.thresholds_path();
        let mut inputs = vec![("manifest", self.manifest_path()), ("cams", self.cams_dir())];
        inputs.extend(self.irnet_inputs());
        self.run_stage("calibrate-thresholds", self.pseudo_settings(), &inputs, &[("thresholds", out.clone())], || {
            let valid: Vec<ImageSample> = Self::split(&self.load_samples()?, |s| s == Split::Valid)
                .into_iter()
                .filter(|s| s.expert_masks.is_some())
                .collect();
            let heatmaps = self.method_heatmaps(&valid)?;
            let expert: Vec<MaskSet> = valid.iter().map(|s| s.expert_masks.clone().expect("filtered")).collect();
            let table = calibrate_thresholds(
                &heatmaps,
                &expert,
                &self.config.pseudolabels.grid,
                &self.taxonomy,
                self.config.pseudolabels.method,
            )?;
            table.save(&out)?;
            Ok(details(&[
                ("thresholds", json!(table.thresholds())),
                ("achieved_miou", json!(table.achieved_miou)),
            ]))
        })
    }

    pub fn train_irnet(&self) -> Result<StageSummary> {
        let cfg = &self.config.irnet;
        let out = self.irnet_path();
        let dir = out.parent().expect("nested path").to_path_buf();
        self.run_stage(
            "train-irnet",
            json!(cfg),
            &[("manifest", self.manifest_path()), ("cams", self.cams_dir())],
            &[("checkpoint", out.clone()), ("metrics", dir.join("metrics.ndjson"))],
            || {
                let train = Self::split(&self.load_samples()?, |s| s == Split::Train);
                let heatmaps = HeatmapStore::read(&self.cams_dir(), &self.taxonomy, &train)?;
                let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
                let opts = TrainOptions {
                    metrics_path: Some(dir.join("metrics.ndjson")),
                    checkpoint_dir: None,
                };
                let run = train_irnet(&images, &heatmaps, &self.taxonomy, cfg, &opts)?;
                run.checkpoint.save(&out)?;
                Ok(details(&[("iterations", json!(run.history.len()))]))
            },
        )
    }

    pub fn gen_pseudolabels(&self) -> Result<StageSummary> {
        let store = self.pseudo_store();
        let mut inputs = vec![
            ("manifest", self.manifest_path()),
            ("cams", self.cams_dir()),
            ("thresholds", self.thresholds_path()),
            ("classifier", self.classifier_path()),
        ];
        inputs.extend(self.irnet_inputs());
        let settings = self.pseudo_settings();
        let config_hash = hash::hash_json(&settings);
        self.run_stage("gen-pseudolabels", settings, &inputs, &[("store", store.clone())], || {
            let manifest = self.manifest_path();
            let records: Vec<_> = read_records(&manifest)?
                .into_iter()
                .filter(|r| r.split != Split::Test)
                .collect();
            let samples = Self::split(&self.load_samples()?, |s| s != Split::Test);
            let heatmaps = HeatmapStore::read(&self.cams_dir(), &self.taxonomy, &samples)?;
            let thresholds = ThresholdTable::load(&self.thresholds_path())?;
            let mut sources = BTreeMap::from([(
                "classifier".to_string(),
                hash::hash_file(&self.classifier_path())?,
            )]);
            let irnet_ckpt = match self.config.pseudolabels.method {
                PseudoLabelMethod::Irnet => {
                    sources.insert("irnet".into(), hash::hash_file(&self.irnet_path())?);
                    Some(Checkpoint::load(&self.irnet_path())?)
                }
                PseudoLabelMethod::CamThreshold => None,
            };
            let request = GenerateRequest {
                method: self.config.pseudolabels.method,
                thresholds: &thresholds,
                irnet: irnet_ckpt.as_ref().map(|c| IrnetInputs {
                    checkpoint: c,
                    config: &self.config.irnet,
                }),
                config_hash: config_hash.clone(),
                source_checkpoints: sources,
            };
            let data_root = manifest.parent().expect("manifest has a parent").to_path_buf();
            let masks = generate_pseudolabels(
                &request,
                &samples,
                &records,
                &heatmaps,
                &self.taxonomy,
                Some((&store, &data_root)),
            )?;
            let labelled = masks.iter().filter(|m| m.is_some()).count();
            Ok(details(&[("samples", json!(samples.len())), ("with_masks", json!(labelled))]))
        })
    }

    fn pseudo_candidates(&self, samples: &[ImageSample], p: f64) -> Result<Vec<ImageSample>> {
        if p >= 1.0 {
            return Ok(Vec::new());
        }
        match self.config.pools.pseudo_source {
            PseudoSource::Dataset => Ok(samples.to_vec()),
            PseudoSource::Store => PseudoLabelStore::load(&self.pseudo_store(), &self.taxonomy),
        }
    }

    fn pool_inputs(&self, p: f64) -> Vec<(&'static str, PathBuf)> {
        let mut inputs = vec![("manifest", self.manifest_path())];
        if p < 1.0 && self.config.pools.pseudo_source == PseudoSource::Store {
            inputs.push(("pseudo_store", self.pseudo_store()));
        }
        inputs
    }

    /// Segmentation config with CLI overrides applied.
    pub fn seg_config(&self, p: Option<f64>, init_from_classifier: bool) -> Result<SegConfig> {
        let mut cfg = self.config.segmentation.clone();
        if let Some(p) = p {
            check_p(p)?;
            cfg.p_expert = p;
        }
        if init_from_classifier {
            cfg.encoder_init = EncoderInit::ClassifierCheckpoint;
            cfg.init_path = Some(self.classifier_path());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_seg(&self, p: Option<f64>, init_from_classifier: bool) -> Result<StageSummary> {
        let cfg = self.seg_config(p, init_from_classifier)?;
        let dir = self.seg_dir(cfg.p_expert);
        let out = dir.join("segmenter.ckpt");
        let mut inputs = self.pool_inputs(cfg.p_expert);
        if let Some(path) = &cfg.init_path {
            inputs.push(("encoder_init", path.clone()));
        }
        let stage = format!("train-seg/{}", p_label(cfg.p_expert));
        self.run_stage(
            &stage,
            json!({ "segmentation": cfg, "pools": self.config.pools }),
            &inputs,
            &[("checkpoint", out.clone()), ("metrics", dir.join("metrics.ndjson"))],
            || {
                let samples = self.load_samples()?;
                let candidates = self.pseudo_candidates(&samples, cfg.p_expert)?;
                let pools = select_pools(&samples, &candidates, &self.config.pools, cfg.seed);
                let expert = ExpertPool::new(pools.expert.iter())?;
                let pseudo = PseudoPool::new(pools.weak.iter(), self.taxonomy.count())?;
                let opts = TrainOptions {
                    metrics_path: Some(dir.join("metrics.ndjson")),
                    checkpoint_dir: None,
                };
                let run = train_segmentation(
                    &SupervisionPools {
                        expert: &expert,
                        pseudo: &pseudo,
                    },
                    &self.taxonomy,
                    &cfg,
                    &opts,
                )?;
                run.checkpoint.save(&out)?;
                let extra = &run.checkpoint.meta.extra;
                let count = |k: &str| extra.get(k).and_then(|v| v.parse::<u64>().ok());
                Ok(details(&[
                    ("p_expert", json!(cfg.p_expert)),
                    ("expert_pool", json!(pools.expert.len())),
                    ("pseudo_pool", json!(pools.weak.len())),
                    ("expert_draws", json!(count("expert_draws"))),
                    ("pseudo_draws", json!(count("pseudo_draws"))),
                ]))
            },
        )
    }

    pub fn distill(&self, teacher: Option<PathBuf>) -> Result<StageSummary> {
        let cfg = &self.config.distillation;
        let teacher_path = teacher.unwrap_or_else(|| self.seg_path(1.0));
        let out = self.student_path();
        let dir = out.parent().expect("nested path").to_path_buf();
        let soft_dir = dir.join("soft");
        self.run_stage(
            "distill",
            json!(cfg),
            &[("manifest", self.manifest_path()), ("teacher", teacher_path.clone())],
            &[
                ("checkpoint", out.clone()),
                ("soft_labels", soft_dir.clone()),
                ("metrics", dir.join("metrics.ndjson")),
            ],
            || {
                let teacher = Checkpoint::load(&teacher_path)?;
                let unlabeled = Self::split(&self.load_samples()?, |s| s != Split::Test);
                let images: Vec<_> = unlabeled.iter().map(|s| s.image.clone()).collect();
                let ids: Vec<String> = unlabeled.iter().map(|s| s.id.clone()).collect();
                let soft = teacher_soft_labels(&teacher, &images, cfg.temperature)?;
                SoftLabelStore::write(&soft_dir, &self.taxonomy, &ids, &soft, &teacher.hash(), cfg.temperature)?;
                let (_, cached) = SoftLabelStore::read(&soft_dir)?;
                let opts = TrainOptions {
                    metrics_path: Some(dir.join("metrics.ndjson")),
                    checkpoint_dir: None,
                };
                let run = train_student(&teacher, &images, Some(&cached), cfg, &opts)?;
                run.checkpoint.save(&out)?;
                Ok(details(&[
                    ("teacher", json!(teacher.hash())),
                    (
                        "selected",
                        json!(run.checkpoint.meta.extra.get("selected").and_then(|v| v.parse::<u64>().ok())),
                    ),
                ]))
            },
        )
    }

    /// Evaluates a checkpoint (default: the configured segmentation run)
    /// or, with `oracle`, the ground-truth stub on the test split.
    pub fn evaluate(&self, checkpoint: Option<PathBuf>, oracle: bool, out: Option<PathBuf>) -> Result<StageSummary> {
        let eval = &self.config.evaluation;
        let (label, inputs) = if oracle {
            ("oracle".to_string(), vec![("manifest", self.manifest_path())])
        } else {
            let path = checkpoint.unwrap_or_else(|| self.seg_path(self.config.segmentation.p_expert));
            let label = path
                .parent()
                .and_then(|d| d.file_name())
                .map_or_else(|| "evaluation".to_string(), |n| n.to_string_lossy().into_owned());
            (label, vec![("manifest", self.manifest_path()), ("checkpoint", path)])
        };
        let out = out.unwrap_or_else(|| self.reports_dir().join(format!("{label}.json")));
        let ckpt_path = inputs.get(1).map(|(_, p)| p.clone());
        self.run_stage(
            &format!("evaluate/{}", self.rel(&out)),
            json!(eval),
            &inputs,
            &[("report", out.clone())],
            || {
                let test = Self::split(&self.load_samples()?, |s| s == Split::Test);
                let report = match &ckpt_path {
                    None => evaluate(&OraclePredictor, &test, &self.taxonomy, &self.config_hash, eval.ci.as_ref())?,
                    Some(path) => {
                        let ckpt = Checkpoint::load(path)?;
                        evaluate_checkpoint(&ckpt, &test, &self.taxonomy, eval.cutoff, eval.ci.as_ref())?
                    }
                };
                report.save(&out)?;
                Ok(details(&[("miou", json!(report.miou)), ("n_images", json!(report.n_images))]))
            },
        )
    }

    pub fn compare(
        &self,
        report: PathBuf,
        row: &str,
        against: Option<PathBuf>,
        gap: Option<(String, String)>,
        out: Option<PathBuf>,
    ) -> Result<StageSummary> {
        let out = out.unwrap_or_else(|| self.reports_dir().join("comparison.json"));
        let mut inputs = vec![("report", report.clone())];
        if let Some(a) = &against {
            inputs.push(("against", a.clone()));
        }
        self.run_stage(
            &format!("compare/{}", self.rel(&out)),
            json!({ "row": row, "gap": gap }),
            &inputs,
            &[("comparison", out.clone())],
            || {
                let ours = EvaluationReport::load(&report)?;
                let table = ReferenceTable::shipped();
                let mut cmp = match &against {
                    Some(a) => compare_reports(&ours, &EvaluationReport::load(a)?)?,
                    None => compare_reference(&ours, &table, row)?,
                };
                if let Some((b, t)) = &gap {
                    cmp = cmp.with_gap(&table, b, t)?;
                }
                write_json(&out, &cmp)?;
                Ok(details(&[
                    ("mean_delta", json!(cmp.mean_delta)),
                    ("relative_improvement", json!(cmp.relative_improvement)),
                ]))
            },
        )
    }

    /// Plots the sweep report and per-p evaluation reports of this run,
    /// optionally with the shipped reference curves, plus bar charts of any
    /// extra reports.
    pub fn plot(&self, reference: bool, bar_reports: &[PathBuf], out: Option<PathBuf>) -> Result<StageSummary> {
        let out = out.unwrap_or_else(|| self.plots_dir());
        let sweep_path = self.sweep_dir().join("sweep.json");
        let mut inputs: Vec<(&str, PathBuf)> = Vec::new();
        if sweep_path.exists() {
            inputs.push(("sweep", sweep_path.clone()));
        }
        if self.reports_dir().exists() {
            inputs.push(("reports", self.reports_dir()));
        }
        for r in bar_reports {
            inputs.push(("bar_report", r.clone()));
        }
        self.run_stage(
            &format!("plot/{}", self.rel(&out)),
            json!({ "reference": reference, "bars": bar_reports }),
            &inputs,
            &[("plots", out.clone())],
            || {
                let mut sweep_series = Vec::new();
                if sweep_path.exists() {
                    let text = std::fs::read_to_string(&sweep_path).map_err(|e| Error::io(&sweep_path, e))?;
                    let report: SweepReport =
                        serde_json::from_str(&text).map_err(|e| Error::validation(e.to_string()))?;
                    sweep_series.push(report.series("sweep mean mIoU"));
                }
                let evaluated = self.per_p_reports()?;
                if !evaluated.is_empty() {
                    sweep_series.push(Series::from_xy("evaluated runs", &evaluated));
                }
                let table = ReferenceTable::shipped();
                if reference {
                    sweep_series.push(reference_sweep(&table, "cam")?);
                    sweep_series.push(reference_sweep(&table, "irnet")?);
                }
                let mut figures = Vec::new();
                if !sweep_series.is_empty() {
                    figures.push(Figure {
                        style: FigureStyle::PSweep,
                        title: "mIoU against expert-sampling probability".into(),
                        y_label: "mIoU".into(),
                        series: sweep_series,
                    });
                }
                if !bar_reports.is_empty() {
                    let mut series = Vec::new();
                    for path in bar_reports {
                        let r = EvaluationReport::load(path)?;
                        let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                        let values: Vec<(String, f64)> = r
                            .per_class
                            .iter()
                            .map(|c| (c.class_id.clone(), c.iou.unwrap_or(0.0)))
                            .chain(std::iter::once(("mean".to_string(), r.miou)))
                            .collect();
                        series.push(Series::from_labels(name, &values));
                    }
                    figures.push(Figure {
                        style: FigureStyle::InitComparison,
                        title: "IoU by report".into(),
                        y_label: "IoU".into(),
                        series,
                    });
                }
                if reference {
                    figures.push(Figure {
                        style: FigureStyle::RadiologistComparison,
                        title: "Relative IoU against radiologists".into(),
                        y_label: "relative IoU difference".into(),
                        series: vec![radiologist_series(&table)],
                    });
                }
                let files = emit_plots(&figures, &out)?;
                Ok(details(&[("files", json!(files))]))
            },
        )
    }

    /// `(p, miou)` of every `reports/p*.json`, sorted by p.
    fn per_p_reports(&self) -> Result<Vec<(f64, f64)>> {
        let dir = self.reports_dir();
        let mut out = Vec::new();
        if !dir.is_dir() {
            return Ok(out);
        }
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some(p) = stem.strip_prefix('p').and_then(|v| v.parse::<f64>().ok()) {
                out.push((p, EvaluationReport::load(&path)?.miou));
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(out)
    }

    /// Trains and evaluates one model per (p, trial) cell, each trial with
    /// its own pseudo-pool draw and seed, and averages over trials.
    pub fn run_p_sweep(&self, p_values: &[f64], n_trials: usize) -> Result<SweepReport> {
        if p_values.is_empty() {
            return Err(Error::validation("the sweep needs at least one p value"));
        }
        if n_trials == 0 {
            return Err(Error::validation("the sweep needs at least one trial"));
        }
        for &p in p_values {
            check_p(p)?;
        }
        let samples = self.load_samples()?;
        let test = Self::split(&samples, |s| s == Split::Test);
        let mut cells = Vec::new();
        let mut rows = Vec::new();
        for &p in p_values {
            let candidates = self.pseudo_candidates(&samples, p)?;
            let mut reports = Vec::new();
            for trial in 0..n_trials {
                let cell_dir = self.sweep_dir().join(p_label(p)).join(format!("t{trial}"));
                let report_path = cell_dir.join("report.json");
                let mut cfg = self.seg_config(Some(p), false)?;
                cfg.seed = cfg.seed.wrapping_add(trial as u64);
                let summary = self.run_stage(
                    &format!("sweep/{}/t{trial}", p_label(p)),
                    json!({ "segmentation": cfg, "pools": self.config.pools, "evaluation": self.config.evaluation, "trial": trial }),
                    &self.pool_inputs(p),
                    &[("checkpoint", cell_dir.join("segmenter.ckpt")), ("report", report_path.clone())],
                    || {
                        let pools = select_pools(&samples, &candidates, &self.config.pools, cfg.seed);
                        let expert = ExpertPool::new(pools.expert.iter())?;
                        let pseudo = PseudoPool::new(pools.weak.iter(), self.taxonomy.count())?;
                        let expert = CountingPool::new(&expert);
                        let pseudo = CountingPool::new(&pseudo);
                        let run = train_segmentation(
                            &SupervisionPools {
                                expert: &expert,
                                pseudo: &pseudo,
                            },
                            &self.taxonomy,
                            &cfg,
                            &TrainOptions::default(),
                        )?;
                        run.checkpoint.save(&cell_dir.join("segmenter.ckpt"))?;
                        let predictor = CheckpointPredictor::new(&run.checkpoint, self.config.evaluation.cutoff)?;
                        let report = evaluate(&predictor, &test, &self.taxonomy, &run.checkpoint.meta.config_hash, None)?;
                        report.save(&report_path)?;
                        Ok(details(&[
                            ("miou", json!(report.miou)),
                            ("expert_reads", json!(expert.reads())),
                            ("pseudo_reads", json!(pseudo.reads())),
                        ]))
                    },
                )?;
                let report = EvaluationReport::load(&report_path)?;
                let reads = |k: &str| summary.details.get(k).and_then(Value::as_u64).unwrap_or(0) as usize;
                cells.push(SweepCell {
                    p,
                    trial,
                    miou: report.miou,
                    expert_reads: reads("expert_reads"),
                    pseudo_reads: reads("pseudo_reads"),
                    report: report_path,
                });
                reports.push(report);
            }
            let trial_miou: Vec<f64> = reports.iter().map(|r| r.miou).collect();
            let mean_miou = trial_miou.iter().sum::<f64>() / trial_miou.len() as f64;
            let interval = match (&self.config.evaluation.ci, self.config.evaluation.ci_mode) {
                (Some(ci), CiMode::OverTrials) if trial_miou.len() >= 2 => Some(trial_ci(&trial_miou, ci)?),
                _ => None,
            };
            rows.push(SweepRow {
                p,
                per_class: average_reports(&reports)?,
                trial_miou,
                mean_miou,
                interval,
            });
        }
        let report = SweepReport {
            classes: self.taxonomy.names().to_vec(),
            trials: n_trials,
            rows,
            cells,
        };
        write_json(&self.sweep_dir().join("sweep.json"), &report)?;
        std::fs::write(self.sweep_dir().join("sweep.md"), report.to_markdown())
            .map_err(|e| Error::io(self.sweep_dir(), e))?;
        emit_plots(
            &[Figure {
                style: FigureStyle::PSweep,
                title: "mIoU against expert-sampling probability".into(),
                y_label: "mIoU".into(),
                series: vec![report.series("sweep mean mIoU")],
            }],
            &self.sweep_dir(),
        )?;
        Ok(report)
    }
}

#[derive(Debug, Parser)]
#[command(name = "mixseg", about = "Segmentation from expert masks mixed with saliency pseudo-labels")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Re-run stages even when the ledger says they are current.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset under paths.data_root.
    SynthData,
    /// Train the image-level classifier.
    TrainClassifier,
    /// Write Grad-CAM heatmaps for the train and valid splits.
    GenCams,
    /// Pick per-class heatmap thresholds on the valid split.
    CalibrateThresholds,
    /// Train the inter-pixel relation network.
    TrainIrnet,
    /// Threshold heatmaps into a pseudo-label store.
    GenPseudolabels,
    /// Train a segmenter on mixed supervision.
    TrainSeg {
        /// Probability of drawing an expert sample.
        #[arg(long)]
        p: Option<f64>,
        /// Initialize the encoder from this run's classifier.
        #[arg(long)]
        init_from_classifier: bool,
    },
    /// Distill a student from a teacher segmenter.
    Distill {
        /// Teacher checkpoint; defaults to this run's p=1 segmenter.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground-truth stub instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a report with a reference row or another report.
    Compare {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "mixed")]
        row: String,
        #[arg(long)]
        against: Option<PathBuf>,
        /// Reference row of the gap baseline.
        #[arg(long, requires = "target")]
        baseline: Option<String>,
        /// Reference row of the gap target.
        #[arg(long, requires = "baseline")]
        target: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render charts and their data sidecars.
    Plot {
        /// Include the shipped reference curves and bars.
        #[arg(long)]
        reference: bool,
        /// Reports to draw as grouped bars.
        #[arg(long = "bars")]
        bars: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of p values.
    Sweep {
        /// Comma-separated p values; defaults to sweep.p_values.
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => validate_config(p),
        None => {
            let mut config = RunConfig::default();
            apply_env(&mut config);
            let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
            config.resolve_paths(&cwd);
            config.validate()?;
            Ok(config)
        }
    }
}

fn execute(cli: Cli) -> Result<StageSummary> {
    let config = load_config(cli.config.as_deref())?;
    let ctx = RunContext::open(config, cli.force)?;
    match cli.command {
        Command::SynthData => ctx.synth_data(),
        Command::TrainClassifier => ctx.train_classifier(),
        Command::GenCams => ctx.gen_cams(),
        Command::CalibrateThresholds => ctx.calibrate_thresholds(),
        Command::TrainIrnet => ctx.train_irnet(),
        Command::GenPseudolabels => ctx.gen_pseudolabels(),
        Command::TrainSeg { p, init_from_classifier } => ctx.train_seg(p, init_from_classifier),
        Command::Distill { teacher } => ctx.distill(teacher),
        Command::Evaluate { checkpoint, oracle, out } => ctx.evaluate(checkpoint, oracle, out),
        Command::Compare {
            report,
            row,
            against,
            baseline,
            target,
            out,
        } => ctx.compare(report, &row, against, baseline.zip(target), out),
        Command::Plot { reference, bars, out } => ctx.plot(reference, &bars, out),
        Command::Sweep { p, trials } => {
            let p_values = p.unwrap_or_else(|| ctx.config.sweep.p_values.clone());
            let trials = trials.unwrap_or(ctx.config.sweep.trials);
            let report = ctx.run_p_sweep(&p_values, trials)?;
            Ok(StageSummary {
                stage: "sweep".into(),
                status: "ok".into(),
                outputs: BTreeMap::from([(
                    "sweep".to_string(),
                    ctx.sweep_dir().join("sweep.json").to_string_lossy().into_owned(),
                )]),
                details: details(&[(
                    "mean_miou",
                    json!(report.rows.iter().map(|r| (r.p.to_string(), r.mean_miou)).collect::<BTreeMap<_, _>>()),
                )]),
            })
        }
    }
}

/// Parses `argv` (program name first), runs the stage and returns the exit
/// code: 0 on success, 1 on usage or validation errors, 2 otherwise.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{}", summary.to_line());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.sweep.p_values, vec![0.0, 0.2, 0.4, 0.6, 0.8, 0.85, 0.9, 1.0]);
        assert_eq!(c.classifier.learning_rate, 1e-4);
        assert_eq!(c.irnet.learning_rate, 0.1);
        assert_eq!(c.distillation.temperature, 10.0);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_ranges_rejected() {
        let e = RunConfig::from_toml_str("[segmentation]\nbogus = 1\n").unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("bogus"));
        let c = RunConfig::from_toml_str("[segmentation]\np_expert = 1.3\n").unwrap();
        assert!(c.validate().unwrap_err().is_validation());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.segmentation.learning_rate = Some(3e-4);
        c.pools.expert_count = Some(20);
        c.evaluation.ci = Some(CiOptions::default());
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn choose_is_seeded_subset() {
        let a = choose(10, 4, 7);
        assert_eq!(a, choose(10, 4, 7));
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(choose(3, 5, 0), vec![0, 1, 2]);
    }
}
