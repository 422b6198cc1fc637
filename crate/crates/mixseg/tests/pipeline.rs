use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixseg::evaluation::{read_sidecar, EvaluationReport};
use mixseg::pipeline::{
    select_pools, validate_config, PoolConfig, PseudoSource, RunConfig, RunContext, StageSummary, ARTIFACT_ROOT_ENV,
};

fn mixseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixseg"))
        .args(args)
        .env_remove(ARTIFACT_ROOT_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn summary(out: &Output) -> StageSummary {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("one summary line")).unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
[synthdata]
n_images = 24
image_size = [16, 16]
"#;

#[test]
fn usage_errors_exit_one() {
    let none = mixseg(&[]);
    assert_eq!(none.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(mixseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mixseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_failures_exit_one_never_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "[segmentation]\nunknown_knob = 3\n",
        "[segmentation]\np_expert = 1.3\n",
        "run_id = \"../escape\"\n",
        "[sweep]\ntrials = 0\n",
        "[segmentation]\nencoder_init = \"classifier-checkpoint\"\ninit_path = \"missing.ckpt\"\n",
        "not toml at all = = =",
    ];
    for body in cases {
        let cfg = write_config(dir.path(), body);
        let out = mixseg(&["--config", cfg.to_str().unwrap(), "synth-data"]);
        assert_eq!(out.status.code(), Some(1), "config {body:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let missing = dir.path().join("absent.toml");
    assert_eq!(mixseg(&["--config", missing.to_str().unwrap(), "synth-data"]).status.code(), Some(1));

    // A stage whose inputs were never produced.
    let cfg = write_config(dir.path(), SMALL);
    let out = mixseg(&["--config", cfg.to_str().unwrap(), "train-classifier"]);
    assert_eq!(out.status.code(), Some(1));
    let out = mixseg(&["--config", cfg.to_str().unwrap(), "train-seg", "--p", "-0.1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "a file where a directory should be").unwrap();
    let cfg = write_config(dir.path(), &format!("[paths]\nartifact_root = \"blocker\"\n{SMALL}"));
    let out = mixseg(&["--config", cfg.to_str().unwrap(), "synth-data"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ledger_skips_forces_and_guards_run_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    let first = mixseg(&["--config", cfg, "synth-data"]);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(summary(&first).status, "ok");
    // Relative paths resolve against the config file's directory.
    assert!(dir.path().join("data/manifest.jsonl").exists());
    assert!(dir.path().join("artifacts/default/ledger.jsonl").exists());

    let again = mixseg(&["--config", cfg, "synth-data"]);
    assert_eq!(summary(&again).status, "skipped");
    let forced = mixseg(&["--config", cfg, "--force", "synth-data"]);
    assert_eq!(summary(&forced).status, "ok");

    std::fs::remove_file(dir.path().join("data/manifest.jsonl")).unwrap();
    let repaired = mixseg(&["--config", cfg, "synth-data"]);
    assert_eq!(summary(&repaired).status, "ok");

    write_config(dir.path(), &format!("{SMALL}seed = 5\n"));
    let clash = mixseg(&["--config", cfg, "synth-data"]);
    assert_eq!(clash.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&clash.stderr).contains("run_id"));
}

#[test]
fn artifact_root_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_mixseg"))
        .args(["--config", cfg.to_str().unwrap(), "synth-data"])
        .env(ARTIFACT_ROOT_ENV, &elsewhere)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(elsewhere.join("default/run.json").exists());
    assert!(!dir.path().join("artifacts").exists());
}

#[test]
fn config_round_trips_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run_id = \"trip\"\n[pools]\nexpert_count = 5\npseudo_source = \"dataset\"\n[evaluation.ci]\nlevel = 0.9\nresamples = 50\nseed = 1\n",
    );
    let config = validate_config(&cfg).unwrap();
    assert_eq!(config.paths.data_root, dir.path().join("data"));
    let back = RunConfig::from_toml_str(&config.to_toml().unwrap()).unwrap();
    assert_eq!(back, config);

    let empty = write_config(dir.path(), "");
    let defaults = validate_config(&empty).unwrap();
    assert_eq!(defaults.sweep.p_values, vec![0.0, 0.2, 0.4, 0.6, 0.8, 0.85, 0.9, 1.0]);
    assert_eq!(defaults.segmentation.batch_size, 8);
    assert_eq!(defaults.irnet.batch_size, 16);
    assert_eq!(defaults.classifier.batch_size, 16);
    assert_eq!(defaults.distillation.learning_rate, 1e-3);
}

fn sweep_context(dir: &Path, trials: usize) -> RunContext {
    let mut config = RunConfig::from_toml_str(&format!(
        "run_id = \"sweep\"\n[segmentation]\nbatch_size = 4\nepochs = 1\nsamples_per_epoch = 8\n[pools]\nexpert_count = 4\nweak_count = 6\npseudo_source = \"dataset\"\n[sweep]\ntrials = {trials}\n{SMALL}"
    ))
    .unwrap();
    config.resolve_paths(dir);
    let ctx = RunContext::open(config, false).unwrap();
    ctx.synth_data().unwrap();
    ctx
}

#[test]
fn sweep_over_zero_and_one() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = sweep_context(dir.path(), 2);
    let report = ctx.run_p_sweep(&[0.0, 1.0], 2).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.cells.len(), 4);
    for cell in &report.cells {
        if cell.p == 1.0 {
            assert_eq!((cell.expert_reads, cell.pseudo_reads), (8, 0));
        } else {
            assert_eq!((cell.expert_reads, cell.pseudo_reads), (0, 8));
        }
    }
    for row in &report.rows {
        let trials: Vec<f64> = report
            .cells
            .iter()
            .filter(|c| c.p == row.p)
            .map(|c| EvaluationReport::load(&c.report).unwrap().miou)
            .collect();
        assert_eq!(row.trial_miou, trials);
        assert_eq!(row.mean_miou, trials.iter().sum::<f64>() / trials.len() as f64);
    }
    let table = std::fs::read_to_string(ctx.sweep_dir().join("sweep.md")).unwrap();
    assert!(table.contains("| Task | p=0 | p=1 |"));
    assert_eq!(table.lines().count(), 3 + ctx.taxonomy.count());
    let sidecar = read_sidecar(&ctx.sweep_dir().join("p-sweep.ndjson")).unwrap();
    assert_eq!(sidecar.len(), 2);

    // Cells are resumable: a second sweep reuses every finished cell.
    let before = ctx.ledger_entries().len();
    let again = ctx.run_p_sweep(&[0.0, 1.0], 2).unwrap();
    assert_eq!(again, report);
    assert_eq!(ctx.ledger_entries().len(), before);
}

#[test]
fn pools_exclude_experts_and_test_images() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = sweep_context(dir.path(), 1);
    let samples = ctx.load_samples().unwrap();
    let config = PoolConfig {
        expert_count: Some(3),
        weak_count: Some(5),
        pseudo_source: PseudoSource::Dataset,
    };
    let a = select_pools(&samples, &samples, &config, 1);
    assert_eq!(a.expert.len(), 3);
    assert_eq!(a.weak.len(), 5);
    assert!(a.weak.iter().all(|w| w.split != mixseg::core::Split::Test));
    assert!(a.weak.iter().all(|w| a.expert.iter().all(|e| e.id != w.id)));
    let b = select_pools(&samples, &samples, &config, 1);
    assert_eq!(
        a.weak.iter().map(|s| &s.id).collect::<Vec<_>>(),
        b.weak.iter().map(|s| &s.id).collect::<Vec<_>>()
    );
}
