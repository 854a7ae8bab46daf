mod common;

use std::process::Command;

use clstream_core::metrics::{mean, AccuracyMatrix};
use clstream_core::models::build_model;
use clstream_core::strategies::StrategyConfig;
use clstream_harness::config::{CurriculumConfig, ExperimentConfig};
use clstream_harness::protocol::{evaluate, Split, METRIC_NAMES};
use clstream_harness::report::{build_report, report};
use clstream_harness::results::{read_experiment, write_experiment, ExperimentMetadata};
use clstream_harness::{run_and_persist, run_experiment, sweep, tune, Error, PreparedStream, RunResult, SweepAxis};
use common::{grid, small, strong_shift};
use serde_json::json;

fn two_task(cfg: &mut ExperimentConfig) {
    cfg.curriculum = CurriculumConfig {
        seed: None,
        order: Some(vec!["a".into(), "b".into()]),
    };
}

#[test]
fn evaluation_records_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(grid("naive", &[]), dir.path());
    let stream = PreparedStream::prepare(&cfg).unwrap();
    let mut model = build_model(&cfg.architecture, stream.input_dims(), 1).unwrap();
    let zeros = vec![0.0; model.param_count()];
    model.params_mut().values_mut().copy_from_slice(&zeros);
    let cw = stream.class_weights().unwrap();
    let tests: Vec<_> = (0..stream.len()).map(|t| stream.test(t)).collect();
    let records = evaluate(&model, &tests, &cw, (0, 2, 0), Split::Test).unwrap();
    assert_eq!(records.len(), (stream.len() + 1) * METRIC_NAMES.len());
    for r in records.iter().filter(|r| r.metric == "balanced_accuracy") {
        assert_eq!(r.value, Some(0.5));
    }
    for m in METRIC_NAMES {
        let per_task: Vec<f64> = records
            .iter()
            .filter(|r| r.metric == m && r.eval_task.is_some())
            .filter_map(|r| r.value)
            .collect();
        let avg = records.iter().find(|r| r.metric == m && r.eval_task.is_none()).unwrap();
        assert_eq!(avg.value, Some(mean(&per_task)), "{m}");
    }
}

#[test]
fn runs_are_deterministic_and_cumulative_keeps_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(grid("cumulative", &[]), dir.path());
    two_task(&mut cfg);
    let stream = PreparedStream::prepare(&cfg).unwrap();
    let a = run_experiment(&cfg, &stream, &StrategyConfig::Cumulative).unwrap();
    let b = run_experiment(&cfg, &stream, &StrategyConfig::Cumulative).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.records, y.records);
        assert_eq!(x.accuracy, y.accuracy);
    }
    let merged0 = stream.train(0).len() + stream.validation(0).len();
    let merged1 = stream.train(1).len() + stream.validation(1).len();
    assert_eq!(a[0].buffer_sizes, vec![vec![merged0], vec![merged0, merged1]]);
    assert_ne!(a[0].records, a[1].records, "runs differ by initialization");
    assert_eq!(a[0].epochs_per_task, vec![3, 3]);
}

#[test]
fn tune_prefers_a_working_point_over_a_collapsing_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = strong_shift(grid("ewc", &[("ewc_lambda", vec![json!(1e12), json!(0.1)])]), dir.path());
    cfg.epochs_per_task = 10;
    let stream = PreparedStream::prepare(&cfg).unwrap();
    let outcome = tune(&cfg, &stream).unwrap();
    assert_eq!(outcome.chosen, StrategyConfig::Ewc { ewc_lambda: 0.1 });
    let collapsed = outcome.candidates[0].score.unwrap_or(0.5);
    assert_eq!(collapsed, 0.5);
    assert!(outcome.candidates[1].score.unwrap() > 0.5);
    assert_eq!(outcome.reads_beyond_tuning_tasks(), 0);

    let single = small(grid("naive", &[]), dir.path());
    let outcome = tune(&single, &stream).unwrap();
    assert_eq!(outcome.candidates.len(), 1);
    assert!(outcome.candidates[0].score.is_some());
}

#[test]
fn empty_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(grid("ewc", &[("ewc_lambda", vec![])]), dir.path());
    let stream = PreparedStream::prepare(&small(grid("naive", &[]), dir.path())).unwrap();
    assert!(matches!(tune(&cfg, &stream), Err(Error::Config(_))));
}

#[test]
fn results_round_trip_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(grid("replay", &[]), dir.path());
    let outcome = run_and_persist(&cfg, None).unwrap();
    let (meta, runs) = read_experiment(&outcome.dir).unwrap();
    assert_eq!(meta.strategy, outcome.strategy);
    assert_eq!(meta.settings["batch_size"], json!(16));
    assert_eq!(runs, outcome.runs);
    for (a, b) in runs.iter().zip(&outcome.runs) {
        assert_eq!(a.records, b.records);
    }
    let naive = small(grid("naive", &[]), dir.path());
    run_and_persist(&naive, None).unwrap();

    let r = report(dir.path()).unwrap();
    assert_eq!(r.summary.len(), 2);
    for name in ["summary.csv", "trajectories.csv", "running_average.csv", "report.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let replay = r.summary.iter().find(|s| s.strategy == "replay").unwrap();
    let finals: Vec<f64> = runs.iter().filter_map(|r| r.final_mean_balanced_accuracy).collect();
    assert_eq!(replay.final_balanced_accuracy, mean(&finals));
    assert_eq!(r.running_average.iter().filter(|p| p.strategy == "replay").count(), 3);

    let mut other = small(grid("naive", &[]), dir.path());
    other.epochs_per_task = 2;
    other.output_dir = dir.path().join("other");
    run_and_persist(&other, None).unwrap();
    match build_report(dir.path()) {
        Err(Error::MixedResults { fingerprints, .. }) => assert_eq!(fingerprints.len(), 2),
        other => panic!("expected mixed results, got {other:?}"),
    }
}

fn fake_run(cfg: &ExperimentConfig, run: usize, final_ba: f64) -> RunResult {
    let mut accuracy = AccuracyMatrix::new(2);
    accuracy.set(0, 0, Some(final_ba)).unwrap();
    accuracy.set(1, 0, Some(final_ba)).unwrap();
    accuracy.set(1, 1, Some(final_ba)).unwrap();
    RunResult {
        fingerprint: cfg.protocol_fingerprint(),
        strategy: StrategyConfig::Naive,
        architecture: cfg.architecture.clone(),
        run,
        seed: run as u64,
        tasks: vec!["a".into(), "b".into()],
        class_weights: [1.0, 1.0],
        records: Vec::new(),
        accuracy,
        final_mean_balanced_accuracy: Some(final_ba),
        final_forgetting: Some(0.0),
        final_forgetting_per_task: vec![0.0],
        epochs_per_task: vec![3, 3],
        buffer_sizes: vec![vec![], vec![]],
        leaked_patients: 0,
        wall_clock_seconds: 0.0,
        failure: None,
    }
}

#[test]
fn report_summaries_match_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(grid("naive", &[]), dir.path());
    let write = |sub: &str, finals: &[f64]| {
        let mut c = cfg.clone();
        c.n_runs = finals.len();
        let runs: Vec<RunResult> = finals.iter().enumerate().map(|(i, &v)| fake_run(&c, i, v)).collect();
        let meta = ExperimentMetadata::new(&c, &StrategyConfig::Naive, None, &runs);
        write_experiment(&dir.path().join(sub), &meta, &runs).unwrap();
    };

    write("constant", &[0.6; 5]);
    let r = build_report(&dir.path().join("constant")).unwrap();
    let row = &r.summary[0];
    assert_eq!(row.final_balanced_accuracy, 0.6);
    assert_eq!(row.final_balanced_accuracy_ci_low, Some(0.6));
    assert_eq!(row.final_balanced_accuracy_ci_high, Some(0.6));

    write("single", &[0.7]);
    let r = build_report(&dir.path().join("single")).unwrap();
    assert_eq!(r.summary[0].final_balanced_accuracy_ci_low, None);
    assert!(r.summary[0].note.contains("suppressed"));

    write("pair", &[0.5, 0.8]);
    let r = build_report(&dir.path().join("pair")).unwrap();
    assert!((r.summary[0].final_balanced_accuracy - 0.65).abs() < 1e-15);
    let lo = r.summary[0].final_balanced_accuracy_ci_low.unwrap();
    let hi = r.summary[0].final_balanced_accuracy_ci_high.unwrap();
    assert!((0.5..=0.65).contains(&lo) && (0.65..=0.8).contains(&hi));
}

#[test]
fn buffer_sweep_shares_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(grid("replay", &[]), dir.path());
    cfg.n_runs = 1;
    cfg.epochs_per_task = 2;
    cfg.sweep.buffer_budget = vec![4, 16, 1_000_000];
    let groups = sweep(&cfg, SweepAxis::BufferBudget, None).unwrap();
    assert_eq!(groups.len(), 3);
    let seeds: Vec<u64> = groups.iter().map(|g| g.outcome.runs[0].seed).collect();
    assert!(seeds.windows(2).all(|w| w[0] == w[1]));
    assert!(dir.path().join("sweep_buffer_budget/sweep.json").is_file());
    for (g, b) in groups.iter().zip([4, 16, 1_000_000]) {
        for sizes in &g.outcome.runs[0].buffer_sizes {
            assert!(sizes.iter().all(|&s| s <= b));
        }
    }

    let mut cum = cfg.clone();
    cum.strategy = grid("cumulative", &[]);
    let stream = PreparedStream::prepare(&cum).unwrap();
    let c = run_experiment(&cum, &stream, &StrategyConfig::Cumulative).unwrap();
    assert_eq!(groups[2].outcome.runs[0].records, c[0].records);

    cfg.sweep.curriculum = vec![
        CurriculumConfig { seed: Some(1), order: None },
        CurriculumConfig { seed: None, order: Some(vec!["b".into(), "a".into(), "c".into()]) },
    ];
    let groups = sweep(&cfg, SweepAxis::Curriculum, None).unwrap();
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[1].outcome.runs[0].tasks, vec!["b", "a", "c"]);
}

#[test]
fn cli_end_to_end_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_clstream");
    let data = dir.path().join("data");
    let status = Command::new(bin)
        .args(["generate-data", "strong-shift", data.to_str().unwrap(), "--n-patients", "300"])
        .status()
        .unwrap();
    assert!(status.success());

    let out = dir.path().join("out");
    let config = format!(
        r#"
domain_key = "domain"
epochs_per_task = 2
batch_size = 16
n_runs = 1
output_dir = "{}"

[dataset]
path = "{}"

[architecture]
kind = "cnn1d"
n_feature_layers = 1
hidden_dim = 4
nonlinearity = "tanh"

[strategy]
name = "si"
grid = {{ si_lambda = [0.1, 1.0] }}
"#,
        out.display(),
        data.display()
    );
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, &config).unwrap();
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap();
    let cfg_s = cfg_path.to_str().unwrap();

    let tuned = run(&["tune", cfg_s]);
    assert!(tuned.status.success(), "{}", String::from_utf8_lossy(&tuned.stderr));
    let hp = out.join("si_cnn1d/hyperparams.json");
    assert!(hp.is_file());
    let ran = run(&["run", cfg_s, "--hyperparams", hp.to_str().unwrap()]);
    assert!(ran.status.success(), "{}", String::from_utf8_lossy(&ran.stderr));
    let reported = run(&["report", out.to_str().unwrap()]);
    assert!(reported.status.success());
    assert!(String::from_utf8_lossy(&reported.stdout).contains("CI suppressed"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, config.replace("n_runs = 1", "n_runs = 1\nlambda_e = 3")).unwrap();
    assert_eq!(run(&["run", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["run", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(run(&["report", dir.path().join("nothing").to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
}
