use std::fs;
use std::path::Path;

use labelsift::cli::cli_main;
use labelsift::data::{
    load_dataset, make_blobs, save_dataset, BlobSpec, FileFormat, NoisePattern, NoiseSpec,
};
use labelsift::detect::{detection_metrics, DetectionRule, DetectionSet};
use labelsift::nn::train_ensemble;
use labelsift::pipeline::{
    iteration_seed, parse_records_csv, prepare_data, run_iteration, run_pipeline, write_report,
    DataSource, ModelSettings, PipelineConfig, RelabelMode,
};
use labelsift::relabel::{EpochMethod, TrajectoryRule};
use labelsift::uncertainty::{Orientation, ScoreVector, Statistic};

fn small_config() -> PipelineConfig {
    PipelineConfig {
        data: DataSource::Blobs(BlobSpec {
            n_per_class: 40,
            num_classes: 3,
            dim: 4,
            separation: 3.0,
            seed: 1,
        }),
        noise: Some(NoiseSpec {
            pattern: NoisePattern::Symmetric,
            rate: 0.3,
            seed: 2,
        }),
        test_fraction: 0.25,
        model: ModelSettings {
            hidden: vec![16],
            dropout_rate: 0.2,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            epochs: 6,
        },
        members: 2,
        passes: 3,
        statistic: Statistic::MeanMaxSoftmax,
        detection: DetectionRule::TopFraction(0.1),
        relabel: RelabelMode::Oracle,
        epoch_method: EpochMethod::UncertaintyTrajectory(TrajectoryRule::default()),
        iterations: 3,
        seed: 42,
        ..PipelineConfig::default()
    }
}

#[test]
fn oracle_loop_never_adds_noise() {
    let report = run_pipeline(&small_config()).unwrap();
    assert!(report.failure.is_none());
    let records = report.records();
    assert_eq!(records.len(), 3);
    for w in records.windows(2) {
        assert!(w[1].noisy_count.unwrap() <= w[0].noisy_count.unwrap());
    }
    for r in &records {
        assert_eq!(
            r.noise_prop.unwrap(),
            r.noisy_count.unwrap() as f64 / report.train_size as f64
        );
    }
    // Final row carries no detection by default.
    assert!(records[2].det_precision.is_none());
    assert!(records[0].det_precision.is_some());
}

#[test]
fn clean_data_reports_zero_precision() {
    let config = PipelineConfig {
        noise: None,
        iterations: 1,
        final_detection: true,
        ..small_config()
    };
    let report = run_pipeline(&config).unwrap();
    let art = &report.iterations[0];
    assert_eq!(art.record.noisy_count, Some(0));
    assert!(!art.detection.as_ref().unwrap().is_empty());
    assert_eq!(art.record.det_precision, Some(0.0));
    assert_eq!(art.outcome.as_ref().unwrap().counts.unwrap().newly_corrupted, 0);
}

#[test]
fn single_iteration_matches_run_iteration() {
    let config = PipelineConfig {
        iterations: 1,
        final_detection: true,
        ..small_config()
    };
    let report = run_pipeline(&config).unwrap();
    let data = prepare_data(&config).unwrap();
    let (_, art) = run_iteration(&data.train, &data.test, &config, 0, None).unwrap();
    assert_eq!(report.records(), vec![art.record]);
}

#[test]
fn iterations_retrain_from_scratch() {
    let config = small_config();
    let data = prepare_data(&config).unwrap();
    let (_, art) = run_iteration(&data.train, &data.test, &config, 1, None).unwrap();
    let model = config
        .model
        .model_config(data.train.dim(), data.train.num_classes(), iteration_seed(config.seed, 1));
    let fresh = train_ensemble(&data.train, &model, config.members, None).unwrap();
    for (a, b) in art.members.iter().zip(&fresh.members) {
        assert_eq!(a.network, b.network);
    }
}

#[test]
fn train_and_test_ids_are_disjoint() {
    let data = prepare_data(&small_config()).unwrap();
    assert!(data.train_rows.iter().all(|r| !data.test_rows.contains(r)));
    assert_eq!(data.train_rows.len() + data.test_rows.len(), 120);
}

#[test]
fn report_files_are_consistent_and_deterministic() {
    let config = PipelineConfig {
        final_detection: true,
        iterations: 2,
        ..small_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = run_pipeline(&config).unwrap();
    write_report(&report, &a).unwrap();
    write_report(&run_pipeline(&config).unwrap(), &b).unwrap();
    let records = fs::read(a.join("records.csv")).unwrap();
    assert_eq!(records, fs::read(b.join("records.csv")).unwrap());

    let rows = parse_records_csv(std::str::from_utf8(&records).unwrap()).unwrap();
    let expected: Vec<_> = report.records().iter().map(|r| r.row()).collect();
    assert_eq!(rows, expected);

    for name in ["summary.json", "scores_iter1.csv", "trace_iter1.csv", "mixturefit_iter1.json"] {
        assert!(a.join(name).exists(), "{name} missing");
    }

    // Precision recomputed from the persisted detection file.
    let data = prepare_data(&config).unwrap();
    let detected = DetectionSet::load(&a.join("detect_iter1.csv"), config.detection, "x").unwrap();
    let metrics = detection_metrics(&detected, &data.train).unwrap();
    assert_eq!(Some(metrics.precision), rows[0].det_precision);
}

#[test]
fn predicted_mode_keeps_bookkeeping() {
    let config = PipelineConfig {
        relabel: RelabelMode::Predicted,
        ..small_config()
    };
    let report = run_pipeline(&config).unwrap();
    assert!(report.failure.is_none(), "{:?}", report.failure);
    for w in report.iterations.windows(2) {
        let c = w[0].record.relabel_counts.unwrap();
        let before = w[0].record.noisy_count.unwrap();
        let after = w[1].record.noisy_count.unwrap();
        assert_eq!(after, before - c.correctly_relabeled + c.newly_corrupted);
        assert!(w[0].record.relabel_epoch.is_some());
    }
}

#[test]
fn gold_epoch_selection_runs() {
    let config = PipelineConfig {
        relabel: RelabelMode::Predicted,
        epoch_method: EpochMethod::GoldSubset,
        gold_size: Some(20),
        iterations: 2,
        ..small_config()
    };
    let report = run_pipeline(&config).unwrap();
    assert!(report.failure.is_none(), "{:?}", report.failure);
    let choice = report.iterations[0].epoch_choice.as_ref().unwrap();
    assert_eq!(choice.diagnostics.gold_clean.len(), choice.diagnostics.epochs.len());
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["labelsift"];
    argv.extend_from_slice(args);
    cli_main(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stages_compose_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Fixture: pre-split files, noise injected on the training file.
    assert_eq!(cli(&["gen", "--n-per-class", "40", "--classes", "3", "--dim", "4", "--separation", "3", "--seed", "1", "--out", s(&d.join("train_clean.csv"))]), 0);
    assert_eq!(cli(&["gen", "--n-per-class", "10", "--classes", "3", "--dim", "4", "--separation", "3", "--seed", "9", "--out", s(&d.join("test.csv"))]), 0);
    assert_eq!(cli(&["corrupt", "--input", s(&d.join("train_clean.csv")), "--pattern", "symmetric", "--rate", "0.3", "--seed", "2", "--out", s(&d.join("train.csv"))]), 0);

    let mut config = small_config();
    config.data = DataSource::Split {
        train: d.join("train.csv"),
        test: d.join("test.csv"),
    };
    config.noise = None;
    config.iterations = 1;
    config.final_detection = true;
    config.relabel = RelabelMode::Predicted;
    let cfg = d.join("cfg.json");
    fs::write(&cfg, serde_json::to_string(&config).unwrap()).unwrap();

    let run = d.join("run");
    assert_eq!(cli(&["run", "--config", s(&cfg), "--out", s(&run)]), 0);

    let seed = iteration_seed(config.seed, 0).to_string();
    let model = d.join("model");
    let common = ["--config", s(&cfg), "--seed", &seed];
    let with = |extra: &[&str]| {
        let mut v: Vec<&str> = extra.to_vec();
        v.extend_from_slice(&common);
        cli(&v)
    };
    assert_eq!(with(&["train", "--input", s(&d.join("train.csv")), "--out", s(&model)]), 0);
    assert_eq!(with(&["score", "--input", s(&d.join("train.csv")), "--model", s(&model), "--out", s(&d.join("scores.csv"))]), 0);
    assert_eq!(with(&["fit", "--scores", s(&d.join("scores.csv")), "--out", s(&d.join("fit.json"))]), 0);
    assert_eq!(with(&["detect", "--scores", s(&d.join("scores.csv")), "--out", s(&d.join("detect.csv"))]), 0);
    assert_eq!(
        with(&["relabel", "--input", s(&d.join("train.csv")), "--detect", s(&d.join("detect.csv")), "--model", s(&model), "--changes", s(&d.join("changes.csv")), "--out", s(&d.join("relabeled.csv"))]),
        0
    );

    let same = |a: &str, b: &str| {
        assert_eq!(
            fs::read(d.join(a)).unwrap(),
            fs::read(run.join(b)).unwrap(),
            "{a} differs from {b}"
        );
    };
    same("scores.csv", "scores_iter1.csv");
    same("fit.json", "mixturefit_iter1.json");
    same("detect.csv", "detect_iter1.csv");
    same("changes.csv", "relabel_iter1.csv");
    same("model/trace.csv", "trace_iter1.csv");
}

#[test]
fn cli_run_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, serde_json::to_string(&small_config()).unwrap()).unwrap();
    for out in ["a", "b"] {
        let code = cli(&["run", "--config", s(&cfg), "--seed", "7", "--set", "iterations=2", "--out", s(&dir.path().join(out))]);
        assert_eq!(code, 0);
    }
    assert_eq!(
        fs::read(dir.path().join("a/records.csv")).unwrap(),
        fs::read(dir.path().join("b/records.csv")).unwrap()
    );
    let text = fs::read_to_string(dir.path().join("a/records.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn cli_pair_corruption_recount() {
    let dir = tempfile::tempdir().unwrap();
    let (clean, noisy) = (dir.path().join("c.bin"), dir.path().join("n.bin"));
    let d = make_blobs(&BlobSpec {
        n_per_class: 25,
        num_classes: 10,
        dim: 2,
        separation: 2.0,
        seed: 3,
    })
    .unwrap();
    save_dataset(&d, &clean, FileFormat::Binary).unwrap();
    assert_eq!(cli(&["corrupt", "--input", s(&clean), "--pattern", "pair", "--rate", "0.4", "--seed", "5", "--out", s(&noisy)]), 0);
    let out = dir.path().join("n.bin");
    let noisy_d = load_dataset(&out, FileFormat::Binary).unwrap();
    let summary = labelsift::cli::dataset_summary(&noisy_d);
    assert!(summary.contains("noisy_count 100\n"), "{summary}");
    assert!(summary.contains("shifted_by_one 100\n"), "{summary}");
    assert_eq!(cli(&["report", "--input", s(&noisy)]), 0);
}

#[test]
fn cli_top_detection_size() {
    let dir = tempfile::tempdir().unwrap();
    let scores = ScoreVector {
        scores: (0..5000).map(|i| ((i * 7919) % 5000) as f64 / 5000.0).collect(),
        orientation: Orientation::ConfidenceHigherIsCleaner,
        statistic: "mean_max_softmax".into(),
    };
    let path = dir.path().join("scores.csv");
    scores.save(&path).unwrap();
    let out = dir.path().join("det.csv");
    assert_eq!(cli(&["detect", "--scores", s(&path), "--rule", "top", "--p", "0.10", "--out", s(&out)]), 0);
    let det = DetectionSet::load(&out, DetectionRule::TopFraction(0.1), "x").unwrap();
    assert_eq!(det.len(), 500);
}

#[test]
fn cli_errors_map_to_exit_codes() {
    assert_eq!(cli(&["nonsense"]), 1);
    assert_eq!(cli(&["detect", "--frob"]), 1);
    assert_eq!(cli(&["run"]), 1);
    assert_eq!(cli(&["run", "--set", "iterations=0", "--out", "/tmp/unused-labelsift"]), 2);
    assert_eq!(cli(&["score", "--input", "/nonexistent.csv", "--model", "/nonexistent", "--out", "/tmp/x.csv"]), 2);
}
