//! The iterative detect/relabel loop.
//!
//! Each iteration retrains a fresh ensemble on the current labels, scores
//! every training image, detects the suspicious ones, relabels them and
//! evaluates on a held-out test split. Iteration seeds come from the master
//! seed via [`iteration_seed`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    draw_gold_subset, inject_noise, load_dataset, make_blobs, split_train_test, BlobSpec, Dataset,
    FileFormat, GoldSubset, NoiseSpec,
};
use crate::detect::{
    detect_by_mixture, detect_top_fraction, detection_metrics, noise_ratio_curve, DetectionMetrics,
    DetectionRule, DetectionSet,
};
use crate::error::{Error, Result};
use crate::mixfit::{fit_beta_mixture, BetaMixtureFit, EmConfig};
use crate::nn::{
    ensemble_accuracy, predict_ensemble, traces_to_csv, train_ensemble, EpochTrace, ModelConfig,
    TraceOptions, TrainedMember,
};
use crate::relabel::{
    relabel_oracle, relabel_predicted, select_relabel_epoch, EpochMethod, RelabelCounts,
    RelabelEpochChoice, RelabelOutcome, TrajectoryRule,
};
use crate::seed::{self, stream};
use crate::uncertainty::{to_confidence, to_uncertainty, Orientation, ScoreVector, Statistic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Synthetic Gaussian blobs, split by `test_fraction`.
    Blobs(BlobSpec),
    /// One dataset file, split by `test_fraction`.
    File { path: PathBuf },
    /// Separate train and test files; `test_fraction` is ignored.
    Split { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            hidden: vec![512],
            dropout_rate: 0.2,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, dim: usize, classes: usize, seed: u64) -> ModelConfig {
        let mut layer_sizes = vec![dim];
        layer_sizes.extend(&self.hidden);
        layer_sizes.push(classes);
        ModelConfig {
            layer_sizes,
            dropout_rate: self.dropout_rate,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelMode {
    Predicted,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSource,
    /// Applied to the training split only.
    pub noise: Option<NoiseSpec>,
    pub test_fraction: f64,
    pub model: ModelSettings,
    pub members: usize,
    pub passes: usize,
    pub statistic: Statistic,
    pub detection: DetectionRule,
    pub relabel: RelabelMode,
    pub epoch_method: EpochMethod,
    pub gold_size: Option<usize>,
    /// Redraw the gold ids every iteration instead of once.
    pub gold_refresh: bool,
    pub iterations: usize,
    /// Detect (and report metrics) on the final iteration too.
    pub final_detection: bool,
    pub em: EmConfig,
    pub snapshot_stride: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataSource::Blobs(BlobSpec {
                n_per_class: 600,
                num_classes: 10,
                dim: 32,
                separation: 8.0,
                seed: 1,
            }),
            noise: Some(NoiseSpec {
                pattern: crate::data::NoisePattern::Symmetric,
                rate: 0.4,
                seed: 2,
            }),
            test_fraction: 1.0 / 6.0,
            model: ModelSettings::default(),
            members: 5,
            passes: 10,
            statistic: Statistic::VariationRatio,
            detection: DetectionRule::TopFraction(0.1),
            relabel: RelabelMode::Predicted,
            epoch_method: EpochMethod::UncertaintyTrajectory(TrajectoryRule::default()),
            gold_size: None,
            gold_refresh: false,
            iterations: 5,
            final_detection: false,
            em: EmConfig::default(),
            snapshot_stride: 1,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::validation("iterations must be at least 1"));
        }
        if self.members == 0 || self.passes == 0 {
            return Err(Error::validation("members and passes must be positive"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::validation("hidden widths must be positive"));
        }
        self.em.validate()?;
        if let EpochMethod::GoldSubset = self.epoch_method {
            if self.gold_size.is_none() {
                return Err(Error::validation("gold epoch selection needs gold_size"));
            }
        }
        match self.detection {
            DetectionRule::TopFraction(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::validation("top fraction outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))
    }
}

/// Seed of iteration `index` (0-based) under `master`.
pub fn iteration_seed(master: u64, index: usize) -> u64 {
    seed::derive(master, stream::ITERATION, index as u64)
}

/// Training and test data after splitting and noise injection.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Rows of the source data behind each split; disjoint.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

pub fn prepare_data(config: &PipelineConfig) -> Result<PreparedData> {
    let split = |full: Dataset| -> Result<PreparedData> {
        let s = split_train_test(
            &full,
            config.test_fraction,
            seed::derive(config.seed, stream::SPLIT, 0),
        )?;
        Ok(PreparedData {
            train: s.train,
            test: s.test,
            train_rows: s.train_rows,
            test_rows: s.test_rows,
        })
    };
    let mut prepared = match &config.data {
        DataSource::Blobs(spec) => split(make_blobs(spec)?)?,
        DataSource::File { path } => split(load_dataset(path, FileFormat::from_path(path))?)?,
        DataSource::Split { train, test } => {
            let train_d = load_dataset(train, FileFormat::from_path(train))?;
            let test_d = load_dataset(test, FileFormat::from_path(test))?;
            let (n_train, n_test) = (train_d.len(), test_d.len());
            PreparedData {
                train: train_d,
                test: test_d,
                train_rows: (0..n_train).collect(),
                test_rows: (n_train..n_train + n_test).collect(),
            }
        }
    };
    if prepared.train.num_classes() != prepared.test.num_classes()
        || prepared.train.dim() != prepared.test.dim()
    {
        return Err(Error::validation("train and test shapes differ"));
    }
    if let Some(noise) = &config.noise {
        prepared.train = inject_noise(&prepared.train, noise)?;
    }
    Ok(prepared)
}

/// One row of the iteration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub accuracy: f64,
    pub noisy_count: Option<usize>,
    pub noise_prop: Option<f64>,
    pub det_precision: Option<f64>,
    pub det_recall: Option<f64>,
    pub detected: Option<usize>,
    pub relabel_counts: Option<RelabelCounts>,
    pub relabel_epoch: Option<usize>,
}

/// The `records.csv` projection of an [`IterationRecord`].
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub iteration: usize,
    pub accuracy: f64,
    pub noisy_count: Option<usize>,
    pub noise_prop: Option<f64>,
    pub det_precision: Option<f64>,
    pub det_recall: Option<f64>,
    pub relabel_epoch: Option<usize>,
}

impl IterationRecord {
    pub fn row(&self) -> RecordRow {
        RecordRow {
            iteration: self.iteration,
            accuracy: self.accuracy,
            noisy_count: self.noisy_count,
            noise_prop: self.noise_prop,
            det_precision: self.det_precision,
            det_recall: self.det_recall,
            relabel_epoch: self.relabel_epoch,
        }
    }
}

pub const RECORDS_HEADER: &str = "iter,acc,noisy_count,noise_prop,det_precision,det_recall,relabel_epoch";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

pub fn records_to_csv(records: &[IterationRecord]) -> String {
    let mut out = format!("{RECORDS_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration,
            r.accuracy,
            opt(r.noisy_count),
            opt(r.noise_prop),
            opt(r.det_precision),
            opt(r.det_recall),
            opt(r.relabel_epoch)
        ));
    }
    out
}

pub fn parse_records_csv(text: &str) -> Result<Vec<RecordRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RECORDS_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected records header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 7 fields, got {}", fields.len()),
                });
            }
            fn parse<T: std::str::FromStr>(s: &str, line: usize) -> Result<T>
            where
                T::Err: std::fmt::Display,
            {
                s.parse().map_err(|e: T::Err| Error::Parse {
                    line,
                    message: format!("`{s}`: {e}"),
                })
            }
            fn maybe<T: std::str::FromStr>(s: &str, line: usize) -> Result<Option<T>>
            where
                T::Err: std::fmt::Display,
            {
                if s == "-" {
                    Ok(None)
                } else {
                    parse(s, line).map(Some)
                }
            }
            Ok(RecordRow {
                iteration: parse(fields[0], line_no)?,
                accuracy: parse(fields[1], line_no)?,
                noisy_count: maybe(fields[2], line_no)?,
                noise_prop: maybe(fields[3], line_no)?,
                det_precision: maybe(fields[4], line_no)?,
                det_recall: maybe(fields[5], line_no)?,
                relabel_epoch: maybe(fields[6], line_no)?,
            })
        })
        .collect()
}

/// Clean/noisy histogram of confidence scores over equal-width bins on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub bins: usize,
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
}

impl ScoreHistogram {
    pub fn build(confidence: &[f64], noisy: &[bool], bins: usize) -> Self {
        let mut h = ScoreHistogram {
            bins,
            clean: vec![0; bins],
            noisy: vec![0; bins],
        };
        for (&s, &is_noisy) in confidence.iter().zip(noisy) {
            let b = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            if is_noisy {
                h.noisy[b] += 1;
            } else {
                h.clean[b] += 1;
            }
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,clean,noisy\n");
        for b in 0..self.bins {
            out.push_str(&format!(
                "{},{},{},{}\n",
                b as f64 / self.bins as f64,
                (b + 1) as f64 / self.bins as f64,
                self.clean[b],
                self.noisy[b]
            ));
        }
        out
    }
}

/// Everything one iteration produced.
#[derive(Debug, Clone)]
pub struct IterationArtifacts {
    pub record: IterationRecord,
    pub scores: ScoreVector,
    /// Per-epoch scalars; snapshots and per-epoch scores are dropped.
    pub traces: Vec<EpochTrace>,
    pub detection: Option<DetectionSet>,
    pub metrics: Option<DetectionMetrics>,
    pub fit: Option<BetaMixtureFit>,
    pub epoch_choice: Option<RelabelEpochChoice>,
    pub outcome: Option<RelabelOutcome>,
    pub histogram: Option<ScoreHistogram>,
    /// Noisy fraction in the top-p set of every epoch (top-fraction rule only).
    pub ratio_curve: Option<Vec<f64>>,
    pub members: Vec<TrainedMember>,
}

/// Scores mapped into `[0, 1]` confidence for mixture fitting. BALD is
/// normalized by `ln C` first.
pub fn confidence_scores(scores: &ScoreVector, classes: usize) -> ScoreVector {
    if scores.statistic == Statistic::Bald.name() {
        let scale = (classes as f64).ln();
        let normalized = ScoreVector {
            scores: scores.scores.iter().map(|s| (s / scale).min(1.0)).collect(),
            ..scores.clone()
        };
        return to_confidence(&normalized);
    }
    to_confidence(scores)
}

fn detect(
    config: &PipelineConfig,
    scores: &ScoreVector,
    fit: Option<&BetaMixtureFit>,
    classes: usize,
) -> Result<DetectionSet> {
    match config.detection {
        DetectionRule::TopFraction(p) => detect_top_fraction(&to_uncertainty(scores), p),
        rule => {
            let fit = fit.ok_or_else(|| Error::validation("mixture rule needs a fit"))?;
            detect_by_mixture(&confidence_scores(scores, classes), fit, rule)
        }
    }
}

fn gold_for(dataset: &Dataset, ids: &[usize]) -> Result<GoldSubset> {
    let truth = dataset.require_truth()?;
    Ok(GoldSubset {
        ids: ids.to_vec(),
        given_labels: ids.iter().map(|&i| dataset.given_labels()[i]).collect(),
        true_labels: ids.iter().map(|&i| truth[i]).collect(),
    })
}

/// Runs iteration `index` (0-based) and returns the relabeled training set.
pub fn run_iteration(
    train: &Dataset,
    test: &Dataset,
    config: &PipelineConfig,
    index: usize,
    gold_ids: Option<&[usize]>,
) -> Result<(Dataset, IterationArtifacts)> {
    let iter_seed = iteration_seed(config.seed, index);
    let classes = train.num_classes();
    let model = config.model.model_config(train.dim(), classes, iter_seed);
    let gold = gold_ids.map(|ids| gold_for(train, ids)).transpose()?;

    let trace_options = TraceOptions {
        passes: config.passes,
        seed: seed::derive(iter_seed, stream::TRACE, 0),
        gold: gold.as_ref(),
        statistic: train.true_labels().map(|_| config.statistic),
        snapshot_stride: config.snapshot_stride,
    };
    let run = train_ensemble(train, &model, config.members, Some(&trace_options))?;

    let tensor = predict_ensemble(
        &run.members,
        train.features().view(),
        config.passes,
        seed::derive(iter_seed, stream::SCORE, 0),
    )?;
    let scores = config.statistic.compute(&tensor)?;
    let confidence = confidence_scores(&scores, classes);
    let fit = match fit_beta_mixture(&confidence, &config.em) {
        Ok(fit) => Some(fit),
        Err(e) if matches!(config.detection, DetectionRule::TopFraction(_)) => {
            let _ = e;
            None
        }
        Err(e) => return Err(e),
    };

    let noisy_mask = train.noisy_mask().ok();
    let noisy_count = noisy_mask.as_ref().map(|m| m.iter().filter(|&&b| b).count());
    let histogram = noisy_mask
        .as_ref()
        .map(|m| ScoreHistogram::build(&confidence.scores, m, 20));
    let ratio_curve = match (&noisy_mask, config.detection) {
        (Some(mask), DetectionRule::TopFraction(p)) => {
            let epoch_scores: Vec<ScoreVector> = run
                .traces
                .iter()
                .filter_map(|t| t.scores.as_ref().map(to_uncertainty))
                .collect();
            Some(noise_ratio_curve(&epoch_scores, mask, p)?)
        }
        _ => None,
    };

    let accuracy = ensemble_accuracy(
        &run.members,
        test,
        test.true_labels().unwrap_or(test.given_labels()),
    );

    let is_last = index + 1 == config.iterations;
    let mut next = train.clone();
    let (mut detection, mut metrics, mut epoch_choice, mut outcome) = (None, None, None, None);
    if !is_last || config.final_detection {
        let det = detect(config, &scores, fit.as_ref(), classes)?;
        metrics = detection_metrics(&det, train).ok();
        let out = match config.relabel {
            RelabelMode::Oracle => relabel_oracle(train, &det)?,
            RelabelMode::Predicted => {
                let choice = select_relabel_epoch(&run.traces, &config.epoch_method)?;
                let out = relabel_predicted(train, &det, &run.traces, choice.epoch)?;
                epoch_choice = Some(choice);
                out
            }
        };
        next = out.apply(train)?;
        if let (Some(before), Some(counts)) = (noisy_count, out.counts) {
            let after = next.noisy_count()?;
            if after + counts.correctly_relabeled != before + counts.newly_corrupted {
                return Err(Error::validation(format!(
                    "relabel bookkeeping broken: {before} - {} + {} != {after}",
                    counts.correctly_relabeled, counts.newly_corrupted
                )));
            }
        }
        detection = Some(det);
        outcome = Some(out);
    }

    let record = IterationRecord {
        iteration: index + 1,
        accuracy,
        noisy_count,
        noise_prop: noisy_count.map(|c| c as f64 / train.len() as f64),
        det_precision: metrics.map(|m| m.precision),
        det_recall: metrics.map(|m| m.recall),
        detected: detection.as_ref().map(|d| d.len()),
        relabel_counts: outcome.as_ref().and_then(|o| o.counts),
        relabel_epoch: epoch_choice.as_ref().map(|c| c.epoch),
    };
    let traces = run
        .traces
        .into_iter()
        .map(|t| EpochTrace {
            mean_softmax: None,
            scores: None,
            ..t
        })
        .collect();
    Ok((
        next,
        IterationArtifacts {
            record,
            scores,
            traces,
            detection,
            metrics,
            fit,
            epoch_choice,
            outcome,
            histogram,
            ratio_curve,
            members: run.members,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct Report {
    pub config: PipelineConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub iterations: Vec<IterationArtifacts>,
    /// Set when an iteration failed; the report then holds the completed ones.
    pub failure: Option<String>,
}

impl Report {
    pub fn records(&self) -> Vec<IterationRecord> {
        self.iterations.iter().map(|a| a.record.clone()).collect()
    }
}

/// Runs all configured iterations, each consuming the previous relabeled set.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Report> {
    config.validate()?;
    let data = prepare_data(config)?;
    run_prepared(config, data)
}

pub fn run_prepared(config: &PipelineConfig, data: PreparedData) -> Result<Report> {
    config.validate()?;
    if data.train_rows.iter().any(|r| data.test_rows.contains(r)) {
        return Err(Error::validation("train and test rows overlap"));
    }
    let mut current = data.train;
    let test = data.test;
    let mut report = Report {
        config: config.clone(),
        train_size: current.len(),
        test_size: test.len(),
        iterations: Vec::new(),
        failure: None,
    };
    let draw_gold = |dataset: &Dataset, index: u64| -> Result<Vec<usize>> {
        let size = config.gold_size.unwrap_or(0);
        Ok(draw_gold_subset(dataset, size, seed::derive(config.seed, stream::GOLD, index))?.ids)
    };
    let mut gold_ids = match config.gold_size {
        Some(_) => Some(draw_gold(&current, 0)?),
        None => None,
    };
    for index in 0..config.iterations {
        if config.gold_refresh && index > 0 && gold_ids.is_some() {
            gold_ids = Some(draw_gold(&current, index as u64)?);
        }
        match run_iteration(&current, &test, config, index, gold_ids.as_deref()) {
            Ok((next, artifacts)) => {
                current = next;
                report.iterations.push(artifacts);
            }
            Err(e) => {
                report.failure = Some(format!("iteration {}: {e}", index + 1));
                break;
            }
        }
    }
    Ok(report)
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a PipelineConfig,
    train_size: usize,
    test_size: usize,
    records: Vec<IterationRecord>,
    relabel_epochs: Vec<Option<&'a RelabelEpochChoice>>,
    failure: Option<&'a str>,
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `records.csv`, `summary.json` and the per-iteration
/// `scores_iter{i}.csv`, `trace_iter{i}.csv`, `mixturefit_iter{i}.json`,
/// `hist_iter{i}.csv`, `ratio_iter{i}.csv`, `detect_iter{i}.csv` and
/// `relabel_iter{i}.csv` files (1-based `i`, optional ones when available).
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir.join("records.csv"), records_to_csv(&report.records()))?;
    let summary = Summary {
        config: &report.config,
        train_size: report.train_size,
        test_size: report.test_size,
        records: report.records(),
        relabel_epochs: report
            .iterations
            .iter()
            .map(|a| a.epoch_choice.as_ref())
            .collect(),
        failure: report.failure.as_deref(),
    };
    write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    for a in &report.iterations {
        let i = a.record.iteration;
        write(dir.join(format!("scores_iter{i}.csv")), a.scores.to_csv())?;
        write(dir.join(format!("trace_iter{i}.csv")), traces_to_csv(&a.traces))?;
        if let Some(fit) = &a.fit {
            write(dir.join(format!("mixturefit_iter{i}.json")), fit.to_json())?;
        }
        if let Some(h) = &a.histogram {
            write(dir.join(format!("hist_iter{i}.csv")), h.to_csv())?;
        }
        if let Some(curve) = &a.ratio_curve {
            let mut out = String::from("epoch,noisy_fraction\n");
            for (t, v) in a.traces.iter().zip(curve) {
                out.push_str(&format!("{},{v}\n", t.epoch));
            }
            write(dir.join(format!("ratio_iter{i}.csv")), out)?;
        }
        if let Some(d) = &a.detection {
            write(dir.join(format!("detect_iter{i}.csv")), d.to_csv(&a.scores))?;
        }
        if let Some(o) = &a.outcome {
            write(dir.join(format!("relabel_iter{i}.csv")), o.to_csv())?;
        }
    }
    Ok(())
}

/// Renders a records file as an aligned text table.
pub fn render_table(rows: &[RecordRow]) -> String {
    let mut out = format!(
        "{:>5} {:>7} {:>8} {:>7} {:>9} {:>9} {:>7}\n",
        "iter", "acc", "#noisy", "prop", "det_prec", "det_rec", "epoch"
    );
    let f3 = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
    for r in rows {
        out.push_str(&format!(
            "{:>5} {:>7.3} {:>8} {:>7} {:>9} {:>9} {:>7}\n",
            r.iteration,
            r.accuracy,
            opt(r.noisy_count),
            f3(r.noise_prop),
            f3(r.det_precision),
            f3(r.det_recall),
            opt(r.relabel_epoch)
        ));
    }
    out
}

/// Confidence orientation check used by report consumers.
pub fn is_confidence(scores: &ScoreVector) -> bool {
    scores.orientation == Orientation::ConfidenceHigherIsCleaner
}
