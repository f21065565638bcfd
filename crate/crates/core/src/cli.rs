//! The `labelsift` command line.
//!
//! Every stage reads and writes files, so a full `run` can be replayed one
//! stage at a time. Stage seeds line up with the pipeline: `train` and
//! `score` given `--seed` equal to an iteration seed reproduce that
//! iteration's artifacts.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::data::{
    draw_gold_subset, inject_noise, load_dataset, make_blobs, save_dataset, BlobSpec, Dataset,
    FileFormat, NoisePattern, NoiseSpec,
};
use crate::detect::{detect_by_mixture, detect_top_fraction, DetectionRule, DetectionSet};
use crate::error::{Error, Result};
use crate::mixfit::{fit_beta_mixture, BetaMixtureFit};
use crate::nn::{
    load_member, load_traces, predict_ensemble, save_member, save_traces, traces_to_csv,
    train_ensemble, TraceOptions, TrainedMember,
};
use crate::pipeline::{
    confidence_scores, parse_records_csv, render_table, run_pipeline, write_report, DataSource,
    PipelineConfig, RelabelMode,
};
use crate::relabel::{relabel_oracle, relabel_predicted, select_relabel_epoch};
use crate::seed::{self, stream};
use crate::uncertainty::{to_uncertainty, ScoreVector, Statistic};

#[derive(Debug, Parser)]
#[command(name = "labelsift", version, about = "Detect and relabel noisy training labels")]
struct Cli {
    /// JSON pipeline config; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for this command's randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, `dotted.key=value` (value parsed as JSON when possible).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Suppress summary output on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic blobs dataset.
    Gen(GenArgs),
    /// Inject label noise into a dataset.
    Corrupt(CorruptArgs),
    /// Train an ensemble and record per-epoch traces.
    Train(TrainArgs),
    /// Score every image with an uncertainty statistic.
    Score(ScoreArgs),
    /// Fit a two-component beta mixture to scores.
    Fit(FitArgs),
    /// Select suspicious images.
    Detect(DetectArgs),
    /// Relabel detected images.
    Relabel(RelabelArgs),
    /// Run the full iterative pipeline.
    Run,
    /// Summarize a run directory or a dataset.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
}

#[derive(Debug, Args)]
struct CorruptArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    pattern: NoisePattern,
    #[arg(long)]
    rate: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    /// Gold subset size recorded in the traces.
    #[arg(long)]
    gold_size: Option<usize>,
    /// Seed the gold subset is drawn under (the pipeline uses the master seed).
    #[arg(long)]
    gold_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    input: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    statistic: Option<Statistic>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Class count, needed to normalize BALD scores.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RuleKind {
    Top,
    Posterior,
    Contamination,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    rule: Option<RuleKind>,
    /// Fraction, posterior cutoff or contamination target, depending on the rule.
    #[arg(long)]
    p: Option<f64>,
    /// Mixture fit from `fit`, required by mixture rules.
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Predicted,
    Oracle,
}

#[derive(Debug, Args)]
struct RelabelArgs {
    #[arg(long)]
    input: PathBuf,
    /// Detection CSV from `detect`.
    #[arg(long)]
    detect: PathBuf,
    #[arg(long)]
    mode: Option<ModeArg>,
    /// Training directory, required for predicted relabeling.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Per-image change log.
    #[arg(long)]
    changes: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory holding `records.csv`.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Dataset to summarize.
    #[arg(long)]
    input: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns 0 on success, 1 on usage errors and 2 on runtime errors.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult {
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let Value::Object(map) = node else {
            return usage(format!("override `{key}`: `{part}` is not inside an object"));
        };
        if parts.peek().is_none() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    usage(format!("empty override key `{key}`"))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Builds the config from defaults, then the config file, then `--set`
/// overrides in order.
fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("invalid JSON: {e}")))?;
        // Tagged enums are replaced wholesale so stale fields do not linger.
        if let Value::Object(map) = &file {
            for key in ["data", "detection", "epoch_method", "noise"] {
                if let (Some(v), Value::Object(b)) = (map.get(key), &mut value) {
                    b.insert(key.to_string(), v.clone());
                }
            }
        }
        merge(&mut value, file);
    }
    for o in overrides {
        let Some((key, raw)) = o.split_once('=') else {
            return usage(format!("override `{o}` is not KEY=VALUE"));
        };
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key.trim(), parsed)?;
    }
    let config: PipelineConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    Ok(config)
}

fn require_out(out: &Option<PathBuf>) -> CliResult<&Path> {
    match out {
        Some(p) => Ok(p.as_path()),
        None => usage("--out is required"),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path, FileFormat::from_path(path))
}

fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_dataset(dataset, path, FileFormat::from_path(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn member_path(dir: &Path, m: usize) -> PathBuf {
    dir.join(format!("member_{m}.lsnn"))
}

fn load_members(dir: &Path) -> Result<Vec<TrainedMember>> {
    let mut members = Vec::new();
    while member_path(dir, members.len()).exists() {
        members.push(load_member(&member_path(dir, members.len()))?);
    }
    if members.is_empty() {
        return Err(Error::format(dir, "no member_*.lsnn files"));
    }
    Ok(members)
}

fn execute(cli: Cli) -> CliResult {
    let config = load_config(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Gen(a) => {
            let mut spec = match config.data {
                DataSource::Blobs(spec) => spec,
                _ => BlobSpec {
                    n_per_class: 500,
                    num_classes: 10,
                    dim: 32,
                    separation: 6.0,
                    seed: 0,
                },
            };
            spec.n_per_class = a.n_per_class.unwrap_or(spec.n_per_class);
            spec.num_classes = a.classes.unwrap_or(spec.num_classes);
            spec.dim = a.dim.unwrap_or(spec.dim);
            spec.separation = a.separation.unwrap_or(spec.separation);
            spec.seed = cli.seed.unwrap_or(spec.seed);
            save(&make_blobs(&spec)?, require_out(&cli.out)?)?;
        }
        Command::Corrupt(a) => {
            let out = require_out(&cli.out)?;
            let spec = NoiseSpec {
                pattern: a.pattern,
                rate: a.rate,
                seed: cli.seed.unwrap_or(0),
            };
            save(&inject_noise(&load(&a.input)?, &spec)?, out)?;
        }
        Command::Train(a) => {
            let out = require_out(&cli.out)?;
            let dataset = load(&a.input)?;
            let seed = cli.seed.unwrap_or(0);
            let model = config
                .model
                .model_config(dataset.dim(), dataset.num_classes(), seed);
            let gold = match a.gold_size.or(config.gold_size) {
                Some(size) => {
                    let gold_seed = a.gold_seed.unwrap_or(config.seed);
                    Some(draw_gold_subset(
                        &dataset,
                        size,
                        seed::derive(gold_seed, stream::GOLD, 0),
                    )?)
                }
                None => None,
            };
            let options = TraceOptions {
                passes: config.passes,
                seed: seed::derive(seed, stream::TRACE, 0),
                gold: gold.as_ref(),
                statistic: dataset.true_labels().map(|_| config.statistic),
                snapshot_stride: config.snapshot_stride,
            };
            let run = train_ensemble(&dataset, &model, config.members, Some(&options))?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            for (m, member) in run.members.iter().enumerate() {
                save_member(member, &member_path(out, m))?;
            }
            save_traces(&run.traces, &out.join("traces.lstr"))?;
            write_file(&out.join("trace.csv"), traces_to_csv(&run.traces))?;
        }
        Command::Score(a) => {
            let out = require_out(&cli.out)?;
            let dataset = load(&a.input)?;
            let members = load_members(&a.model)?;
            let tensor = predict_ensemble(
                &members,
                dataset.features().view(),
                config.passes,
                seed::derive(cli.seed.unwrap_or(0), stream::SCORE, 0),
            )?;
            let scores = a.statistic.unwrap_or(config.statistic).compute(&tensor)?;
            write_file(out, scores.to_csv())?;
        }
        Command::Fit(a) => {
            let out = require_out(&cli.out)?;
            let scores = ScoreVector::load(&a.scores)?;
            let confidence = confidence_for(&scores, a.classes)?;
            write_file(out, fit_beta_mixture(&confidence, &config.em)?.to_json())?;
        }
        Command::Detect(a) => {
            let out = require_out(&cli.out)?;
            let scores = ScoreVector::load(&a.scores)?;
            let rule = match (a.rule, a.p) {
                (None, None) => config.detection,
                (Some(RuleKind::Top), Some(p)) => DetectionRule::TopFraction(p),
                (Some(RuleKind::Posterior), Some(p)) => DetectionRule::MixturePosterior(p),
                (Some(RuleKind::Contamination), Some(p)) => DetectionRule::MixtureContamination(p),
                _ => return usage("--rule and --p go together"),
            };
            let detection = match rule {
                DetectionRule::TopFraction(p) => detect_top_fraction(&to_uncertainty(&scores), p)?,
                rule => {
                    let Some(fit_path) = a.fit.as_deref() else {
                        return usage("mixture rules need --fit");
                    };
                    let fit = BetaMixtureFit::load(fit_path)?;
                    detect_by_mixture(&confidence_for(&scores, a.classes)?, &fit, rule)?
                }
            };
            write_file(out, detection.to_csv(&scores))?;
        }
        Command::Relabel(a) => {
            let out = require_out(&cli.out)?;
            let dataset = load(&a.input)?;
            let detection = DetectionSet::load(&a.detect, config.detection, "unknown")?;
            let mode = match a.mode {
                Some(ModeArg::Oracle) => RelabelMode::Oracle,
                Some(ModeArg::Predicted) => RelabelMode::Predicted,
                None => config.relabel,
            };
            let outcome = match mode {
                RelabelMode::Oracle => relabel_oracle(&dataset, &detection)?,
                RelabelMode::Predicted => {
                    let Some(model) = a.model.as_deref() else {
                        return usage("predicted relabeling needs --model");
                    };
                    let traces = load_traces(&model.join("traces.lstr"))?;
                    let choice = select_relabel_epoch(&traces, &config.epoch_method)?;
                    eprintln!("relabel epoch {}", choice.epoch);
                    relabel_predicted(&dataset, &detection, &traces, choice.epoch)?
                }
            };
            save(&outcome.apply(&dataset)?, out)?;
            if let Some(changes) = &a.changes {
                write_file(changes, outcome.to_csv())?;
            }
        }
        Command::Run => {
            let out = require_out(&cli.out)?;
            let mut config = config;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            config.validate()?;
            let report = run_pipeline(&config)?;
            write_report(&report, out)?;
            if !cli.quiet {
                print!("{}", render_table(&report.records().iter().map(|r| r.row()).collect::<Vec<_>>()));
            }
            if let Some(failure) = &report.failure {
                return Err(CliError::Runtime(Error::validation(failure.clone())));
            }
        }
        Command::Report(a) => match (a.dir, a.input) {
            (Some(dir), None) => {
                let path = dir.join("records.csv");
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let table = render_table(&parse_records_csv(&text)?);
                match &cli.out {
                    Some(out) => write_file(out, table)?,
                    None => print!("{table}"),
                }
            }
            (None, Some(input)) => {
                let dataset = load(&input)?;
                print!("{}", dataset_summary(&dataset));
            }
            _ => return usage("report takes exactly one of --dir or --input"),
        },
    }
    Ok(())
}

fn confidence_for(scores: &ScoreVector, classes: Option<usize>) -> CliResult<ScoreVector> {
    if scores.statistic == Statistic::Bald.name() && classes.is_none() {
        return usage("BALD scores need --classes");
    }
    Ok(confidence_scores(scores, classes.unwrap_or(2)))
}

/// `key value` lines describing a dataset and its noise.
pub fn dataset_summary(dataset: &Dataset) -> String {
    let mut out = format!(
        "images {}\ndim {}\nclasses {}\n",
        dataset.len(),
        dataset.dim(),
        dataset.num_classes()
    );
    if let Some(truth) = dataset.true_labels() {
        let c = dataset.num_classes();
        let given = dataset.given_labels();
        let noisy = given.iter().zip(truth).filter(|(g, t)| g != t).count();
        let shifted = given
            .iter()
            .zip(truth)
            .filter(|&(&g, &t)| g != t && g == (t + 1) % c)
            .count();
        out.push_str(&format!(
            "noisy_count {noisy}\nnoise_prop {}\nshifted_by_one {shifted}\n",
            noisy as f64 / dataset.len() as f64
        ));
    }
    out
}
