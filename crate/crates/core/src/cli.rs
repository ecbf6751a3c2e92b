//! Command-line front end: `synth`, `score`, `distill`, `aggregate`, `eval`
//! and `bench`.
//!
//! `--config FILE` reads `key=value` lines (blank lines and `#` comments are
//! skipped) and splices them in as `--key value` before the explicit flags,
//! which therefore win. Every failure surfaces as a single line
//! `error[<stage>]: <message>`.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::aggregator::{read_groups_csv, represent_corpus, write_groups_csv, AggregationPolicy, Strategy, DEFAULT_THRESHOLD};
use crate::data::{load_corpus, load_scores, save_corpus, save_scores, Corpus, CorpusFormat};
use crate::distiller::{load_model, save_model, train, Activation, RegressorConfig};
use crate::engine::score_corpus;
use crate::error::DdlError;
use crate::eval::{
    compare_strategies, evaluate, format_comparison_table, group_labels, write_comparison_csv,
    write_report_csv, IdentificationSplit, PairList, Protocol,
};
use crate::synth::{generate, save_ground_truth, split_holdout, SynthConfig};

const DEFAULT_FAR_LEVELS: &str = "0.001,0.01,0.1";

#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub error: DdlError,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.error.to_string().replace('\n', " ");
        write!(f, "error[{}]: {}", self.stage, msg.trim())
    }
}

impl std::error::Error for CliError {}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Stage<T> for crate::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|error| CliError { stage, error })
    }
}

#[derive(Debug, Parser)]
#[command(name = "ddl", version, about = "Discriminability distillation for group representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with train/test splits and verification pairs.
    Synth(SynthArgs),
    /// Compute D-scores for every element of a labeled corpus.
    Score(ScoreArgs),
    /// Train the score regressor on raw inputs.
    Distill(DistillArgs),
    /// Pool each group into one feature.
    Aggregate(AggregateArgs),
    /// Evaluate pooled group features.
    Eval(EvalArgs),
    /// Compare average, top1, ddl_no_rescale and ddl on one corpus.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub k_classes: usize,
    #[arg(long, default_value_t = 200)]
    pub elements_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub groups_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub d_emb: usize,
    /// Defaults to `d_emb`.
    #[arg(long)]
    pub d_raw: Option<usize>,
    #[arg(long, default_value_t = 2.5)]
    pub centroid_scale: f64,
    #[arg(long, default_value_t = 0.2)]
    pub shared_weight: f64,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "0.1,2.0")]
    pub noise_levels: Vec<f64>,
    #[arg(long, default_value_t = 0.4)]
    pub corruption_prob: f64,
    /// Share of each class' groups written to the test split.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ScoreArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Accepted for a uniform interface; scoring draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct DistillArgs {
    /// Training corpus.
    #[arg(long)]
    pub input: PathBuf,
    /// Score CSV covering every training element.
    #[arg(long)]
    pub scores: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Loss trace CSV; defaults to the model path with a `.report.csv` suffix.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "64,32")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value = "relu")]
    pub activation: String,
    #[arg(long, default_value_t = 1.0)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct AggregateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "ddl")]
    pub strategy: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Group CSV from `aggregate`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for `report.csv` and `roc.csv`.
    #[arg(long)]
    pub output: PathBuf,
    /// Verification pairs; defaults to all pairs derived from `--corpus`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Labeled corpus the groups came from; enables identification metrics.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = DEFAULT_FAR_LEVELS)]
    pub far_levels: Vec<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    /// Labeled evaluation corpus.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Restrict to these strategies; all four by default.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub strategy: Vec<String>,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = DEFAULT_FAR_LEVELS)]
    pub far_levels: Vec<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Turns `key=value` lines into `--key value` arguments.
pub fn config_args(text: &str) -> crate::Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| DdlError::Parse {
            line: i as u64 + 1,
            message: format!("expected key=value, found {line:?}"),
        })?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(DdlError::Parse {
                line: i as u64 + 1,
                message: format!("invalid key {key:?}"),
            });
        }
        out.push(format!("--{key}"));
        out.push(value.trim().to_string());
    }
    Ok(out)
}

/// Inserts config-file arguments right after the subcommand name.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, CliError> {
    let path = args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(DdlError::from)
        .stage("config")?;
    let extra = config_args(&text).stage("config")?;
    let Some(sub) = args.iter().skip(1).position(|a| !a.starts_with('-')) else {
        return Ok(args);
    };
    let at = sub + 2;
    let mut out = args[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

/// Parses and runs one command. `args[0]` is the program name.
pub fn run<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args = expand_config(args.into_iter().map(Into::into).collect())?;
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            return Err(CliError {
                stage: "args",
                error: DdlError::Config(msg.to_string()),
            });
        }
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).stage("synth"),
        Command::Score(a) => cmd_score(&a).stage("score"),
        Command::Distill(a) => cmd_distill(&a).stage("distill"),
        Command::Aggregate(a) => cmd_aggregate(&a).stage("aggregate"),
        Command::Eval(a) => cmd_eval(&a).stage("eval"),
        Command::Bench(a) => cmd_bench(&a).stage("bench"),
    }
}

/// Runs the tool and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

fn load<T: crate::Scalar>(path: &Path) -> crate::Result<Corpus<T>> {
    load_corpus(path, CorpusFormat::from_path(path))
}

fn save<T: crate::Scalar>(corpus: &Corpus<T>, path: &Path) -> crate::Result<()> {
    save_corpus(corpus, path, CorpusFormat::from_path(path))
}

fn create(path: &Path) -> crate::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_pairs(pairs: &PairList, path: &Path) -> crate::Result<()> {
    let mut w = create(path)?;
    pairs.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_pairs(path: &Path) -> crate::Result<PairList> {
    PairList::read_csv(BufReader::new(File::open(path)?))
}

pub fn cmd_synth(a: &SynthArgs) -> crate::Result<()> {
    let config = SynthConfig {
        k_classes: a.k_classes,
        elements_per_class: a.elements_per_class,
        groups_per_class: a.groups_per_class,
        d_emb: a.d_emb,
        d_raw: a.d_raw.unwrap_or(a.d_emb),
        centroid_scale: a.centroid_scale,
        shared_weight: a.shared_weight,
        noise_levels: a.noise_levels.clone(),
        corruption_prob: a.corruption_prob,
        seed: a.seed,
    };
    let (corpus, levels) = generate::<f64>(&config)?;
    let (train_split, test_split) = split_holdout(&corpus, a.holdout)?;
    fs::create_dir_all(&a.output)?;
    save(&corpus, &a.output.join("corpus.csv"))?;
    save(&train_split, &a.output.join("train.csv"))?;
    save(&test_split, &a.output.join("test.csv"))?;
    save_ground_truth(&corpus, &levels, a.output.join("ground_truth.csv"))?;
    let pairs = PairList::all_pairs(&group_labels(&test_split)?);
    write_pairs(&pairs, &a.output.join("pairs.csv"))?;
    log::info!(
        "wrote {} elements ({} train, {} test) and {} pairs",
        corpus.len(),
        train_split.len(),
        test_split.len(),
        pairs.pairs.len()
    );
    Ok(())
}

pub fn cmd_score(a: &ScoreArgs) -> crate::Result<()> {
    let corpus = load::<f64>(&a.input)?;
    let scores = score_corpus(&corpus)?;
    save_scores(&scores, &a.output)
}

pub fn cmd_distill(a: &DistillArgs) -> crate::Result<()> {
    let corpus = load::<f64>(&a.input)?;
    let scores = load_scores::<f64>(&a.scores)?;
    let mut layer_sizes = vec![corpus.d_raw()];
    layer_sizes.extend(&a.hidden);
    layer_sizes.push(1);
    let config = RegressorConfig {
        layer_sizes,
        hidden_activation: a.activation.parse::<Activation>()?,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        weight_init_scale: a.init_scale,
    };
    config.validate()?;
    let (model, report) = train(&corpus, &scores, config)?;
    save_model(&model, &a.output)?;
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut name = a.output.as_os_str().to_owned();
        name.push(".report.csv");
        PathBuf::from(name)
    });
    let mut w = create(&report_path)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_aggregate(a: &AggregateArgs) -> crate::Result<()> {
    let policy = AggregationPolicy::new(a.strategy.parse::<Strategy>()?).with_threshold(a.threshold);
    policy.validate()?;
    let corpus = load::<f64>(&a.input)?;
    let model = load_model::<f64>(&a.model)?;
    let groups = represent_corpus(&corpus, &model, &policy)?;
    let mut w = create(&a.output)?;
    write_groups_csv(&groups, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> crate::Result<()> {
    let groups = read_groups_csv::<f64, _>(BufReader::new(File::open(&a.input)?))?;
    let labels = match &a.corpus {
        Some(path) => Some(group_labels(&load::<f64>(path)?)?),
        None => None,
    };
    let pairs = match (&a.pairs, &labels) {
        (Some(path), _) => read_pairs(path)?,
        (None, Some(labels)) => PairList::all_pairs(labels),
        (None, None) => {
            return Err(DdlError::Config("eval needs --pairs or --corpus".into()));
        }
    };
    let split = match labels {
        Some(labels) => {
            let by_id: std::collections::HashMap<&str, usize> =
                labels.iter().map(|(g, l)| (g.as_str(), *l)).collect();
            let ls = groups
                .iter()
                .map(|g| {
                    by_id.get(g.group_id.as_str()).copied().ok_or_else(|| {
                        DdlError::Protocol(format!("group {} is not in the corpus", g.group_id))
                    })
                })
                .collect::<crate::Result<Vec<usize>>>()?;
            Some(IdentificationSplit::first_group_as_query(&ls))
        }
        None => None,
    };
    let report = evaluate(&groups, &pairs, &a.far_levels, split.as_ref())?;
    fs::create_dir_all(&a.output)?;
    let mut w = create(&a.output.join("report.csv"))?;
    write_report_csv(&report, &mut w)?;
    w.flush()?;
    let mut w = create(&a.output.join("roc.csv"))?;
    report.write_roc_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> crate::Result<()> {
    let strategies: Vec<Strategy> = if a.strategy.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        a.strategy
            .iter()
            .map(|s| s.parse())
            .collect::<crate::Result<_>>()?
    };
    let policies: Vec<AggregationPolicy> = strategies
        .iter()
        .map(|&s| AggregationPolicy::new(s).with_threshold(a.threshold))
        .collect();
    for p in &policies {
        p.validate()?;
    }
    let corpus = load::<f64>(&a.input)?;
    let model = load_model::<f64>(&a.model)?;
    let protocol = Protocol {
        far_levels: a.far_levels.clone(),
        pairs: a.pairs.as_deref().map(read_pairs).transpose()?,
        identification: true,
    };
    let rows = compare_strategies(&corpus, &model, &policies, &protocol)?;
    fs::create_dir_all(&a.output)?;
    let mut w = create(&a.output.join("comparison.csv"))?;
    write_comparison_csv(&rows, &mut w)?;
    w.flush()?;
    let table = format_comparison_table(&rows);
    fs::write(a.output.join("comparison.txt"), &table)?;
    for row in &rows {
        let mut w = create(&a.output.join(format!("roc_{}.csv", row.policy.strategy.name())))?;
        row.report.write_roc_csv(&mut w)?;
        w.flush()?;
    }
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines_become_flags() {
        let args = config_args("# comment\n\nseed = 7\nfar_levels=0.1,0.2\n").unwrap();
        assert_eq!(args, ["--seed", "7", "--far-levels", "0.1,0.2"]);
        assert!(config_args("seed 7").is_err());
    }

    #[test]
    fn explicit_flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "threshold=0.4\nstrategy=top1\n").unwrap();
        let args = vec![
            "ddl".to_string(),
            "aggregate".into(),
            "--config".into(),
            cfg.display().to_string(),
            "--input".into(),
            "x.csv".into(),
            "--model".into(),
            "m.bin".into(),
            "--output".into(),
            "g.csv".into(),
            "--threshold".into(),
            "0.2".into(),
        ];
        let cli = Cli::try_parse_from(expand_config(args).unwrap()).unwrap();
        let Command::Aggregate(a) = cli.command else { panic!("wrong command") };
        assert_eq!(a.threshold, 0.2);
        assert_eq!(a.strategy, "top1");
    }

    #[test]
    fn threshold_defaults_to_fifteen_hundredths() {
        let cli = Cli::try_parse_from(["ddl", "aggregate", "--input", "a", "--model", "b", "--output", "c"]).unwrap();
        let Command::Aggregate(a) = cli.command else { panic!("wrong command") };
        assert_eq!(a.threshold, 0.15);
    }

    #[test]
    fn unknown_flags_are_one_line_errors() {
        let err = run(["ddl", "score", "--input", "a", "--output", "b", "--bogus", "1"]).unwrap_err();
        let line = err.to_string();
        assert!(line.starts_with("error[args]: "));
        assert!(!line.contains('\n'));
    }

    #[test]
    fn unknown_config_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        fs::write(&cfg, "colour=blue\n").unwrap();
        let cfg = cfg.display().to_string();
        let err = run(["ddl", "score", "--config", cfg.as_str(), "--input", "a", "--output", "b"]).unwrap_err();
        assert_eq!(err.stage, "args");
    }
}
