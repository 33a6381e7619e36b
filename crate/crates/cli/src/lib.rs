//! Command implementations behind the `mdssl` binary.

pub mod config;
pub mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdssl_core::benchmark::{run_benchmark, BenchmarkConfig, BenchmarkReport};
use mdssl_core::data::{generate, read_corpus, read_corpus_spec, write_corpus, Corpus, CorpusSpec, Split};
use mdssl_core::encoder::EncoderParams;
use mdssl_core::eval::{
    build_trials, project_2d, projection_csv, report_from, score_trials, trials_csv, EvalConfig, EvalReport, TrialMode,
};
use mdssl_core::trainer::{run_with, Preset, TrainConfig, TrainLog, TrainObserver};
use mdssl_core::{Error, Result};

use crate::config::{parse_over_default, parse_strict, read_input, to_toml};
use crate::manifest::{now_unix, RunManifest};

pub const OUT_DIR_ENV: &str = "MDSSL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "mdssl", version, about = "Multi-domain self-supervised adaptation on a synthetic speaker benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus file.
    Generate(GenerateArgs),
    /// Adapt an encoder on a corpus's dev split.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus's eval split.
    Eval(EvalArgs),
    /// Train and evaluate every preset over several seeds.
    Benchmark(BenchmarkArgs),
    /// Print a default config as TOML.
    Defaults {
        #[arg(value_enum)]
        which: DefaultsKind,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DefaultsKind {
    Corpus,
    Train,
    Eval,
    Benchmark,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Complete corpus spec in TOML; the built-in default if omitted.
    #[arg(long, conflicts_with = "from_header")]
    pub spec: Option<PathBuf>,
    /// Regenerate from the header of an existing corpus file.
    #[arg(long)]
    pub from_header: Option<PathBuf>,
    /// Override the corpus spec's generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Partial TrainConfig in TOML; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub bank_capacity: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "mdssl_out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "pooled")]
    pub mode: ModeArg,
    /// Partial EvalConfig in TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "mdssl_out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Pooled,
    Matrix,
}

impl From<ModeArg> for TrialMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pooled => TrialMode::Pooled,
            ModeArg::Matrix => TrialMode::Matrix,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Corpus file; the default synthetic benchmark if omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Partial BenchmarkConfig in TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use seeds 1..=N.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "mdssl_out")]
    pub out_dir: PathBuf,
}

/// Exit status for a failed command: 2 for usage and config problems, 3 for
/// runtime and numeric failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_usage() {
        2
    } else {
        3
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Benchmark(a) => {
            let report = cmd_benchmark(&a)?;
            print!("{}", format_ladder(&report));
            Ok(())
        }
        Command::Defaults { which } => {
            let text = match which {
                DefaultsKind::Corpus => to_toml(&CorpusSpec::default())?,
                DefaultsKind::Train => to_toml(&TrainConfig::default())?,
                DefaultsKind::Eval => to_toml(&EvalConfig::default())?,
                DefaultsKind::Benchmark => to_toml(&BenchmarkConfig::default())?,
            };
            print!("{text}");
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text)?;
    Ok(path.to_path_buf())
}

fn load_corpus(path: &Path) -> Result<(Corpus, String)> {
    let text = read_input(path)?;
    Ok((read_corpus(&text)?, text))
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<PathBuf> {
    let mut spec = match (&a.spec, &a.from_header) {
        (Some(p), _) => parse_strict::<CorpusSpec>(&read_input(p)?, "corpus spec")?,
        (None, Some(p)) => {
            let text = read_input(p)?;
            read_corpus_spec(text.lines().next().unwrap_or(""))?
        }
        (None, None) => CorpusSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.rng_seed = seed;
    }
    spec.validate()?;
    let corpus = generate(&spec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&a.out, &write_corpus(&corpus))
}

/// Resolves the effective TrainConfig: defaults, then the config file, then
/// the preset, then individual flags.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => parse_over_default::<TrainConfig>(&read_input(p)?, "train config")?,
        None => TrainConfig::default(),
    };
    if let Some(p) = a.preset {
        cfg = cfg.with_preset(p);
    }
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.steps, cfg.steps);
    set!(a.lr, cfg.learning_rate);
    set!(a.momentum, cfg.momentum);
    set!(a.seed, cfg.rng_seed);
    set!(a.batch_size, cfg.batch.batch_size);
    set!(a.bank_capacity, cfg.bank_capacity);
    set!(a.tau, cfg.loss.tau);
    set!(a.lambda, cfg.loss.lambda);
    set!(a.checkpoint_every, cfg.checkpoint_every);
    set!(a.eval_every, cfg.eval_every);
    cfg.validate()?;
    Ok(cfg)
}

struct CliObserver<'a> {
    dir: PathBuf,
    eval_utts: Vec<mdssl_core::data::Utterance>,
    eval_cfg: EvalConfig,
    checkpoints: &'a mut Vec<PathBuf>,
    interim: String,
}

impl TrainObserver for CliObserver<'_> {
    fn on_checkpoint(&mut self, step: usize, params: &EncoderParams) -> Result<()> {
        let path = self.dir.join(format!("checkpoint_step{step:06}.txt"));
        self.checkpoints.push(write_file(&path, &params.to_checkpoint_string())?);
        Ok(())
    }

    fn on_eval(&mut self, step: usize, params: &EncoderParams) -> Result<()> {
        let r = mdssl_core::eval::evaluate(params, &self.eval_utts, &self.eval_cfg, TrialMode::Pooled)?;
        let _ = writeln!(self.interim, "{step},{:.6},{:.6}", r.eer_percent, r.min_dcf);
        Ok(())
    }
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub manifest: PathBuf,
    pub train_log: TrainLog,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutputs> {
    let started = now_unix();
    let cfg = train_config(a)?;
    let (corpus, text) = load_corpus(&a.corpus)?;
    create_dir(&a.out_dir)?;
    let mut checkpoints = Vec::new();
    let mut observer = CliObserver {
        dir: a.out_dir.clone(),
        eval_utts: corpus.utterances_in(Split::Eval),
        eval_cfg: EvalConfig::default(),
        checkpoints: &mut checkpoints,
        interim: String::from("step,eer_percent,min_dcf\n"),
    };
    let (params, train_log) = run_with(&cfg, &corpus, &mut observer)?;
    let interim = std::mem::take(&mut observer.interim);
    let checkpoint = write_file(&a.out_dir.join("checkpoint.txt"), &params.to_checkpoint_string())?;
    let log = write_file(&a.out_dir.join("train_log.csv"), &train_log.to_csv())?;
    let mut manifest = RunManifest::new("train", json(&cfg), started).with_corpus(&a.corpus, &text);
    manifest.seed = Some(cfg.rng_seed);
    manifest.checkpoints = checkpoints;
    manifest.checkpoints.push(checkpoint.clone());
    manifest.metric_files.push(log.clone());
    if cfg.eval_every > 0 {
        manifest.metric_files.push(write_file(&a.out_dir.join("interim_eval.csv"), &interim)?);
    }
    let manifest = manifest.write(&a.out_dir)?;
    Ok(TrainOutputs { checkpoint, log, manifest, train_log })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let started = now_unix();
    let eval_cfg = match &a.config {
        Some(p) => parse_over_default::<EvalConfig>(&read_input(p)?, "eval config")?,
        None => EvalConfig::default(),
    };
    eval_cfg.validate()?;
    let params = EncoderParams::from_checkpoint_str(&read_input(&a.checkpoint)?)?;
    let (corpus, text) = load_corpus(&a.corpus)?;
    let mode = TrialMode::from(a.mode);
    let eval_utts = corpus.utterances_in(Split::Eval);
    let plan = build_trials(&eval_utts, &eval_cfg, mode)?;
    let scored = score_trials(&plan, &params)?;
    let report = report_from(&plan, &scored, &eval_cfg, mode)?;

    create_dir(&a.out)?;
    let mut files = vec![
        write_file(&a.out.join("metrics.csv"), &report.metrics_csv())?,
        write_file(&a.out.join("trials.csv"), &trials_csv(&plan, &scored))?,
    ];
    let summary = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
    files.push(write_file(&a.out.join("summary.json"), &(summary + "\n"))?);
    if let Some(m) = &report.matrix {
        let names: Vec<String> = m.domains.iter().map(|&g| corpus.domain_names[g].clone()).collect();
        files.push(write_file(&a.out.join("matrix.csv"), &m.to_csv(&names))?);
    }
    let speakers: Vec<usize> = plan.tests.iter().map(|u| u.speaker_id).collect();
    let domains: Vec<usize> = plan.tests.iter().map(|u| u.domain_id).collect();
    let points = project_2d(&scored.test_embeddings, &speakers, &domains)?;
    files.push(write_file(&a.out.join("projection.csv"), &projection_csv(&points))?);

    let mut manifest = RunManifest::new("eval", json(&eval_cfg), started).with_corpus(&a.corpus, &text);
    manifest.checkpoints.push(a.checkpoint.clone());
    manifest.metric_files = files;
    manifest.write(&a.out)?;
    Ok(report)
}

pub fn benchmark_config(a: &BenchmarkArgs) -> Result<BenchmarkConfig> {
    let mut cfg = match &a.config {
        Some(p) => parse_over_default::<BenchmarkConfig>(&read_input(p)?, "benchmark config")?,
        None => BenchmarkConfig::default(),
    };
    if let Some(n) = a.seeds {
        cfg.seeds = (1..=n).collect();
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_benchmark(a: &BenchmarkArgs) -> Result<BenchmarkReport> {
    let started = now_unix();
    let cfg = benchmark_config(a)?;
    let (corpus, text, path) = match &a.corpus {
        Some(p) => {
            let (c, t) = load_corpus(p)?;
            (c, t, Some(p.clone()))
        }
        None => {
            let c = generate(&CorpusSpec::default())?;
            let t = mdssl_core::data::corpus_header_line(&c);
            (c, t, None)
        }
    };
    let report = run_benchmark(&cfg, &corpus)?;
    create_dir(&a.out_dir)?;
    let json_text = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
    let files = vec![
        write_file(&a.out_dir.join("benchmark_runs.csv"), &report.runs_csv())?,
        write_file(&a.out_dir.join("benchmark_summary.csv"), &report.summary_csv())?,
        write_file(&a.out_dir.join("benchmark.json"), &(json_text + "\n"))?,
    ];
    let mut manifest = RunManifest::new("benchmark", json(&cfg), started);
    if let Some(p) = &path {
        manifest = manifest.with_corpus(p, &text);
    } else {
        manifest.corpus_header_sha256 = Some(manifest::sha256_hex(text.as_bytes()));
    }
    manifest.metric_files = files;
    manifest.write(&a.out_dir)?;
    Ok(report)
}

/// Human-readable ladder table.
pub fn format_ladder(report: &BenchmarkReport) -> String {
    let mut out = format!("{:<12} {:>10} {:>10} {:>10}\n", "preset", "median_eer", "min_dcf", "mean_eer");
    for s in &report.summary {
        let _ = writeln!(
            out,
            "{:<12} {:>9.3}% {:>10.4} {:>9.3}%",
            s.preset.name(),
            s.median_eer_percent,
            s.median_min_dcf,
            s.mean_eer_percent
        );
    }
    if let Some(r) = report.relative_improvement {
        let _ = writeln!(out, "relative EER improvement full_md vs ssl_sd: {:.2}%", 100.0 * r);
    }
    out
}
