//! Command-line interface.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::acquisition::{extract_dataset, HttpBackend, LogitBackend, SamplingConfig};
use crate::app::config::FileConfig;
use crate::app::server::{serve, Moderator};
use crate::app::{
    baseline_series, check_fingerprint, evaluate_series, por_series, port_series, score_dump, toy_agreement,
    train_from_dump, write_eval_outputs, write_json, write_series_jsonl, TrainOptions,
};
use crate::error::{Error, Result};
use crate::ingest::{parse_baseline_scores, parse_prompts, read_logit_dump, write_prompts_jsonl, PromptFormat};
use crate::metrics::{calibrate_thresholds, default_profiles, MetricReport, DEFAULT_PROFILE};
use crate::synthetic::{backend_router, planted_dataset, PlantedConfig, PlantedLogitBackend};
use crate::toymodels::{PortBasis, RefusalLexicon, RefusalTokenSet};
use crate::trainer::{load_model, save_model, Regularizer, TrainConfig};
use crate::transform::TransformKind;

#[derive(Debug, Parser)]
#[command(name = "muli", version, about = "Toxic-prompt detection from first-token logits")]
pub struct Cli {
    /// TOML config file; flags and environment variables take precedence.
    #[arg(long, global = true, env = "MULI_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch first-token logits for a prompt file into a logit dump.
    Extract(ExtractArgs),
    /// Train a detector on a logit dump.
    Train(TrainArgs),
    /// Evaluate a model on a dump, or score a baseline feature file.
    Eval(EvalArgs),
    /// Recompute a model's thresholds on a calibration dump.
    Calibrate(CalibrateArgs),
    /// Score refusal-based toy detectors.
    Toy(ToyArgs),
    /// Run the moderation HTTP service.
    Serve(ServeArgs),
    /// Run a planted mock backend for local testing.
    MockBackend(MockArgs),
    /// Write a planted prompt dataset for use with the mock backend.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, env = "MULI_BACKEND_URL")]
    pub backend_url: Option<String>,
    #[arg(long, env = "MULI_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,
    #[arg(long, env = "MULI_TIMEOUT_SECS")]
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, env = "MULI_PARALLELISM")]
    pub parallelism: Option<usize>,
    /// Reuse rows already present in the output dump.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TransformArg {
    FStar,
    Logit,
    Prob,
    Logprob,
}

impl From<TransformArg> for TransformKind {
    fn from(t: TransformArg) -> Self {
        match t {
            TransformArg::FStar => TransformKind::FStar,
            TransformArg::Logit => TransformKind::Logit,
            TransformArg::Prob => TransformKind::Prob,
            TransformArg::Logprob => TransformKind::Logprob,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub transform: Option<TransformArg>,
    /// l1, l2 or none.
    #[arg(long)]
    pub regularizer: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on N rows drawn with class prevalence preserved.
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Fraction of rows held out for threshold calibration.
    #[arg(long, default_value_t = 0.0)]
    pub calib_fraction: f64,
    /// Extra threshold profile as name=fpr_cap (repeatable).
    #[arg(long = "profile", value_parser = parse_profile)]
    pub profiles: Vec<(String, f64)>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model to evaluate; required with --dump.
    #[arg(long, requires = "dump")]
    pub model: Option<PathBuf>,
    #[arg(long, conflicts_with = "baseline")]
    pub dump: Option<PathBuf>,
    /// Baseline feature file (JSONL) instead of a model.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Prompt file supplying labels for baseline rows.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Report path; curves and misclassifications are written alongside.
    #[arg(long)]
    pub out: PathBuf,
    /// Score even when the model and dump come from different backends.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Profile whose threshold selects misclassifications (model runs only).
    #[arg(long)]
    pub inspect_profile: Option<String>,
    /// Also write per-prompt scores as JSONL.
    #[arg(long)]
    pub scores_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dump: PathBuf,
    /// Output model path; defaults to overwriting the input model.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "profile", value_parser = parse_profile)]
    pub profiles: Vec<(String, f64)>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum ToyMode {
    Por,
    Port,
    Both,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, value_enum, default_value = "port")]
    pub mode: ToyMode,
    /// Logit dump for PoRT.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Prompt file for PoR.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Sample counts for PoR, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 32)]
    pub max_tokens: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "MULI_PARALLELISM")]
    pub parallelism: Option<usize>,
    /// Refusal keyword file, one per line.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub case_sensitive: bool,
    /// Refusal token ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub refusal_tokens: Vec<u32>,
    #[arg(long, default_value = "logit")]
    pub basis: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, env = "MULI_BIND")]
    pub bind: Option<String>,
    #[arg(long, env = "MULI_PROFILE")]
    pub profile: Option<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct MockArgs {
    #[arg(long, default_value = "127.0.0.1:8091")]
    pub bind: String,
    #[arg(long, default_value_t = 256)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 4.0)]
    pub shift: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub benign: usize,
    #[arg(long, default_value_t = 500)]
    pub toxic: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_profile(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, cap) = s.split_once('=').ok_or("expected name=fpr_cap")?;
    let cap: f64 = cap.parse().map_err(|e| format!("bad cap: {e}"))?;
    if !(cap > 0.0 && cap < 1.0) {
        return Err("fpr cap must be in (0, 1)".into());
    }
    Ok((name.to_string(), cap))
}

fn profiles_or_default(extra: &[(String, f64)]) -> BTreeMap<String, f64> {
    let mut p = default_profiles();
    p.extend(extra.iter().cloned());
    p
}

const DEFAULT_PARALLELISM: usize = 4;
const DEFAULT_TIMEOUT_SECS: u64 = 60;
const DEFAULT_BIND: &str = "127.0.0.1:8080";

fn connect(args: &BackendArgs, cfg: &FileConfig) -> Result<Option<HttpBackend>> {
    let Some(url) = args.backend_url.clone().or_else(|| cfg.backend.url.clone()) else {
        return Ok(None);
    };
    let key = args.api_key.clone().or_else(|| cfg.backend.api_key.clone());
    let secs = args.timeout_secs.or(cfg.backend.timeout_secs).unwrap_or(DEFAULT_TIMEOUT_SECS);
    HttpBackend::connect(&url, key, Duration::from_secs(secs)).map(Some)
}

fn require_backend(args: &BackendArgs, cfg: &FileConfig) -> Result<HttpBackend> {
    connect(args, cfg)?.ok_or_else(|| Error::invalid("a backend URL is required (--backend-url or MULI_BACKEND_URL)"))
}

fn load_prompts(path: &Path) -> Result<crate::datamodel::Dataset> {
    parse_prompts(path, PromptFormat::from_path(path)?)
}

fn run_extract(a: ExtractArgs, cfg: &FileConfig) -> Result<()> {
    let backend = require_backend(&a.backend, cfg)?;
    let d = load_prompts(&a.prompts)?;
    let par = a.parallelism.or(cfg.backend.parallelism).unwrap_or(DEFAULT_PARALLELISM);
    let report = extract_dataset(&backend, &d, &a.out, par, a.resume)?;
    eprintln!(
        "extracted {} rows ({} fetched, {} reused) into {}",
        report.dump.n_rows(),
        report.fetched,
        report.reused,
        a.out.display()
    );
    if report.failures.is_empty() {
        return Ok(());
    }
    for (id, msg) in &report.failures {
        eprintln!("failed {id}: {msg}");
    }
    Err(Error::Backend {
        msg: format!("{} of {} prompts failed; rerun with --resume", report.failures.len(), d.len()),
        retryable: true,
    })
}

fn run_train(a: TrainArgs, cfg: &FileConfig) -> Result<()> {
    let t = &cfg.train;
    let defaults = TrainConfig::default();
    let regularizer: Regularizer = match a.regularizer.as_ref().or(t.regularizer.as_ref()) {
        Some(s) => s.parse()?,
        None => defaults.regularizer,
    };
    let transform = match (a.transform, &t.transform) {
        (Some(k), _) => k.into(),
        (None, Some(s)) => s.parse()?,
        (None, None) => TransformKind::FStar,
    };
    let config = TrainConfig {
        lambda: a.lambda.or(t.lambda).unwrap_or(defaults.lambda),
        regularizer,
        epochs: a.epochs.or(t.epochs).unwrap_or(defaults.epochs),
        learning_rate: a.learning_rate.or(t.learning_rate).unwrap_or(defaults.learning_rate),
        batch_size: a.batch_size.or(t.batch_size).unwrap_or(defaults.batch_size),
        seed: a.seed.or(t.seed).unwrap_or(defaults.seed),
    };
    config.validate()?;
    let dump = read_logit_dump(&a.dump)?;
    let name = a
        .dump
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let opts = TrainOptions {
        transform,
        config,
        subsample: a.subsample,
        calib_fraction: a.calib_fraction,
        profiles: profiles_or_default(&a.profiles),
    };
    let res = train_from_dump(&dump, &name, &opts)?;
    for w in &res.warnings {
        log::warn!("{w}");
    }
    save_model(&res.model, &a.out)?;
    eprintln!(
        "trained on {} rows, {} nonzero weights, calibrated on {} rows; wrote {}",
        res.n_train,
        res.model.weights.nnz(),
        res.n_calibration,
        a.out.display()
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (series, report, inspect) = match (&a.model, &a.dump, &a.baseline) {
        (Some(model_path), Some(dump_path), None) => {
            let model = load_model(model_path)?;
            let dump = read_logit_dump(dump_path)?;
            if dump.n_rows() > 0 {
                check_fingerprint(&model, dump.fingerprint(), a.force)?;
            }
            let s = score_dump(&model, &dump)?;
            let report = evaluate_series(&dump_path.display().to_string(), &s, &model.thresholds)?;
            let profile = a.inspect_profile.as_deref().unwrap_or(DEFAULT_PROFILE);
            let t = model
                .threshold(profile)
                .ok_or_else(|| Error::invalid(format!("model has no profile '{profile}'")))?;
            (s, report, t)
        }
        (None, None, Some(baseline)) => {
            let rows = parse_baseline_scores(baseline)?;
            let d = a.prompts.as_deref().map(load_prompts).transpose()?;
            let s = baseline_series(&rows, d.as_ref())?;
            let report = evaluate_series(&baseline.display().to_string(), &s, &BTreeMap::new())?;
            // misclassifications at the threshold reaching the 1% FPR cap
            let t = report.metrics.tpr_at_fpr.get("1%").map(|x| x.threshold).unwrap_or(0.0);
            (s, report, t)
        }
        _ => return Err(Error::invalid("use either --model with --dump, or --baseline")),
    };
    write_eval_outputs(&a.out, &report, &series, inspect, a.top_k)?;
    if let Some(p) = &a.scores_out {
        write_series_jsonl(p, &series)?;
    }
    println!("{}", serde_json::to_string_pretty(&report.metrics)?);
    Ok(())
}

fn run_calibrate(a: CalibrateArgs) -> Result<()> {
    let mut model = load_model(&a.model)?;
    let dump = read_logit_dump(&a.dump)?;
    check_fingerprint(&model, dump.fingerprint(), a.force)?;
    let s = score_dump(&model, &dump)?;
    let cal = calibrate_thresholds(&s, &profiles_or_default(&a.profiles))?;
    for w in &cal.warnings {
        log::warn!("{w}");
    }
    model.thresholds = cal.thresholds;
    model
        .training_meta
        .notes
        .insert("calibration".into(), format!("held-out ({} rows)", dump.n_rows()));
    save_model(&model, a.out.as_ref().unwrap_or(&a.model))
}

fn run_toy(a: ToyArgs, cfg: &FileConfig) -> Result<()> {
    let basis: PortBasis = a.basis.parse()?;
    let mut out = serde_json::Map::new();
    let mut port = None;
    if a.mode != ToyMode::Por {
        let dump_path = a.dump.as_ref().ok_or_else(|| Error::invalid("PoRT needs --dump"))?;
        let dump = read_logit_dump(dump_path)?;
        let tokens = if a.refusal_tokens.is_empty() {
            RefusalTokenSet::llama2_default()
        } else {
            RefusalTokenSet::new(a.refusal_tokens.iter().map(|&t| (t, t.to_string())))
        };
        let s = port_series(&dump, &tokens, basis)?;
        let mut entry = serde_json::Map::new();
        entry.insert("metrics".into(), serde_json::to_value(MetricReport::compute(&s)?)?);
        entry.insert("scores".into(), serde_json::to_value(&s.entries)?);
        out.insert("port".into(), entry.into());
        port = Some(s);
    }
    if a.mode != ToyMode::Port {
        let prompts = a.prompts.as_ref().ok_or_else(|| Error::invalid("PoR needs --prompts"))?;
        let d = load_prompts(prompts)?;
        let backend = require_backend(&a.backend, cfg)?;
        let lex = match &a.lexicon {
            Some(p) => RefusalLexicon::load(p, a.case_sensitive)?,
            None => RefusalLexicon::default(),
        };
        let par = a.parallelism.or(cfg.backend.parallelism).unwrap_or(DEFAULT_PARALLELISM);
        let mut per_k = serde_json::Map::new();
        for &k in &a.k {
            let sc = SamplingConfig {
                k,
                temperature: a.temperature,
                max_tokens: a.max_tokens,
                seed: a.seed,
            };
            let (s, failures) = por_series(&backend as &dyn LogitBackend, &d, &sc, &lex, par)?;
            for (id, msg) in &failures {
                log::warn!("PoR failed for {id}: {msg}");
            }
            let mut entry = serde_json::Map::new();
            entry.insert("metrics".into(), serde_json::to_value(MetricReport::compute(&s)?)?);
            entry.insert("n_failed".into(), failures.len().into());
            entry.insert("scores".into(), serde_json::to_value(&s.entries)?);
            if let Some(p) = &port {
                entry.insert("agreement_with_port".into(), serde_json::to_value(toy_agreement(&s, p)?)?);
            }
            per_k.insert(k.to_string(), entry.into());
        }
        out.insert("por".into(), per_k.into());
    }
    write_json(&a.out, &out)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn run_serve(a: ServeArgs, cfg: &FileConfig) -> Result<()> {
    let model = load_model(&a.model)?;
    let backend = connect(&a.backend, cfg)?.map(|b| Arc::new(b) as Arc<dyn LogitBackend>);
    if backend.is_none() {
        log::warn!("no backend configured; text requests will return 503");
    }
    let profile = a
        .profile
        .or_else(|| cfg.serve.profile.clone())
        .unwrap_or_else(|| DEFAULT_PROFILE.to_string());
    let bind = a
        .bind
        .or_else(|| cfg.serve.bind.clone())
        .unwrap_or_else(|| DEFAULT_BIND.to_string());
    let m = Arc::new(Moderator::new(model, &profile, backend, a.force)?);
    runtime()?.block_on(serve(m, &bind))
}

fn run_mock(a: MockArgs) -> Result<()> {
    let backend = PlantedLogitBackend::new(PlantedConfig {
        vocab_size: a.vocab_size,
        shift: a.shift,
        seed: a.seed,
        ..PlantedConfig::default()
    })?;
    let router = backend_router(Arc::new(backend));
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .map_err(|e| Error::invalid(format!("cannot bind {}: {e}", a.bind)))?;
        eprintln!("mock backend on http://{}", a.bind);
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::invalid(format!("server error: {e}")))
    })
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let name = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    write_prompts_jsonl(&planted_dataset(&name, a.benign, a.toxic, a.seed), &a.out)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::invalid(format!("cannot start runtime: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Extract(a) => run_extract(a, &cfg),
        Command::Train(a) => run_train(a, &cfg),
        Command::Eval(a) => run_eval(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Toy(a) => run_toy(a, &cfg),
        Command::Serve(a) => run_serve(a, &cfg),
        Command::MockBackend(a) => run_mock(a),
        Command::Synth(a) => run_synth(a),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
