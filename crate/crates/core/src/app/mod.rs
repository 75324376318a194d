//! Workflows behind the CLI and the moderation service.

pub mod cli;
pub mod config;
pub mod server;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{run_bounded, sample_responses, FirstTokenDistribution, LogitBackend, SamplingConfig};
use crate::datamodel::{Dataset, Label};
use crate::error::{Error, Result};
use crate::ingest::{BaselineScoreRow, LogitDump};
use crate::metrics::{
    calibrate_thresholds, default_profiles, export_curves, top_misclassified, MetricReport, ScoreEntry,
    ScoreSeries, TopMisclassified,
};
use crate::toymodels::{compare_detectors, estimate_por, port_score, AgreementMatrix, PortBasis, RefusalLexicon, RefusalTokenSet, ThresholdRule};
use crate::trainer::{fit_detector, DetectorModel, TrainConfig};
use crate::transform::TransformKind;
use crate::util::write_atomic;

/// Seeded class-stratified subsample of `n` rows whose prevalence matches the input.
/// At least one row of each class is kept when `n >= 2`.
pub fn subsample_stratified(labels: &[Label], n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_toxic()).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_toxic()).collect();
    if n > labels.len() {
        return Err(Error::invalid(format!(
            "subsample of {n} requested from {} rows",
            labels.len()
        )));
    }
    if n < 2 || pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("subsample needs n >= 2 and both classes"));
    }
    let frac = pos.len() as f64 / labels.len() as f64;
    let n_pos = ((n as f64 * frac).round() as usize).clamp(1, n - 1).min(pos.len());
    let n_neg = n - n_pos;
    if n_neg > neg.len() {
        return Err(Error::invalid("not enough benign rows for the subsample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    neg.shuffle(&mut rng);
    pos.shuffle(&mut rng);
    let mut out: Vec<usize> = neg[..n_neg].iter().chain(&pos[..n_pos]).copied().collect();
    out.sort_unstable();
    Ok(out)
}

/// Seeded split of row indices into (fit, holdout), stratified by class.
pub fn holdout_split(labels: &[Label], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("holdout fraction must be in (0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut fit = Vec::new();
    let mut hold = Vec::new();
    for class in [Label::Benign, Label::Toxic] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        hold.extend_from_slice(&idx[..k]);
        fit.extend_from_slice(&idx[k..]);
    }
    fit.sort_unstable();
    hold.sort_unstable();
    Ok((fit, hold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub transform: TransformKind,
    pub config: TrainConfig,
    pub subsample: Option<usize>,
    /// Fraction of rows held out for threshold calibration; 0 calibrates on training scores.
    pub calib_fraction: f64,
    pub profiles: BTreeMap<String, f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            transform: TransformKind::FStar,
            config: TrainConfig::default(),
            subsample: None,
            calib_fraction: 0.0,
            profiles: default_profiles(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: DetectorModel,
    pub n_train: usize,
    pub n_calibration: usize,
    pub warnings: Vec<String>,
}

/// Fits transform and head on a dump, then calibrates thresholds.
pub fn train_from_dump(dump: &LogitDump, dataset_name: &str, opts: &TrainOptions) -> Result<TrainResult> {
    let labels = dump.labels();
    let mut rows: Vec<usize> = (0..dump.n_rows()).collect();
    if let Some(n) = opts.subsample {
        rows = subsample_stratified(&labels, n, opts.config.seed)?;
    }
    let mut warnings = Vec::new();
    let (fit_rows, calib_rows, calib_mode) = if opts.calib_fraction > 0.0 {
        let sub_labels: Vec<Label> = rows.iter().map(|&i| labels[i]).collect();
        let (f, h) = holdout_split(&sub_labels, opts.calib_fraction, opts.config.seed)?;
        let f: Vec<usize> = f.into_iter().map(|i| rows[i]).collect();
        let h: Vec<usize> = h.into_iter().map(|i| rows[i]).collect();
        (f, h, "held-out")
    } else {
        warnings.push("thresholds calibrated on training scores; use a held-out fraction for deployment".into());
        (rows.clone(), rows, "training")
    };
    let fit_dump = dump.select(&fit_rows);
    let fit_labels = fit_dump.labels();
    let mut model = fit_detector(
        &fit_dump.to_matrix(),
        &fit_labels,
        opts.transform,
        &opts.config,
        dump.fingerprint(),
        dataset_name,
    )?;
    let calib = dump.select(&calib_rows);
    let series = score_dump(&model, &calib)?;
    let cal = calibrate_thresholds(&series, &opts.profiles)?;
    warnings.extend(cal.warnings);
    model.thresholds = cal.thresholds;
    model
        .training_meta
        .notes
        .insert("calibration".into(), format!("{calib_mode} ({} rows)", calib_rows.len()));
    model
        .training_meta
        .notes
        .insert("transform".into(), opts.transform.name().into());
    Ok(TrainResult {
        model,
        n_train: fit_rows.len(),
        n_calibration: calib_rows.len(),
        warnings,
    })
}

/// Scores every dump row; fingerprints are the caller's concern.
pub fn score_dump(model: &DetectorModel, dump: &LogitDump) -> Result<ScoreSeries> {
    if dump.n_rows() > 0 && dump.n_cols() != model.vocab_size {
        return Err(Error::DimensionMismatch {
            expected: model.vocab_size,
            got: dump.n_cols(),
        });
    }
    let mut entries = Vec::with_capacity(dump.n_rows());
    for (i, m) in dump.manifest.iter().enumerate() {
        entries.push(ScoreEntry {
            prompt_id: m.prompt_id.clone(),
            score: model.score_f32(dump.entry_logits(i))?,
            label: m.label,
        });
    }
    Ok(ScoreSeries::new(entries))
}

pub fn check_fingerprint(model: &DetectorModel, data_fingerprint: &str, force: bool) -> Result<()> {
    if model.backend_fingerprint == data_fingerprint {
        return Ok(());
    }
    let err = Error::FingerprintMismatch {
        expected: model.backend_fingerprint.clone(),
        got: data_fingerprint.to_string(),
    };
    if force {
        log::warn!("{err}; continuing because of --force");
        Ok(())
    } else {
        Err(err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOutcome {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    /// How the metric thresholds were chosen.
    pub threshold_mode: String,
    pub metrics: MetricReport,
    /// Operating points of the model's stored thresholds on this data.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub calibrated: BTreeMap<String, ProfileOutcome>,
}

pub fn evaluate_series(source: &str, s: &ScoreSeries, thresholds: &BTreeMap<String, f64>) -> Result<EvalReport> {
    let metrics = MetricReport::compute(s)?;
    let (neg, pos) = s.class_counts();
    let calibrated = thresholds
        .iter()
        .map(|(name, &t)| {
            let tp = s.entries.iter().filter(|e| e.label.is_toxic() && e.score > t).count();
            let fp = s.entries.iter().filter(|e| !e.label.is_toxic() && e.score > t).count();
            (
                name.clone(),
                ProfileOutcome {
                    threshold: t,
                    tpr: tp as f64 / pos as f64,
                    fpr: fp as f64 / neg as f64,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        source: source.to_string(),
        threshold_mode: "optimal thresholds chosen on the evaluated data; `calibrated` uses stored thresholds".into(),
        metrics,
        calibrated,
    })
}

/// Paths of the three evaluation outputs derived from the report path.
pub fn eval_output_paths(report: &Path) -> (PathBuf, PathBuf) {
    let stem = report.with_extension("");
    let mut curves = stem.clone().into_os_string();
    curves.push(".curves.csv");
    let mut top = stem.into_os_string();
    top.push(".top.json");
    (PathBuf::from(curves), PathBuf::from(top))
}

/// Writes report JSON, curve CSV and the top-misclassified listing.
pub fn write_eval_outputs(
    report_path: &Path,
    report: &EvalReport,
    series: &ScoreSeries,
    inspect_threshold: f64,
    top_k: usize,
) -> Result<TopMisclassified> {
    let (curves, top_path) = eval_output_paths(report_path);
    write_json(report_path, report)?;
    export_curves(series, &curves)?;
    let top = top_misclassified(series, inspect_threshold, top_k);
    write_json(&top_path, &top)?;
    Ok(top)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_series_jsonl(path: &Path, s: &ScoreSeries) -> Result<()> {
    let mut out = Vec::new();
    for e in &s.entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Joins baseline feature rows with labels (row label first, then the dataset).
pub fn baseline_series(rows: &[BaselineScoreRow], dataset: Option<&Dataset>) -> Result<ScoreSeries> {
    let labels: HashMap<&str, Label> = dataset
        .map(|d| d.items.iter().map(|i| (i.id.as_str(), i.label)).collect())
        .unwrap_or_default();
    let mut entries = Vec::with_capacity(rows.len());
    for r in rows {
        let label = r
            .label
            .or_else(|| labels.get(r.prompt_id.as_str()).copied())
            .ok_or_else(|| Error::data(format!("no label for baseline row '{}'", r.prompt_id)))?;
        entries.push(ScoreEntry {
            prompt_id: r.prompt_id.clone(),
            score: r.feature,
            label,
        });
    }
    Ok(ScoreSeries::new(entries))
}

/// PoRT scores over a dump (no backend calls).
pub fn port_series(dump: &LogitDump, tokens: &RefusalTokenSet, basis: PortBasis) -> Result<ScoreSeries> {
    tokens.validate(dump.n_cols())?;
    let mut entries = Vec::with_capacity(dump.n_rows());
    for (i, m) in dump.manifest.iter().enumerate() {
        let l: Vec<f64> = dump.entry_logits(i).iter().map(|&x| f64::from(x)).collect();
        entries.push(ScoreEntry {
            prompt_id: m.prompt_id.clone(),
            score: port_score(&FirstTokenDistribution::Full(l), tokens, basis)?,
            label: m.label,
        });
    }
    Ok(ScoreSeries::new(entries))
}

/// PoR with `k` sampled responses per prompt; failed prompts are reported, not scored.
pub fn por_series(
    backend: &dyn LogitBackend,
    d: &Dataset,
    cfg: &SamplingConfig,
    lex: &RefusalLexicon,
    parallelism: usize,
) -> Result<(ScoreSeries, Vec<(String, String)>)> {
    cfg.validate()?;
    let results = run_bounded(&d.items, parallelism, |p| {
        sample_responses(backend, &p.text, cfg).and_then(|r| estimate_por(&r, lex))
    });
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (p, r) in d.items.iter().zip(results) {
        match r {
            Ok(score) => entries.push(ScoreEntry {
                prompt_id: p.id.clone(),
                score,
                label: p.label,
            }),
            Err(e) => failures.push((p.id.clone(), e.to_string())),
        }
    }
    Ok((ScoreSeries::new(entries), failures))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub detector: String,
    pub metrics: Option<MetricReport>,
    pub n_scored: usize,
    pub failures: Vec<(String, String)>,
}

/// PoR-vs-PoRT agreement over the prompts both detectors scored.
pub fn toy_agreement(por: &ScoreSeries, port: &ScoreSeries) -> Result<AgreementMatrix> {
    let keep: std::collections::HashSet<&str> = por.entries.iter().map(|e| e.prompt_id.as_str()).collect();
    let port = ScoreSeries::new(
        port.entries
            .iter()
            .filter(|e| keep.contains(e.prompt_id.as_str()))
            .cloned()
            .collect(),
    );
    compare_detectors(por, &port, ThresholdRule::Median)
}
