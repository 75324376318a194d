//! Sparse logistic regression head.
//!
//! The detector score is `w·f(l) + b`. Training minimizes the mean binary
//! cross-entropy of `sigmoid(score)` plus a penalty on `w` (lasso by
//! default) with plain mini-batch SGD, starting from zero.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Label, Matrix};
use crate::error::{Error, Result};
use crate::transform::{NormStats, TransformKind, TransformSpec};
use crate::util::{read_file, sha256_hex, write_atomic};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const PRUNE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    L1,
    L2,
    None,
}

impl std::str::FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "lasso" => Ok(Regularizer::L1),
            "l2" | "ridge" => Ok(Regularizer::L2),
            "none" => Ok(Regularizer::None),
            other => Err(Error::invalid(format!("unknown regularizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-3,
            regularizer: Regularizer::L1,
            epochs: 500,
            learning_rate: 5e-4,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        Ok(())
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        match self.regularizer {
            Regularizer::L1 => self.lambda * w.iter().map(|x| x.abs()).sum::<f64>(),
            Regularizer::L2 => self.lambda * w.iter().map(|x| x * x).sum::<f64>(),
            Regularizer::None => 0.0,
        }
    }

    fn penalty_grad(&self, wi: f64) -> f64 {
        match self.regularizer {
            // sign(0) = 0
            Regularizer::L1 => {
                if wi > 0.0 {
                    self.lambda
                } else if wi < 0.0 {
                    -self.lambda
                } else {
                    0.0
                }
            }
            Regularizer::L2 => 2.0 * self.lambda * wi,
            Regularizer::None => 0.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `BCE(sigmoid(z), y)` without forming the probability.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn label_value(l: Label) -> f64 {
    f64::from(l.as_u8())
}

/// Dense weights and bias of a trained head.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Mean BCE over all rows plus the regularizer.
pub fn objective(x: &Matrix, y: &[Label], w: &[f64], b: f64, cfg: &TrainConfig) -> f64 {
    let n = x.rows() as f64;
    let data: f64 = x
        .iter_rows()
        .zip(y)
        .map(|(row, &l)| bce_with_logit(dot(w, row) + b, label_value(l)))
        .sum();
    data / n + cfg.penalty(w)
}

/// `(loss, dloss/dw, dloss/db)` of [`objective`].
pub fn objective_gradient(
    x: &Matrix,
    y: &[Label],
    w: &[f64],
    b: f64,
    cfg: &TrainConfig,
) -> (f64, Vec<f64>, f64) {
    let rows: Vec<usize> = (0..x.rows()).collect();
    let mut gw = vec![0.0; w.len()];
    let (data_loss, gb) = batch_gradient(x, y, &rows, w, b, &mut gw);
    for (g, &wi) in gw.iter_mut().zip(w) {
        *g += cfg.penalty_grad(wi);
    }
    (data_loss + cfg.penalty(w), gw, gb)
}

/// Mean BCE and its gradient over `rows`; the weight gradient is written into `gw`.
fn batch_gradient(
    x: &Matrix,
    y: &[Label],
    rows: &[usize],
    w: &[f64],
    b: f64,
    gw: &mut [f64],
) -> (f64, f64) {
    gw.iter_mut().for_each(|g| *g = 0.0);
    let inv = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut gb = 0.0;
    for &i in rows {
        let row = x.row(i);
        let yi = label_value(y[i]);
        let z = dot(w, row) + b;
        loss += bce_with_logit(z, yi);
        let r = (sigmoid(z) - yi) * inv;
        gb += r;
        for (g, &xi) in gw.iter_mut().zip(row) {
            *g += r * xi;
        }
    }
    (loss * inv, gb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub head: LinearHead,
    /// Full objective after training.
    pub final_loss: f64,
    /// Per epoch: mean of the pre-update batch losses plus the penalty at epoch end.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD from `w = 0, b = 0`, reshuffling every epoch with a seeded ChaCha8 stream.
pub fn train(features: &Matrix, labels: &[Label], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|l| l.is_toxic()).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::data(format!(
            "training needs both classes ({} positive of {})",
            n_pos,
            labels.len()
        )));
    }
    if let Some(v) = features.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(Error::data(format!("non-finite feature value {v}")));
    }

    let d = features.cols();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    let mut order: Vec<usize> = (0..features.rows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = cfg.learning_rate;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, gb) = batch_gradient(features, labels, batch, &w, b, &mut gw);
            loss_sum += loss;
            n_batches += 1;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * (g + cfg.penalty_grad(*wi));
            }
            b -= lr * gb;
        }
        let epoch_loss = loss_sum / n_batches as f64 + cfg.penalty(&w);
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "loss became {epoch_loss} at epoch {epoch}; try a smaller learning rate"
            )));
        }
        epoch_losses.push(epoch_loss);
    }

    let final_loss = objective(features, labels, &w, b, cfg);
    if !final_loss.is_finite() {
        return Err(Error::Diverged(format!("final loss is {final_loss}")));
    }
    Ok(TrainOutcome {
        head: LinearHead { weights: w, bias: b },
        final_loss,
        epoch_losses,
    })
}

/// Sparse weight vector: strictly increasing indices with their values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseWeights {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseWeights {
    /// Drops entries with `|w| < prune_eps`.
    pub fn from_dense(w: &[f64], prune_eps: f64) -> Self {
        let mut s = SparseWeights::default();
        for (i, &v) in w.iter().enumerate() {
            if v.abs() >= prune_eps {
                s.indices.push(i as u32);
                s.values.push(v);
            }
        }
        s
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut w = vec![0.0; n];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            w[i as usize] = v;
        }
        w
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| v * x[i as usize])
            .sum()
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::data("weights: indices and values differ in length"));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("weights: indices must be strictly increasing"));
        }
        if let Some(&last) = self.indices.last() {
            if last as usize >= n {
                return Err(Error::data(format!("weights: index {last} out of range {n}")));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("weights: non-finite value"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub dataset: String,
    pub config: TrainConfig,
    pub final_loss: f64,
    pub n_train: usize,
    pub n_positive: usize,
    /// Audit trail of choices not fixed by the method itself.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl TrainingMeta {
    fn default_notes() -> BTreeMap<String, String> {
        [
            ("init", "zeros"),
            ("loss_reduction", "mean over batch"),
            ("shuffle", "per epoch, ChaCha8 seeded"),
            ("l1_update", "subgradient, sign(0)=0"),
            ("momentum", "none"),
            ("lr_schedule", "constant"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

/// The deployable detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub weights: SparseWeights,
    pub bias: f64,
    pub transform: TransformSpec,
    pub vocab_size: usize,
    pub backend_fingerprint: String,
    pub thresholds: BTreeMap<String, f64>,
    pub training_meta: TrainingMeta,
}

impl DetectorModel {
    pub fn score(&self, logits: &[f64]) -> Result<f64> {
        if logits.len() != self.vocab_size {
            return Err(Error::DimensionMismatch {
                expected: self.vocab_size,
                got: logits.len(),
            });
        }
        let f = self.transform.apply(logits)?;
        Ok(self.weights.dot(&f) + self.bias)
    }

    pub fn score_f32(&self, logits: &[f32]) -> Result<f64> {
        let l: Vec<f64> = logits.iter().map(|&x| f64::from(x)).collect();
        self.score(&l)
    }

    pub fn threshold(&self, profile: &str) -> Option<f64> {
        self.thresholds.get(profile).copied()
    }

    pub fn dense_weights(&self) -> Vec<f64> {
        self.weights.to_dense(self.vocab_size)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let file = ModelFile::from_model(self);
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::data(format!("corrupted model file: {e}")))?;
        let version = v.get("format_version").and_then(|x| x.as_u64());
        match version {
            Some(ver) if ver == u64::from(MODEL_FORMAT_VERSION) => {}
            Some(ver) => {
                return Err(Error::Version {
                    found: ver.try_into().unwrap_or(u32::MAX),
                    expected: MODEL_FORMAT_VERSION,
                })
            }
            None => return Err(Error::data("model file lacks format_version")),
        }
        let file: ModelFile = serde_json::from_value(v)
            .map_err(|e| Error::data(format!("corrupted model file: {e}")))?;
        file.into_model()
    }

    /// Short content digest used as the model id in service responses.
    pub fn model_id(&self) -> String {
        match self.to_json() {
            Ok(bytes) => format!("sha256:{}", &sha256_hex(&bytes)[..16]),
            Err(_) => "unknown".to_string(),
        }
    }
}

/// `w·f(l) + b` for one logit vector.
pub fn slr_score(m: &DetectorModel, logits: &[f64]) -> Result<f64> {
    m.score(logits)
}

/// Fits the transform on raw logits, trains the head, and packages a model.
pub fn fit_detector(
    logits: &Matrix,
    labels: &[Label],
    kind: TransformKind,
    cfg: &TrainConfig,
    backend_fingerprint: &str,
    dataset: &str,
) -> Result<DetectorModel> {
    let transform = TransformSpec::fit(kind, logits)?;
    let features = transform.apply_matrix(logits)?;
    let outcome = train(&features, labels, cfg)?;
    Ok(DetectorModel {
        weights: SparseWeights::from_dense(&outcome.head.weights, PRUNE_EPS),
        bias: outcome.head.bias,
        transform,
        vocab_size: logits.cols(),
        backend_fingerprint: backend_fingerprint.to_string(),
        thresholds: BTreeMap::new(),
        training_meta: TrainingMeta {
            dataset: dataset.to_string(),
            config: cfg.clone(),
            final_loss: outcome.final_loss,
            n_train: labels.len(),
            n_positive: labels.iter().filter(|l| l.is_toxic()).count(),
            notes: TrainingMeta::default_notes(),
        },
    })
}

/// `r(w) = |{v in W : v > w}| / |W|` over the full dense weight vector.
pub fn weight_ranks(m: &DetectorModel, token_ids: &[u32]) -> Result<BTreeMap<u32, f64>> {
    let dense = m.dense_weights();
    let mut sorted = dense.clone();
    sorted.sort_by(f64::total_cmp);
    let n = dense.len() as f64;
    let mut out = BTreeMap::new();
    for &t in token_ids {
        let w = *dense.get(t as usize).ok_or_else(|| {
            Error::invalid(format!("token id {t} out of range {}", m.vocab_size))
        })?;
        let not_greater = sorted.partition_point(|&v| v <= w);
        out.insert(t, (sorted.len() - not_greater) as f64 / n);
    }
    Ok(out)
}

pub fn save_model(m: &DetectorModel, path: &Path) -> Result<()> {
    write_atomic(path, &m.to_json()?)
}

pub fn load_model(path: &Path) -> Result<DetectorModel> {
    DetectorModel::from_json(&read_file(path)?)
}

#[derive(Serialize, Deserialize)]
struct TransformFile {
    kind: TransformKind,
    clamp_eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std_floor: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    transform: TransformFile,
    vocab_size: usize,
    backend_fingerprint: String,
    weights: SparseWeights,
    bias: f64,
    thresholds: BTreeMap<String, f64>,
    training_meta: TrainingMeta,
}

impl ModelFile {
    fn from_model(m: &DetectorModel) -> Self {
        let norm = m.transform.norm.as_ref();
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            transform: TransformFile {
                kind: m.transform.kind,
                clamp_eps: m.transform.clamp_eps,
                mean: norm.map(|n| n.mean.clone()),
                std: norm.map(|n| n.std.clone()),
                std_floor: norm.map(|n| n.std_floor),
            },
            vocab_size: m.vocab_size,
            backend_fingerprint: m.backend_fingerprint.clone(),
            weights: SparseWeights::from_dense(&m.dense_weights(), PRUNE_EPS),
            bias: m.bias,
            thresholds: m.thresholds.clone(),
            training_meta: m.training_meta.clone(),
        }
    }

    fn into_model(self) -> Result<DetectorModel> {
        self.weights.validate(self.vocab_size)?;
        if !self.bias.is_finite() {
            return Err(Error::data("bias is not finite"));
        }
        if let Some((k, _)) = self.thresholds.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::data(format!("threshold '{k}' is not finite")));
        }
        let norm = match (self.transform.mean, self.transform.std) {
            (Some(mean), Some(std)) => {
                if mean.len() != self.vocab_size || std.len() != self.vocab_size {
                    return Err(Error::data("normalization statistics do not match vocab_size"));
                }
                Some(NormStats {
                    mean,
                    std,
                    std_floor: self.transform.std_floor.unwrap_or(crate::transform::DEFAULT_STD_FLOOR),
                })
            }
            (None, None) => None,
            _ => return Err(Error::data("transform has only one of mean/std")),
        };
        let transform = TransformSpec {
            kind: self.transform.kind,
            norm,
            clamp_eps: self.transform.clamp_eps,
        };
        if !transform.is_fitted() {
            return Err(Error::data("f_star transform without normalization statistics"));
        }
        Ok(DetectorModel {
            weights: self.weights,
            bias: self.bias,
            transform,
            vocab_size: self.vocab_size,
            backend_fingerprint: self.backend_fingerprint,
            thresholds: self.thresholds,
            training_meta: self.training_meta,
        })
    }
}
