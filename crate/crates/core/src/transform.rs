//! Feature maps applied to first-token logits before the linear head.
//!
//! The default map is the per-token log-odds of the softmax probability,
//! standardized per vocabulary entry with statistics frozen at training time:
//!
//! ```text
//! f*(l)_i = (ln p_i - ln(1 - p_i) - mean_i) / std_i,   p = softmax(l)
//! ```
//!
//! `logit`, `prob` and `logprob` are the plain alternatives used for ablations.

use serde::{Deserialize, Serialize};

use crate::datamodel::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_CLAMP_EPS: f64 = 1e-12;

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let shifted = shifted(logits)?;
    let e: Vec<f64> = shifted.iter().map(|&x| x.exp()).collect();
    let sum: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / sum).collect())
}

/// `l_i - logsumexp(l)`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let shifted = shifted(logits)?;
    let lse = shifted.iter().map(|&x| x.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|x| x - lse).collect())
}

/// `l - max(l)`, so the largest entry is exactly zero.
fn shifted(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::invalid("softmax needs finite logits"));
    }
    Ok(logits.iter().map(|&l| l - max).collect())
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `ln(1 - e^x)` for `x < 0` without cancellation.
pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Log-odds `ln p' - ln(1 - p')` with `p'` clamped to `[eps, 1 - eps]`.
pub fn log_odds(p: &[f64], clamp_eps: f64) -> Vec<f64> {
    p.iter()
        .map(|&pi| {
            let c = pi.clamp(clamp_eps, 1.0 - clamp_eps);
            c.ln() - (-c).ln_1p()
        })
        .collect()
}

/// Same as [`log_odds`] but starting from log-probabilities, which keeps
/// precision for tokens whose probability is close to 1.
pub fn log_odds_from_logprobs(lp: &[f64], clamp_eps: f64) -> Vec<f64> {
    let lo = clamp_eps.ln();
    let hi = (-clamp_eps).ln_1p();
    lp.iter()
        .map(|&x| {
            let c = x.clamp(lo, hi);
            c - log1m_exp(c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub std_floor: f64,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-column mean and population standard deviation, floored.
pub fn fit_norm(features: &Matrix, std_floor: f64) -> Result<NormStats> {
    if features.rows() < 2 {
        return Err(Error::invalid(format!(
            "normalization needs at least 2 rows, got {}",
            features.rows()
        )));
    }
    let n = features.rows() as f64;
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for row in features.iter_rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in features.iter_rows() {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            let dx = x - m;
            *v += dx * dx;
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt().max(std_floor)).collect();
    Ok(NormStats {
        mean,
        std,
        std_floor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    FStar,
    Logit,
    Prob,
    Logprob,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::FStar,
        TransformKind::Logit,
        TransformKind::Prob,
        TransformKind::Logprob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::FStar => "f_star",
            TransformKind::Logit => "logit",
            TransformKind::Prob => "prob",
            TransformKind::Logprob => "logprob",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f_star" | "fstar" | "f*" => Ok(TransformKind::FStar),
            "logit" => Ok(TransformKind::Logit),
            "prob" => Ok(TransformKind::Prob),
            "logprob" | "log_prob" => Ok(TransformKind::Logprob),
            other => Err(Error::invalid(format!("unknown transform '{other}'"))),
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormStats>,
    pub clamp_eps: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        TransformSpec {
            kind,
            norm: None,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    /// Fits normalization (f* only) on raw logit rows. Other kinds are returned unchanged.
    pub fn fit(kind: TransformKind, logits: &Matrix) -> Result<Self> {
        let mut spec = TransformSpec::new(kind);
        if kind == TransformKind::FStar {
            let mut raw = Matrix::zeros(logits.rows(), logits.cols());
            for (i, row) in logits.iter_rows().enumerate() {
                let lp = log_softmax(row)?;
                raw.row_mut(i)
                    .copy_from_slice(&log_odds_from_logprobs(&lp, spec.clamp_eps));
            }
            spec.norm = Some(fit_norm(&raw, DEFAULT_STD_FLOOR)?);
        }
        Ok(spec)
    }

    pub fn is_fitted(&self) -> bool {
        self.kind != TransformKind::FStar || self.norm.is_some()
    }

    /// Maps one logit vector to features.
    pub fn apply(&self, logits: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            TransformKind::Logit => Ok(logits.to_vec()),
            TransformKind::Prob => softmax(logits),
            TransformKind::Logprob => log_softmax(logits),
            TransformKind::FStar => {
                let norm = self
                    .norm
                    .as_ref()
                    .ok_or_else(|| Error::invalid("f_star transform used before fitting"))?;
                if norm.dim() != logits.len() {
                    return Err(Error::DimensionMismatch {
                        expected: norm.dim(),
                        got: logits.len(),
                    });
                }
                let lp = log_softmax(logits)?;
                let mut out = log_odds_from_logprobs(&lp, self.clamp_eps);
                for ((x, m), s) in out.iter_mut().zip(&norm.mean).zip(&norm.std) {
                    *x = (*x - m) / s;
                }
                Ok(out)
            }
        }
    }

    pub fn apply_f32(&self, logits: &[f32]) -> Result<Vec<f64>> {
        let l: Vec<f64> = logits.iter().map(|&x| f64::from(x)).collect();
        self.apply(&l)
    }

    pub fn apply_matrix(&self, logits: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(logits.rows(), logits.cols());
        for (i, row) in logits.iter_rows().enumerate() {
            out.row_mut(i).copy_from_slice(&self.apply(row)?);
        }
        Ok(out)
    }
}
