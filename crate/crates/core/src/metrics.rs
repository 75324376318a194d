//! Evaluation metrics for heavily imbalanced detection.
//!
//! Everything is derived from one threshold sweep. A prompt is classified
//! toxic iff `score > threshold`. Thresholds sit at midpoints between
//! consecutive distinct scores, plus one sentinel above the maximum and one
//! below the minimum, so tied scores are never split.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub prompt_id: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSeries {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        ScoreSeries { entries }
    }

    /// Builds a series with ids `"0"`, `"1"`, ...
    pub fn from_scores(scores: &[f64], labels: &[Label]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: scores.len(),
                got: labels.len(),
            });
        }
        Ok(ScoreSeries {
            entries: scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&score, &label))| ScoreEntry {
                    prompt_id: i.to_string(),
                    score,
                    label,
                })
                .collect(),
        })
    }

    /// Convenience for tests and examples: separate negative and positive score lists.
    pub fn from_classes(negatives: &[f64], positives: &[f64]) -> Self {
        let mut scores = negatives.to_vec();
        scores.extend_from_slice(positives);
        let mut labels = vec![Label::Benign; negatives.len()];
        labels.extend(std::iter::repeat_n(Label::Toxic, positives.len()));
        Self::from_scores(&scores, &labels).expect("lengths match")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// (negatives, positives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.entries.iter().filter(|e| e.label.is_toxic()).count();
        (self.entries.len() - pos, pos)
    }

    fn check_finite(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.score.is_finite()) {
            Some(e) => Err(Error::data(format!("non-finite score for '{}'", e.prompt_id))),
            None => Ok(()),
        }
    }

    fn check_both_classes(&self) -> Result<(usize, usize)> {
        self.check_finite()?;
        let (neg, pos) = self.class_counts();
        if neg == 0 || pos == 0 {
            return Err(Error::data(format!(
                "metric needs both classes (negatives: {neg}, positives: {pos})"
            )));
        }
        Ok((neg, pos))
    }

    /// Per distinct score, descending: (score, positives, negatives).
    fn descending_groups(&self) -> Vec<(f64, usize, usize)> {
        let mut sorted: Vec<(f64, bool)> =
            self.entries.iter().map(|e| (e.score, e.label.is_toxic())).collect();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for (s, pos) in sorted {
            match groups.last_mut() {
                // == rather than total_cmp so that -0.0 and 0.0 share a group
                Some(g) if g.0 == s => {
                    if pos {
                        g.1 += 1
                    } else {
                        g.2 += 1
                    }
                }
                _ => groups.push((s, usize::from(pos), usize::from(!pos))),
            }
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
}

impl SweepPoint {
    fn from_counts(threshold: f64, tp: usize, fp: usize, pos: usize, neg: usize) -> Self {
        let tpr = tp as f64 / pos as f64;
        SweepPoint {
            threshold,
            tp,
            fp,
            tn: neg - fp,
            fn_: pos - tp,
            tpr,
            fpr: fp as f64 / neg as f64,
            // no predicted positives: precision is taken as 1
            precision: if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            },
            recall: tpr,
        }
    }

    /// True negative rate, computed from counts.
    pub fn tnr(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }
}

fn above(x: f64) -> f64 {
    let y = x + 1.0;
    if y > x {
        y
    } else {
        x.next_up()
    }
}

fn below(x: f64) -> f64 {
    let y = x - 1.0;
    if y < x {
        y
    } else {
        x.next_down()
    }
}

/// A threshold `t` with `lo <= t < hi`; `score > t` then separates the two.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo / 2.0 + hi / 2.0;
    if m < lo || m >= hi {
        lo
    } else {
        m
    }
}

/// Full threshold sweep, by descending threshold.
pub fn sweep(s: &ScoreSeries) -> Result<Vec<SweepPoint>> {
    let (neg, pos) = s.check_both_classes()?;
    let groups = s.descending_groups();
    let mut points = Vec::with_capacity(groups.len() + 1);
    points.push(SweepPoint::from_counts(above(groups[0].0), 0, 0, pos, neg));
    let (mut tp, mut fp) = (0, 0);
    for (i, &(score, gp, gn)) in groups.iter().enumerate() {
        tp += gp;
        fp += gn;
        let threshold = match groups.get(i + 1) {
            Some(&(next, _, _)) => midpoint(next, score),
            None => below(score),
        };
        points.push(SweepPoint::from_counts(threshold, tp, fp, pos, neg));
    }
    Ok(points)
}

/// Max over thresholds of `(TPR + TNR) / 2`, in percent.
///
/// The maximum is taken on exact integer numerators `tp*N + tn*P` and
/// converted to a float once.
pub fn balanced_optimal_accuracy(s: &ScoreSeries) -> Result<f64> {
    let points = sweep(s)?;
    let (neg, pos) = s.class_counts();
    let best = points
        .iter()
        .map(|p| p.tp as u128 * neg as u128 + p.tn as u128 * pos as u128)
        .max()
        .expect("sweep is nonempty");
    Ok(ratio(best * 50, pos as u128 * neg as u128))
}

/// Average precision: sum over recall steps of `Δrecall * precision`, with
/// tied scores entering together at the group-end precision.
///
/// Accumulated as an exact fraction while it fits in `u128`, so the result
/// is the correctly rounded value for realistic small series.
pub fn auprc(s: &ScoreSeries) -> Result<f64> {
    s.check_finite()?;
    let (_, pos) = s.class_counts();
    if pos == 0 {
        return Err(Error::data("AUPRC needs at least one positive"));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut exact = Some(Fraction::ZERO);
    let mut acc = 0.0;
    for (_, gp, gn) in s.descending_groups() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            exact = exact.and_then(|f| f.add((gp * tp) as u128, (tp + fp) as u128));
            acc += gp as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(match exact.and_then(|f| f.checked_mul_den(pos as u128)) {
        Some(f) => ratio(f.num, f.den),
        None => acc / pos as f64,
    })
}

/// `num / den` in lowest terms; rounded once while both fit in 53 bits.
fn ratio(num: u128, den: u128) -> f64 {
    let g = gcd(num, den).max(1);
    (num / g) as f64 / (den / g) as f64
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, Copy)]
struct Fraction {
    num: u128,
    den: u128,
}

impl Fraction {
    const ZERO: Fraction = Fraction { num: 0, den: 1 };

    fn add(self, n: u128, d: u128) -> Option<Fraction> {
        let g = gcd(self.den, d);
        let den = (self.den / g).checked_mul(d)?;
        let num = self.num.checked_mul(d / g)?.checked_add(n.checked_mul(self.den / g)?)?;
        let r = gcd(num, den).max(1);
        Some(Fraction {
            num: num / r,
            den: den / r,
        })
    }

    fn checked_mul_den(self, d: u128) -> Option<Fraction> {
        Some(Fraction {
            num: self.num,
            den: self.den.checked_mul(d)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    pub tpr: f64,
    pub threshold: f64,
    pub achieved_fpr: f64,
}

/// Best TPR among sweep points with `fpr <= fpr_cap`, no interpolation.
/// Ties go to the higher threshold.
pub fn tpr_at_fpr(s: &ScoreSeries, fpr_cap: f64) -> Result<TprAtFpr> {
    if !(0.0..1.0).contains(&fpr_cap) {
        return Err(Error::invalid(format!("FPR cap must be in [0, 1), got {fpr_cap}")));
    }
    let points = sweep(s)?;
    Ok(best_under_cap(&points, fpr_cap))
}

fn best_under_cap(points: &[SweepPoint], fpr_cap: f64) -> TprAtFpr {
    let mut best = &points[0];
    for p in points.iter().skip(1).take_while(|p| p.fpr <= fpr_cap) {
        if p.tpr > best.tpr {
            best = p;
        }
    }
    TprAtFpr {
        tpr: best.tpr,
        threshold: best.threshold,
        achieved_fpr: best.fpr,
    }
}

/// Named FPR caps used when no profiles are given.
pub fn default_profiles() -> BTreeMap<String, f64> {
    [
        ("fpr_10pct", 0.10),
        ("fpr_1pct", 0.01),
        ("fpr_0.1pct", 0.001),
        ("fpr_0.01pct", 0.0001),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub const DEFAULT_PROFILE: &str = "fpr_0.1pct";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub thresholds: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Threshold per named FPR cap. Caps finer than `1 / #negatives` are
/// effectively zero-false-positive caps and produce a warning.
pub fn calibrate_thresholds(s: &ScoreSeries, profiles: &BTreeMap<String, f64>) -> Result<Calibration> {
    let points = sweep(s)?;
    let (neg, _) = s.class_counts();
    let mut thresholds = BTreeMap::new();
    let mut warnings = Vec::new();
    for (name, &cap) in profiles {
        if !(0.0..1.0).contains(&cap) {
            return Err(Error::invalid(format!(
                "profile '{name}': FPR cap must be in [0, 1), got {cap}"
            )));
        }
        if cap > 0.0 && (neg as f64) * cap < 1.0 {
            warnings.push(format!(
                "profile '{name}': cap {cap} needs at least {} negatives, have {neg}; quantized to 0 false positives",
                (1.0 / cap).ceil()
            ));
        }
        thresholds.insert(name.clone(), best_under_cap(&points, cap).threshold);
    }
    Ok(Calibration {
        thresholds,
        warnings,
    })
}

/// Writes the sweep as CSV, ascending FPR (descending threshold).
pub fn export_curves(s: &ScoreSeries, path: &Path) -> Result<()> {
    let points = sweep(s)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "fpr", "tpr", "precision", "recall", "tp", "fp", "tn", "fn"])
        .map_err(csv_err)?;
    for p in &points {
        w.write_record([
            p.threshold.to_string(),
            p.fpr.to_string(),
            p.tpr.to_string(),
            p.precision.to_string(),
            p.recall.to_string(),
            p.tp.to_string(),
            p.fp.to_string(),
            p.tn.to_string(),
            p.fn_.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    crate::util::write_atomic(path, &bytes)
}

pub fn read_curves(path: &Path) -> Result<Vec<SweepPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg,
        };
        if rec.len() != 9 {
            return Err(bad(format!("expected 9 columns, got {}", rec.len())));
        }
        let f = |j: usize| rec[j].parse::<f64>().map_err(|e| bad(e.to_string()));
        let u = |j: usize| rec[j].parse::<usize>().map_err(|e| bad(e.to_string()));
        out.push(SweepPoint {
            threshold: f(0)?,
            fpr: f(1)?,
            tpr: f(2)?,
            precision: f(3)?,
            recall: f(4)?,
            tp: u(5)?,
            fp: u(6)?,
            tn: u(7)?,
            fn_: u(8)?,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(format!("csv: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub prompt_id: String,
    pub score: f64,
    /// Whether the entry is on the wrong side of the inspection threshold.
    pub misclassified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopMisclassified {
    pub threshold: f64,
    /// Highest-scoring benign prompts.
    pub top_negatives: Vec<RankedEntry>,
    /// Lowest-scoring toxic prompts.
    pub top_positives: Vec<RankedEntry>,
}

pub fn top_misclassified(s: &ScoreSeries, threshold: f64, k: usize) -> TopMisclassified {
    let mut neg: Vec<&ScoreEntry> = s.entries.iter().filter(|e| !e.label.is_toxic()).collect();
    let mut pos: Vec<&ScoreEntry> = s.entries.iter().filter(|e| e.label.is_toxic()).collect();
    neg.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.prompt_id.cmp(&b.prompt_id)));
    pos.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.prompt_id.cmp(&b.prompt_id)));
    let rank = |v: Vec<&ScoreEntry>| {
        v.into_iter()
            .take(k)
            .map(|e| RankedEntry {
                prompt_id: e.prompt_id.clone(),
                score: e.score,
                misclassified: (e.score > threshold) != e.label.is_toxic(),
            })
            .collect()
    };
    TopMisclassified {
        threshold,
        top_negatives: rank(neg),
        top_positives: rank(pos),
    }
}

/// FPR caps reported in every metric report, with their column labels.
pub const REPORT_CAPS: [(&str, f64); 4] =
    [("10%", 0.10), ("1%", 0.01), ("0.1%", 0.001), ("0.01%", 0.0001)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Balanced optimal accuracy in percent, rounded to 2 decimals.
    pub acc_opt: f64,
    pub auprc: f64,
    pub tpr_at_fpr: BTreeMap<String, TprAtFpr>,
    pub n_positive: usize,
    pub n_negative: usize,
}

impl MetricReport {
    pub fn compute(s: &ScoreSeries) -> Result<Self> {
        let (n_negative, n_positive) = s.check_both_classes()?;
        let acc = balanced_optimal_accuracy(s)?;
        let mut tpr = BTreeMap::new();
        for (name, cap) in REPORT_CAPS {
            tpr.insert(name.to_string(), tpr_at_fpr(s, cap)?);
        }
        Ok(MetricReport {
            acc_opt: (acc * 100.0).round() / 100.0,
            auprc: auprc(s)?,
            tpr_at_fpr: tpr,
            n_positive,
            n_negative,
        })
    }
}
