//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use muli::acquisition::{extract_dataset, HttpBackend, LogitBackend};
use muli::app::{score_dump, train_from_dump, TrainOptions};
use muli::datamodel::{Label, LogitRecord, Matrix};
use muli::ingest::{read_logit_dump, write_dump, LogitDump};
use muli::metrics::{auprc, balanced_optimal_accuracy, sweep, tpr_at_fpr, ScoreEntry, ScoreSeries};
use muli::synthetic::{backend_router, planted_dataset, CategoricalResponseSampler, PlantedConfig, PlantedLogitBackend};
use muli::toymodels::{estimate_por, RefusalLexicon};
use muli::trainer::{
    load_model, objective, objective_gradient, save_model, train, weight_ranks, DetectorModel, Regularizer,
    SparseWeights, TrainConfig, TrainingMeta, PRUNE_EPS,
};
use muli::transform::{TransformKind, TransformSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Brute-force metric oracle: enumerate every distinct-score cutoff and count
// directly. Fractions are kept as exact integer pairs.

struct OracleCut {
    tp: usize,
    fp: usize,
}

/// Cutoffs from "nothing positive" down to "everything positive".
fn oracle_cuts(s: &[(f64, bool)]) -> Vec<OracleCut> {
    let mut distinct: Vec<f64> = s.iter().map(|e| e.0).collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let mut cuts = vec![OracleCut { tp: 0, fp: 0 }];
    for t in distinct {
        cuts.push(OracleCut {
            tp: s.iter().filter(|e| e.1 && e.0 >= t).count(),
            fp: s.iter().filter(|e| !e.1 && e.0 >= t).count(),
        });
    }
    cuts
}

fn counts(s: &[(f64, bool)]) -> (usize, usize) {
    let p = s.iter().filter(|e| e.1).count();
    (s.len() - p, p)
}

fn oracle_balanced(s: &[(f64, bool)]) -> f64 {
    let (n, p) = counts(s);
    let best = oracle_cuts(s)
        .iter()
        .map(|c| (c.tp * n + (n - c.fp) * p) as u64)
        .max()
        .unwrap();
    (best * 50) as f64 / (p * n) as f64
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Mean over positives of the precision at that positive's tie-group end.
fn oracle_auprc(s: &[(f64, bool)]) -> f64 {
    let (_, p) = counts(s);
    let (mut num, mut den) = (0u128, 1u128);
    for &(score, _) in s.iter().filter(|e| e.1) {
        let hits = s.iter().filter(|e| e.0 >= score && e.1).count() as u128;
        let all = s.iter().filter(|e| e.0 >= score).count() as u128;
        num = num * all + hits * den;
        den *= all;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    den *= p as u128;
    let g = gcd(num, den);
    (num / g) as f64 / (den / g) as f64
}

/// (max tp, fp of the realizing cut) among cuts with fp / N <= cap.
fn oracle_tpr_at_fpr(s: &[(f64, bool)], cap: f64) -> (usize, usize) {
    let (n, _) = counts(s);
    oracle_cuts(s)
        .into_iter()
        .filter(|c| c.fp as f64 / n as f64 <= cap)
        .map(|c| (c.tp, c.fp))
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .unwrap()
}

fn to_series(s: &[(f64, bool)]) -> ScoreSeries {
    ScoreSeries::new(
        s.iter()
            .enumerate()
            .map(|(i, &(score, pos))| ScoreEntry {
                prompt_id: format!("r{i}"),
                score,
                label: Label::from(pos),
            })
            .collect(),
    )
}

fn random_series(rng: &mut ChaCha8Rng) -> Vec<(f64, bool)> {
    let n = rng.random_range(2..=20);
    let discrete = rng.random_bool(0.5);
    let mut s: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let score = if discrete {
                f64::from(rng.random_range(0..5u8))
            } else {
                rng.random_range(-3.0..3.0)
            };
            (score, rng.random_bool(0.4))
        })
        .collect();
    s[0].1 = true;
    s[1].1 = false;
    s
}

fn check_against_oracle(s: &[(f64, bool)], cap: f64) -> std::result::Result<(), String> {
    let series = to_series(s);
    let (n, p) = counts(s);
    let points = sweep(&series).map_err(|e| e.to_string())?;
    let cuts = oracle_cuts(s);
    ensure(points.len() == cuts.len(), || format!("{} points vs {} cuts", points.len(), cuts.len()))?;
    for (pt, c) in points.iter().zip(&cuts) {
        let above_tp = s.iter().filter(|e| e.1 && e.0 > pt.threshold).count();
        let above_fp = s.iter().filter(|e| !e.1 && e.0 > pt.threshold).count();
        ensure(
            (pt.tp, pt.fp, above_tp, above_fp) == (c.tp, c.fp, c.tp, c.fp)
                && pt.tn == n - c.fp
                && pt.fn_ == p - c.tp
                && pt.tpr == c.tp as f64 / p as f64
                && pt.fpr == c.fp as f64 / n as f64,
            || format!("sweep point {pt:?} vs cut tp={} fp={}", c.tp, c.fp),
        )?;
    }
    let acc = balanced_optimal_accuracy(&series).map_err(|e| e.to_string())?;
    ensure(acc == oracle_balanced(s), || format!("accuracy {acc} vs {}", oracle_balanced(s)))?;
    let ap = auprc(&series).map_err(|e| e.to_string())?;
    ensure(ap == oracle_auprc(s), || format!("auprc {ap} vs {}", oracle_auprc(s)))?;
    let r = tpr_at_fpr(&series, cap).map_err(|e| e.to_string())?;
    let (tp, fp) = oracle_tpr_at_fpr(s, cap);
    let realized = s.iter().filter(|e| !e.1 && e.0 > r.threshold).count();
    ensure(
        r.tpr == tp as f64 / p as f64 && r.achieved_fpr == fp as f64 / n as f64 && realized == fp,
        || format!("tpr_at_fpr({cap}) {r:?} vs tp={tp} fp={fp}"),
    )
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let caps = [0.0, 0.001, 0.05, 0.1, 0.25, 0.5, 0.9];
    for trial in 0..1000 {
        let s = random_series(&mut rng);
        let cap = caps[trial % caps.len()];
        check_against_oracle(&s, cap).map_err(|e| format!("trial {trial} {s:?}: {e}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 series match, {elapsed:.2?}"))
}

fn hand_values() -> Outcome {
    let ap_set = [(3.0, true), (1.0, true), (2.0, false)];
    let ap = auprc(&to_series(&ap_set)).map_err(|e| e.to_string())?;
    ensure(ap == 5.0 / 6.0 && ap == oracle_auprc(&ap_set), || format!("auprc {ap}"))?;

    let acc_set = [(1.0, false), (3.0, false), (2.0, true), (4.0, true)];
    let acc = balanced_optimal_accuracy(&to_series(&acc_set)).map_err(|e| e.to_string())?;
    ensure(acc == 75.0 && acc == oracle_balanced(&acc_set), || format!("accuracy {acc}"))?;

    let mut tpr_set: Vec<(f64, bool)> = (1..=10).map(|i| (f64::from(i), false)).collect();
    tpr_set.extend([(9.5, true), (10.5, true), (11.0, true)]);
    let s = to_series(&tpr_set);
    let r10 = tpr_at_fpr(&s, 0.10).map_err(|e| e.to_string())?;
    let r0 = tpr_at_fpr(&s, 0.0).map_err(|e| e.to_string())?;
    ensure(
        r10.tpr == 1.0 && oracle_tpr_at_fpr(&tpr_set, 0.10).0 == 3 && r10.threshold > 9.0 && r10.threshold < 9.5,
        || format!("cap 10%: {r10:?}"),
    )?;
    ensure(
        r0.tpr == 2.0 / 3.0 && oracle_tpr_at_fpr(&tpr_set, 0.0).0 == 2 && r0.threshold > 10.0,
        || format!("cap 0%: {r0:?}"),
    )?;
    Ok(format!(
        "auprc=5/6, acc=75.0, tpr@10%={:.1}%, tpr@0%={:.1}%",
        r10.tpr * 100.0,
        r0.tpr * 100.0
    ))
}

// ---------------------------------------------------------------------------

fn gaussian_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Matrix, Vec<Label>) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..n * d).map(|_| normal.sample(rng)).collect();
    let labels = (0..n).map(|_| Label::from(rng.random_bool(0.5))).collect();
    (Matrix::from_vec(n, d, data).unwrap(), labels)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for reg in [Regularizer::None, Regularizer::L2, Regularizer::L1] {
        let cfg = TrainConfig {
            lambda: 0.05,
            regularizer: reg,
            ..TrainConfig::default()
        };
        for point in 0..10 {
            let d = rng.random_range(1..=50);
            let (x, y) = gaussian_problem(&mut rng, 30, d);
            // keep every coordinate at least 1e-3 from the l1 kink
            let w: Vec<f64> = (0..d)
                .map(|_| {
                    let m = rng.random_range(1e-3..1.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let b = rng.random_range(-1.0..1.0);
            let (_, gw, gb) = objective_gradient(&x, &y, &w, b, &cfg);
            let mut analytic = gw.clone();
            analytic.push(gb);
            let mut numeric = Vec::with_capacity(d + 1);
            for i in 0..=d {
                let eval = |delta: f64| {
                    let mut w2 = w.clone();
                    let mut b2 = b;
                    if i < d {
                        w2[i] += delta;
                    } else {
                        b2 += delta;
                    }
                    objective(&x, &y, &w2, b2, &cfg)
                };
                numeric.push((eval(H) - eval(-H)) / (2.0 * H));
            }
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
            let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12);
            worst = worst.max(rel);
            ensure(rel < 1e-4, || format!("{reg:?} point {point}: relative error {rel:e}"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("30 points, worst relative error {worst:.2e}, {elapsed:.2?}"))
}

fn lasso_path() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (200, 20);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    let x = Matrix::from_vec(n, d, data).unwrap();
    let truth = [2.0, -1.5, 1.0];
    let y: Vec<Label> = (0..n)
        .map(|i| {
            let z: f64 = truth.iter().enumerate().map(|(j, t)| t * x.row(i)[j]).sum();
            Label::from(rng.random_bool(1.0 / (1.0 + (-z).exp())))
        })
        .collect();
    let mut norms = Vec::new();
    let mut nnz = Vec::new();
    for lambda in [0.0, 1e-4, 1e-3, 1e-2, 1e-1] {
        let cfg = TrainConfig {
            lambda,
            regularizer: Regularizer::L1,
            epochs: 400,
            learning_rate: 0.05,
            batch_size: 50,
            seed: 3,
        };
        let out = train(&x, &y, &cfg).map_err(|e| e.to_string())?;
        let sw = SparseWeights::from_dense(&out.head.weights, PRUNE_EPS);
        norms.push(sw.l1_norm());
        nnz.push(sw.nnz());
    }
    ensure(norms.windows(2).all(|w| w[1] <= w[0]), || format!("l1 norms {norms:?}"))?;
    ensure(nnz[4] <= nnz[0], || format!("nnz {nnz:?}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    let shown: Vec<String> = norms.iter().map(|v| format!("{v:.3}")).collect();
    Ok(format!("l1 norms [{}], nnz {nnz:?}, {elapsed:.2?}", shown.join(", ")))
}

// ---------------------------------------------------------------------------

/// Serves `backend` over HTTP on an ephemeral port for the life of the process.
fn spawn_backend_server(backend: Arc<dyn LogitBackend>) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, backend_router(backend)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let planted = Arc::new(PlantedLogitBackend::new(PlantedConfig::default()).map_err(|e| e.to_string())?);
    let refusal: Vec<usize> = planted.config().refusal_tokens.iter().map(|t| t.0 as usize).collect();
    let url = spawn_backend_server(planted.clone());
    let http = HttpBackend::connect(&url, None, Duration::from_secs(30)).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let train_set = planted_dataset("train", 500, 500, 1);
    let test_set = planted_dataset("test", 500, 500, 2);
    let train_dump = extract_dataset(&http, &train_set, &dir.path().join("train.bin"), 8, false)
        .map_err(|e| e.to_string())?;
    let test_dump = extract_dataset(&http, &test_set, &dir.path().join("test.bin"), 8, false)
        .map_err(|e| e.to_string())?;
    ensure(train_dump.failures.is_empty() && test_dump.failures.is_empty(), || "extraction failures".into())?;

    let res = train_from_dump(&train_dump.dump, "train", &TrainOptions::default()).map_err(|e| e.to_string())?;
    let scores = score_dump(&res.model, &test_dump.dump).map_err(|e| e.to_string())?;
    let ap = auprc(&scores).map_err(|e| e.to_string())?;
    let tpr1 = tpr_at_fpr(&scores, 0.01).map_err(|e| e.to_string())?.tpr;

    // reference: summed refusal logits, the generator's own separating statistic
    let reference: Vec<(f64, bool)> = (0..test_dump.dump.n_rows())
        .map(|i| {
            let row = test_dump.dump.entry_logits(i);
            let s: f64 = refusal.iter().map(|&t| f64::from(row[t])).sum();
            (s, test_dump.dump.manifest[i].label.is_toxic())
        })
        .collect();
    let ref_ap = oracle_auprc(&reference);
    let ref_tpr = oracle_tpr_at_fpr(&reference, 0.01).0 as f64 / 500.0;

    let elapsed = start.elapsed();
    ensure(ap >= 0.95 && tpr1 >= 0.80, || {
        format!("auprc {ap:.4}, tpr@1% {tpr1:.4} (reference {ref_ap:.4} / {ref_tpr:.4})")
    })?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "auprc {ap:.4} (>= 0.95), tpr@1% {tpr1:.4} (>= 0.80); reference statistic {ref_ap:.4} / {ref_tpr:.4}; {elapsed:.2?}"
    ))
}

fn toy_por() -> Outcome {
    let lex = RefusalLexicon::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_z: f64 = 0.0;
    for i in 0..50 {
        let p = 0.01 + 0.98 * f64::from(i) / 49.0;
        let responses = CategoricalResponseSampler::new(p).map_err(|e| e.to_string())?.sample(1000, &mut rng);
        let est = estimate_por(&responses, &lex).map_err(|e| e.to_string())?;
        let sigma = (p * (1.0 - p) / 1000.0).sqrt();
        worst_z = worst_z.max((est - p).abs() / sigma);
        ensure((est - p).abs() <= 3.0 * sigma, || format!("p={p:.3}: estimate {est}"))?;
    }
    let sampler = CategoricalResponseSampler::new(0.995).map_err(|e| e.to_string())?;
    let mut saturated = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if estimate_por(&sampler.sample(100, &mut rng), &lex).map_err(|e| e.to_string())? == 1.0 {
            saturated += 1;
        }
    }
    ensure(saturated >= 1, || "no seed saturated at 1.0".into())?;
    Ok(format!("50 prompts within 3 sigma (worst {worst_z:.2}); p=0.995 saturates in {saturated}/20 seeds"))
}

fn determinism() -> Outcome {
    let backend = PlantedLogitBackend::new(PlantedConfig {
        vocab_size: 64,
        refusal_tokens: vec![(3, "Sorry".into()), (17, "Unable".into())],
        ..PlantedConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let d = planted_dataset("det", 40, 40, 9);
    let records: Vec<LogitRecord> = d
        .items
        .iter()
        .map(|p| muli::acquisition::fetch_first_token_logits(&backend, p))
        .collect::<muli::Result<_>>()
        .map_err(|e| e.to_string())?;
    let dump = LogitDump::from_records(&records).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let dump_path = dir.path().join("d.bin");
    write_dump(&dump, &dump_path).map_err(|e| e.to_string())?;
    let back = read_logit_dump(&dump_path).map_err(|e| e.to_string())?;
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(
        bits(&back.matrix) == bits(&dump.matrix) && back.manifest == dump.manifest && back.header == dump.header,
        || "dump round trip differs".into(),
    )?;

    let opts = TrainOptions {
        config: TrainConfig {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 16,
            seed: 42,
            ..TrainConfig::default()
        },
        ..TrainOptions::default()
    };
    let a = train_from_dump(&dump, "det", &opts).map_err(|e| e.to_string())?.model;
    let b = train_from_dump(&back, "det", &opts).map_err(|e| e.to_string())?.model;
    let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    save_model(&a, &pa).map_err(|e| e.to_string())?;
    save_model(&b, &pb).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    ensure(ba == bb, || "same seed produced different model files".into())?;

    let loaded = load_model(&pa).map_err(|e| e.to_string())?;
    ensure(loaded == a, || "loaded model differs".into())?;
    let pc = dir.path().join("c.json");
    save_model(&loaded, &pc).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&pc).unwrap() == ba, || "re-saved model file differs".into())?;
    for i in 0..dump.n_rows() {
        let (x, y) = (
            a.score_f32(dump.entry_logits(i)).unwrap(),
            loaded.score_f32(dump.entry_logits(i)).unwrap(),
        );
        ensure(x.to_bits() == y.to_bits(), || format!("row {i}: score {x} vs {y}"))?;
    }
    Ok(format!("model files bit-identical ({} bytes), dump and model round trips exact", ba.len()))
}

fn rank_model(w: &[f64]) -> DetectorModel {
    DetectorModel {
        weights: SparseWeights::from_dense(w, PRUNE_EPS),
        bias: 0.0,
        transform: TransformSpec::new(TransformKind::Logit),
        vocab_size: w.len(),
        backend_fingerprint: String::new(),
        thresholds: BTreeMap::new(),
        training_meta: TrainingMeta {
            dataset: String::new(),
            config: TrainConfig::default(),
            final_loss: 0.0,
            n_train: 0,
            n_positive: 0,
            notes: BTreeMap::new(),
        },
    }
}

fn rank_diagnostic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..500 {
        let n = rng.random_range(1..=100);
        let w: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => f64::from(rng.random_range(-3..=3)),
                2 => rng.random_range(-1e-8..1e-8),
                _ => rng.random_range(-2.0..2.0),
            })
            .collect();
        // pruned entries count as zero
        let dense: Vec<f64> = w.iter().map(|&v| if v.abs() < PRUNE_EPS { 0.0 } else { v }).collect();
        let ids: Vec<u32> = (0..n as u32).collect();
        let ranks = weight_ranks(&rank_model(&w), &ids).map_err(|e| e.to_string())?;
        for (i, &wi) in dense.iter().enumerate() {
            let expect = dense.iter().filter(|&&v| v > wi).count() as f64 / n as f64;
            ensure(ranks[&(i as u32)] == expect, || format!("trial {trial} token {i}"))?;
        }
    }
    Ok("500 random weight vectors match enumeration".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("metric-oracle equivalence", metric_oracle),
        ("hand-derived metric values", hand_values),
        ("gradient correctness", gradient_check),
        ("lasso behavior", lasso_path),
        ("end-to-end synthetic pipeline", end_to_end),
        ("toy-model consistency", toy_por),
        ("determinism and round trips", determinism),
        ("rank diagnostic", rank_diagnostic),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
