//! Planted generators and an in-process mock backend.
//!
//! The mock draws each prompt's first-token logits from `N(0, base_std²)`
//! per vocabulary entry, seeded by the prompt text, and shifts the refusal
//! token coordinates by `shift` when the prompt is toxic. Sampled responses
//! start with a first token drawn from the softmax of those logits.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Normal;
use sha2::{Digest, Sha256};

use crate::acquisition::{wire, FirstTokenDistribution, LogitBackend, SamplingConfig};
use crate::datamodel::{vocab_hash, BackendDescriptor, Dataset, Label, LabeledPrompt};
use crate::error::{Error, Result};
use crate::transform::softmax;

/// Prompts containing this marker are treated as toxic by the mock backend.
pub const TOXIC_MARKER: &str = "#toxic";

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub vocab_size: usize,
    /// Refusal token ids and their display strings.
    pub refusal_tokens: Vec<(u32, String)>,
    pub shift: f64,
    pub base_std: f64,
    pub seed: u64,
    /// When set, only the top-k logprobs are returned (partial basis).
    pub top_k: Option<usize>,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            vocab_size: 256,
            refusal_tokens: vec![
                (11, "Sorry".to_string()),
                (42, "I cannot".to_string()),
                (97, "Unable".to_string()),
            ],
            shift: 4.0,
            base_std: 1.0,
            seed: 0,
            top_k: None,
        }
    }
}

pub struct PlantedLogitBackend {
    cfg: PlantedConfig,
    descriptor: BackendDescriptor,
    vocab: Vec<String>,
    calls: AtomicUsize,
    failing: Mutex<HashSet<String>>,
}

fn text_seed(seed: u64, text: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl PlantedLogitBackend {
    pub fn new(cfg: PlantedConfig) -> Result<Self> {
        if cfg.vocab_size == 0 || cfg.base_std.is_nan() || cfg.base_std <= 0.0 {
            return Err(Error::invalid("planted backend needs a vocabulary and a positive spread"));
        }
        if let Some((id, _)) = cfg.refusal_tokens.iter().find(|(id, _)| *id as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "refusal token {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let mut vocab: Vec<String> = (0..cfg.vocab_size).map(|i| format!("tok{i}")).collect();
        for (id, s) in &cfg.refusal_tokens {
            vocab[*id as usize] = s.clone();
        }
        let descriptor = BackendDescriptor {
            endpoint: "mock://planted".into(),
            model_name: format!("planted-shift{}-seed{}", cfg.shift, cfg.seed),
            chat_template_id: "raw".into(),
            vocab_size: cfg.vocab_size,
            vocab_hash: vocab_hash(&vocab),
        };
        Ok(PlantedLogitBackend {
            cfg,
            descriptor,
            vocab,
            calls: AtomicUsize::new(0),
            failing: Mutex::new(HashSet::new()),
        })
    }

    pub fn config(&self) -> &PlantedConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Number of `first_token` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Makes requests for these prompt texts fail with a non-retryable error.
    pub fn set_failing<I: IntoIterator<Item = String>>(&self, texts: I) {
        *self.failing.lock().expect("lock") = texts.into_iter().collect();
    }

    pub fn is_toxic(text: &str) -> bool {
        text.contains(TOXIC_MARKER)
    }

    /// The planted logit vector for `text`.
    pub fn logits_for(&self, text: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(text_seed(self.cfg.seed, text));
        let normal = Normal::new(0.0, self.cfg.base_std).expect("valid std");
        let mut l: Vec<f64> = (0..self.cfg.vocab_size).map(|_| normal.sample(&mut rng)).collect();
        if Self::is_toxic(text) {
            for (id, _) in &self.cfg.refusal_tokens {
                l[*id as usize] += self.cfg.shift;
            }
        }
        l
    }

    fn check_failing(&self, text: &str) -> Result<()> {
        if self.failing.lock().expect("lock").contains(text) {
            return Err(Error::Backend {
                msg: "injected failure".into(),
                retryable: false,
            });
        }
        Ok(())
    }
}

impl LogitBackend for PlantedLogitBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn first_token(&self, prompt: &str) -> Result<FirstTokenDistribution> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.check_failing(prompt)?;
        let l = self.logits_for(prompt);
        match self.cfg.top_k {
            None => Ok(FirstTokenDistribution::Full(l)),
            Some(k) => {
                let lp = crate::transform::log_softmax(&l)?;
                let mut idx: Vec<usize> = (0..lp.len()).collect();
                idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                Ok(FirstTokenDistribution::partial(
                    idx.into_iter().take(k).map(|i| (i as u32, lp[i])).collect(),
                ))
            }
        }
    }

    fn sample(&self, prompt: &str, cfg: &SamplingConfig) -> Result<Vec<String>> {
        cfg.validate()?;
        self.check_failing(prompt)?;
        let scaled: Vec<f64> = self.logits_for(prompt).iter().map(|l| l / cfg.temperature).collect();
        let probs = softmax(&scaled)?;
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::data(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(text_seed(cfg.seed.unwrap_or(self.cfg.seed) ^ 0x5a5a, prompt));
        Ok((0..cfg.k)
            .map(|_| {
                let first = &self.vocab[dist.sample(&mut rng)];
                let refusal = self.cfg.refusal_tokens.iter().any(|(_, s)| s == first);
                let rest = if refusal {
                    "I can't help with that request."
                } else {
                    "here is what you asked for."
                };
                truncate_words(&format!("{first} {rest}"), cfg.max_tokens)
            })
            .collect())
    }
}

fn truncate_words(s: &str, max: usize) -> String {
    s.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}

/// Balanced-or-not dataset whose toxic texts carry [`TOXIC_MARKER`].
pub fn planted_dataset(name: &str, n_benign: usize, n_toxic: usize, seed: u64) -> Dataset {
    let mut items = Vec::with_capacity(n_benign + n_toxic);
    for i in 0..n_benign {
        items.push(LabeledPrompt::new(
            format!("{name}-b{i}"),
            format!("benign prompt {i} of {name} (seed {seed})"),
            Label::Benign,
        ));
    }
    for i in 0..n_toxic {
        items.push(LabeledPrompt::new(
            format!("{name}-t{i}"),
            format!("{TOXIC_MARKER} prompt {i} of {name} (seed {seed})"),
            Label::Toxic,
        ));
    }
    Dataset::new(name, items)
}

/// Two-outcome response sampler with a fixed refusal probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalResponseSampler {
    pub p_refusal: f64,
}

impl CategoricalResponseSampler {
    pub fn new(p_refusal: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_refusal) {
            return Err(Error::invalid(format!("refusal probability {p_refusal} outside [0, 1]")));
        }
        Ok(CategoricalResponseSampler { p_refusal })
    }

    pub fn sample<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<String> {
        (0..k)
            .map(|_| {
                if rng.random_bool(self.p_refusal) {
                    "I'm sorry, but I can't help with that.".to_string()
                } else {
                    "Sure, here you go.".to_string()
                }
            })
            .collect()
    }
}

/// HTTP router speaking the backend protocol on top of any [`LogitBackend`].
pub fn backend_router(backend: Arc<dyn LogitBackend>) -> Router {
    Router::new()
        .route("/v1/info", get(info))
        .route("/v1/first_token", post(first_token))
        .route("/v1/sample", post(sample))
        .with_state(backend)
}

type Shared = Arc<dyn LogitBackend>;

async fn info(State(b): State<Shared>) -> Json<wire::InfoResponse> {
    let d = b.descriptor();
    Json(wire::InfoResponse {
        model_name: d.model_name.clone(),
        chat_template_id: d.chat_template_id.clone(),
        vocab_size: d.vocab_size,
        vocab_hash: d.vocab_hash.clone(),
        server_side_template: true,
    })
}

fn prompt_text(input: &wire::PromptInput) -> std::result::Result<String, Box<Response>> {
    match (&input.messages, &input.prompt) {
        (Some(m), None) if m.len() == 1 && m[0].role == "user" => Ok(m[0].content.clone()),
        (None, Some(p)) => Ok(p.clone()),
        _ => Err(Box::new(
            (StatusCode::BAD_REQUEST, "expected one user message or a prompt").into_response(),
        )),
    }
}

fn backend_error(e: Error) -> Response {
    let code = match &e {
        Error::Backend { .. } => StatusCode::BAD_GATEWAY,
        _ => StatusCode::BAD_REQUEST,
    };
    (code, e.to_string()).into_response()
}

async fn first_token(State(b): State<Shared>, Json(req): Json<wire::FirstTokenRequest>) -> Response {
    let text = match prompt_text(&req.input) {
        Ok(t) => t,
        Err(r) => return *r,
    };
    let res = tokio::task::spawn_blocking(move || b.first_token(&text)).await;
    match res {
        Ok(Ok(FirstTokenDistribution::Full(l))) => Json(wire::FirstTokenResponse {
            logits: Some(l),
            top_logprobs: None,
        })
        .into_response(),
        Ok(Ok(FirstTokenDistribution::Partial { logprobs, .. })) => Json(wire::FirstTokenResponse {
            logits: None,
            top_logprobs: Some(
                logprobs
                    .into_iter()
                    .map(|(id, logprob)| wire::TokenLogprob { id, logprob })
                    .collect(),
            ),
        })
        .into_response(),
        Ok(Err(e)) => backend_error(e),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn sample(State(b): State<Shared>, Json(req): Json<wire::SampleRequest>) -> Response {
    let text = match prompt_text(&req.input) {
        Ok(t) => t,
        Err(r) => return *r,
    };
    let cfg = SamplingConfig {
        k: req.n,
        temperature: req.temperature,
        max_tokens: req.max_tokens,
        seed: req.seed,
    };
    match tokio::task::spawn_blocking(move || b.sample(&text, &cfg)).await {
        Ok(Ok(responses)) => Json(wire::SampleResponse { responses }).into_response(),
        Ok(Err(e)) => backend_error(e),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}
