//! First-token logits and sampled responses from an inference backend.
//!
//! Backends implement [`LogitBackend`]. [`HttpBackend`] speaks the JSON
//! protocol in [`wire`]; [`crate::synthetic`] provides in-process backends
//! with planted distributions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::datamodel::{validate_dataset, BackendDescriptor, Dataset, LabeledPrompt, LogitRecord};
use crate::error::{Error, Result};
use crate::ingest::{read_logit_dump, write_dump, LogitDump};

/// Unseen tokens of a partial distribution get `min(logprob) - PARTIAL_FILL_MARGIN`.
pub const PARTIAL_FILL_MARGIN: f64 = 10.0;
pub const RETRY_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            k: 100,
            temperature: 1.0,
            max_tokens: 32,
            seed: None,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_tokens == 0 {
            return Err(Error::invalid("k and max_tokens must be positive"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Distribution over the first response token.
#[derive(Debug, Clone, PartialEq)]
pub enum FirstTokenDistribution {
    /// Raw logits for every vocabulary entry.
    Full(Vec<f64>),
    /// Top-k log-probabilities only; other tokens take `fill_value` when set.
    Partial {
        logprobs: BTreeMap<u32, f64>,
        fill_value: Option<f64>,
    },
}

impl FirstTokenDistribution {
    /// Partial distribution with the standard fill rule.
    pub fn partial(logprobs: BTreeMap<u32, f64>) -> Self {
        let min = logprobs.values().copied().fold(f64::INFINITY, f64::min);
        let fill = if min.is_finite() {
            min - PARTIAL_FILL_MARGIN
        } else {
            -PARTIAL_FILL_MARGIN
        };
        FirstTokenDistribution::Partial {
            logprobs,
            fill_value: Some(fill),
        }
    }

    pub fn is_partial(&self) -> bool {
        matches!(self, FirstTokenDistribution::Partial { .. })
    }

    /// Logit (or logprob for partial) of token `t`.
    pub fn value(&self, t: u32) -> Option<f64> {
        match self {
            FirstTokenDistribution::Full(l) => l.get(t as usize).copied(),
            FirstTokenDistribution::Partial {
                logprobs,
                fill_value,
            } => logprobs.get(&t).copied().or(*fill_value),
        }
    }

    /// Dense vector of length `n`.
    pub fn densify(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            FirstTokenDistribution::Full(l) => {
                if l.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: l.len(),
                    });
                }
                Ok(l.clone())
            }
            FirstTokenDistribution::Partial {
                logprobs,
                fill_value,
            } => {
                let fill = fill_value.ok_or_else(|| Error::data("partial distribution without fill value"))?;
                let mut v = vec![fill; n];
                for (&t, &lp) in logprobs {
                    *v.get_mut(t as usize).ok_or_else(|| {
                        Error::data(format!("token id {t} outside vocabulary of {n}"))
                    })? = lp;
                }
                Ok(v)
            }
        }
    }
}

/// A logprob-capable inference backend.
pub trait LogitBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Distribution over the first response token for `prompt` as the only user turn.
    fn first_token(&self, prompt: &str) -> Result<FirstTokenDistribution>;

    /// `cfg.k` sampled responses.
    fn sample(&self, prompt: &str, cfg: &SamplingConfig) -> Result<Vec<String>>;

    fn fingerprint(&self) -> String {
        self.descriptor().fingerprint()
    }
}

fn with_retry<T>(mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let mut delay = Duration::from_millis(100);
    let mut attempt = 1;
    loop {
        match f() {
            Err(Error::Backend { retryable: true, msg }) if attempt < RETRY_ATTEMPTS => {
                log::warn!("backend call failed (attempt {attempt}): {msg}; retrying");
                std::thread::sleep(delay);
                delay *= 2;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Fetches and densifies the first-token distribution for one prompt.
pub fn fetch_first_token_logits(backend: &dyn LogitBackend, prompt: &LabeledPrompt) -> Result<LogitRecord> {
    if prompt.text.is_empty() {
        return Err(Error::invalid(format!("prompt '{}' is empty", prompt.id)));
    }
    let desc = backend.descriptor();
    let dist = with_retry(|| backend.first_token(&prompt.text))?;
    let dense = dist.densify(desc.vocab_size)?;
    let logits: Vec<f32> = dense.iter().map(|&x| x as f32).collect();
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Backend {
            msg: format!("non-finite logits for prompt '{}'", prompt.id),
            retryable: false,
        });
    }
    Ok(LogitRecord {
        prompt_id: prompt.id.clone(),
        label: prompt.label,
        logits,
        backend_fingerprint: backend.fingerprint(),
        text_sha256: prompt.text_digest(),
        partial: dist.is_partial(),
    })
}

pub fn sample_responses(backend: &dyn LogitBackend, prompt: &str, cfg: &SamplingConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let out = with_retry(|| backend.sample(prompt, cfg))?;
    if out.len() != cfg.k {
        return Err(Error::Backend {
            msg: format!("asked for {} responses, backend returned {}", cfg.k, out.len()),
            retryable: false,
        });
    }
    Ok(out)
}

#[derive(Debug)]
pub struct ExtractReport {
    pub dump: LogitDump,
    pub fetched: usize,
    pub reused: usize,
    /// (prompt_id, error message) for prompts that could not be extracted.
    pub failures: Vec<(String, String)>,
}

/// Runs `f` over `items` with at most `parallelism` workers; results keep input order.
pub fn run_bounded<T: Sync, R: Send>(
    items: &[T],
    parallelism: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..parallelism.max(1).min(items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Extracts one row per dataset item into `out_path`, in dataset order.
///
/// With `resume`, rows already present in an existing dump (same backend,
/// same prompt text) are reused instead of fetched again. The dump is
/// written atomically and covers every successfully extracted prompt.
pub fn extract_dataset(
    backend: &dyn LogitBackend,
    d: &Dataset,
    out_path: &Path,
    parallelism: usize,
    resume: bool,
) -> Result<ExtractReport> {
    if parallelism == 0 {
        return Err(Error::invalid("parallelism must be positive"));
    }
    let report = validate_dataset(d);
    if !report.accepted {
        return Err(Error::data(format!(
            "dataset '{}' rejected: duplicate ids {:?}, empty texts {:?}",
            d.name, report.duplicate_ids, report.empty_texts
        )));
    }
    let desc = backend.descriptor();
    desc.validate()?;
    let fingerprint = backend.fingerprint();

    let mut existing: HashMap<String, LogitRecord> = HashMap::new();
    if resume && out_path.exists() {
        let prev = read_logit_dump(out_path)?;
        if prev.n_rows() > 0 {
            if prev.fingerprint() != fingerprint {
                return Err(Error::FingerprintMismatch {
                    expected: fingerprint,
                    got: prev.fingerprint().to_string(),
                });
            }
            if prev.n_cols() != desc.vocab_size {
                return Err(Error::DimensionMismatch {
                    expected: desc.vocab_size,
                    got: prev.n_cols(),
                });
            }
        }
        existing = prev.records().into_iter().map(|r| (r.prompt_id.clone(), r)).collect();
    }

    let pending: Vec<&LabeledPrompt> = d
        .items
        .iter()
        .filter(|p| {
            existing
                .get(&p.id)
                .is_none_or(|r| r.text_sha256 != p.text_digest())
        })
        .collect();
    let results = run_bounded(&pending, parallelism, |p| fetch_first_token_logits(backend, p));
    let mut fetched: HashMap<&str, LogitRecord> = HashMap::new();
    let mut failures = Vec::new();
    for (p, r) in pending.iter().zip(results) {
        match r {
            Ok(rec) => {
                fetched.insert(p.id.as_str(), rec);
            }
            Err(e) => failures.push((p.id.clone(), e.to_string())),
        }
    }

    let n_fetched = fetched.len();
    let mut records = Vec::with_capacity(d.len());
    let mut reused = 0;
    for p in &d.items {
        if let Some(mut r) = fetched.remove(p.id.as_str()) {
            r.label = p.label;
            records.push(r);
        } else if let Some(mut r) = existing.remove(&p.id) {
            if r.text_sha256 == p.text_digest() {
                r.label = p.label;
                records.push(r);
                reused += 1;
            }
        }
    }
    let dump = if records.is_empty() {
        LogitDump::empty(desc.vocab_size, &fingerprint)
    } else {
        LogitDump::from_records(&records)?
    };
    write_dump(&dump, out_path)?;
    Ok(ExtractReport {
        dump,
        fetched: n_fetched,
        reused,
        failures,
    })
}

/// Renders a single user turn for backends that do not template server-side.
pub fn render_chat_template(template_id: &str, prompt: &str) -> Result<String> {
    match template_id {
        "llama-2" | "llama2" => Ok(format!("[INST] {} [/INST]", prompt.trim())),
        "chatml" => Ok(format!(
            "<|im_start|>user\n{prompt}<|im_end|>\n<|im_start|>assistant\n"
        )),
        "llama-3" | "llama3" => Ok(format!(
            "<|start_header_id|>user<|end_header_id|>\n\n{prompt}<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\n"
        )),
        "raw" => Ok(prompt.to_string()),
        other => Err(Error::invalid(format!("unknown chat template '{other}'"))),
    }
}

/// JSON shapes of the HTTP backend protocol.
pub mod wire {
    use serde::{Deserialize, Serialize};

    /// `GET /v1/info`
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct InfoResponse {
        pub model_name: String,
        pub chat_template_id: String,
        pub vocab_size: usize,
        pub vocab_hash: String,
        /// Whether the server applies the chat template to `messages`.
        #[serde(default)]
        pub server_side_template: bool,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ChatMessage {
        pub role: String,
        pub content: String,
    }

    /// Either `messages` (server-side templating) or an already rendered `prompt`.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct PromptInput {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub messages: Option<Vec<ChatMessage>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub prompt: Option<String>,
    }

    /// `POST /v1/first_token`
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct FirstTokenRequest {
        #[serde(flatten)]
        pub input: PromptInput,
        pub max_tokens: usize,
        /// Ask for the full vocabulary rather than top-k.
        pub full_logits: bool,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct TokenLogprob {
        pub id: u32,
        pub logprob: f64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct FirstTokenResponse {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub logits: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub top_logprobs: Option<Vec<TokenLogprob>>,
    }

    /// `POST /v1/sample`
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SampleRequest {
        #[serde(flatten)]
        pub input: PromptInput,
        pub n: usize,
        pub temperature: f64,
        pub max_tokens: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct SampleResponse {
        pub responses: Vec<String>,
    }
}

/// Client for the JSON protocol in [`wire`].
pub struct HttpBackend {
    agent: ureq::Agent,
    api_key: Option<String>,
    descriptor: BackendDescriptor,
    server_side_template: bool,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("descriptor", &self.descriptor)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("server_side_template", &self.server_side_template)
            .finish()
    }
}

impl HttpBackend {
    /// Queries `/v1/info` and builds the descriptor.
    pub fn connect(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let endpoint = endpoint.trim_end_matches('/').to_string();
        let mut backend = HttpBackend {
            agent,
            api_key,
            descriptor: BackendDescriptor {
                endpoint,
                model_name: String::new(),
                chat_template_id: String::new(),
                vocab_size: 0,
                vocab_hash: String::new(),
            },
            server_side_template: false,
        };
        let info: wire::InfoResponse = with_retry(|| backend.get_json("/v1/info"))?;
        if info.vocab_size == 0 {
            return Err(Error::Backend {
                msg: "backend reports an empty vocabulary".into(),
                retryable: false,
            });
        }
        backend.descriptor.model_name = info.model_name;
        backend.descriptor.chat_template_id = info.chat_template_id;
        backend.descriptor.vocab_size = info.vocab_size;
        backend.descriptor.vocab_hash = info.vocab_hash;
        backend.server_side_template = info.server_side_template;
        if !backend.server_side_template {
            render_chat_template(&backend.descriptor.chat_template_id, "")?;
        }
        Ok(backend)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.descriptor.endpoint, path)
    }

    fn input(&self, prompt: &str) -> Result<wire::PromptInput> {
        Ok(if self.server_side_template {
            wire::PromptInput {
                messages: Some(vec![wire::ChatMessage {
                    role: "user".into(),
                    content: prompt.to_string(),
                }]),
                prompt: None,
            }
        } else {
            wire::PromptInput {
                messages: None,
                prompt: Some(render_chat_template(&self.descriptor.chat_template_id, prompt)?),
            }
        })
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T> {
        let mut req = self.agent.get(self.url(path));
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        Self::decode(req.call())
    }

    fn post_json<B: Serialize, T: serde::de::DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let mut req = self.agent.post(self.url(path));
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        Self::decode(req.send_json(body))
    }

    fn decode<T: serde::de::DeserializeOwned>(
        res: std::result::Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T> {
        let mut resp = res.map_err(|e| Error::Backend {
            msg: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Error::Backend {
                msg: format!("HTTP {status}: {}", body.chars().take(200).collect::<String>()),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        resp.body_mut().read_json::<T>().map_err(|e| Error::Backend {
            msg: format!("malformed backend response: {e}"),
            retryable: false,
        })
    }
}

impl LogitBackend for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn first_token(&self, prompt: &str) -> Result<FirstTokenDistribution> {
        let req = wire::FirstTokenRequest {
            input: self.input(prompt)?,
            max_tokens: 1,
            full_logits: true,
        };
        let resp: wire::FirstTokenResponse = self.post_json("/v1/first_token", &req)?;
        match (resp.logits, resp.top_logprobs) {
            (Some(l), _) => Ok(FirstTokenDistribution::Full(l)),
            (None, Some(top)) if !top.is_empty() => Ok(FirstTokenDistribution::partial(
                top.into_iter().map(|t| (t.id, t.logprob)).collect(),
            )),
            _ => Err(Error::Backend {
                msg: "backend returned neither logits nor top_logprobs".into(),
                retryable: false,
            }),
        }
    }

    fn sample(&self, prompt: &str, cfg: &SamplingConfig) -> Result<Vec<String>> {
        let req = wire::SampleRequest {
            input: self.input(prompt)?,
            n: cfg.k,
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            seed: cfg.seed,
        };
        let resp: wire::SampleResponse = self.post_json("/v1/sample", &req)?;
        Ok(resp.responses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_fill_rule() {
        let lp: BTreeMap<u32, f64> = [(1, -0.5), (3, -2.0)].into();
        let d = FirstTokenDistribution::partial(lp);
        assert!(d.is_partial());
        let v = d.densify(5).unwrap();
        assert_eq!(v, vec![-12.0, -0.5, -12.0, -2.0, -12.0]);
        assert_eq!(d.value(4), Some(-12.0));
        let bad = FirstTokenDistribution::partial([(9, -1.0)].into());
        assert!(bad.densify(5).is_err());
        let no_fill = FirstTokenDistribution::Partial {
            logprobs: [(0, -1.0)].into(),
            fill_value: None,
        };
        assert_eq!(no_fill.value(1), None);
    }

    #[test]
    fn sampling_config_validation() {
        assert!(SamplingConfig::default().validate().is_ok());
        for cfg in [
            SamplingConfig { k: 0, ..Default::default() },
            SamplingConfig { temperature: 0.0, ..Default::default() },
            SamplingConfig { max_tokens: 0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn templates() {
        assert_eq!(render_chat_template("llama-2", "Hi").unwrap(), "[INST] Hi [/INST]");
        assert_eq!(render_chat_template("raw", "Hi").unwrap(), "Hi");
        assert!(render_chat_template("chatml", "Hi").unwrap().ends_with("assistant\n"));
        assert!(render_chat_template("nope", "Hi").is_err());
    }

    #[test]
    fn bounded_runner_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        let out = run_bounded(&items, 4, |&i| {
            std::thread::sleep(Duration::from_micros((37 - i as u64) * 50));
            i * 2
        });
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        assert!(run_bounded(&Vec::<u8>::new(), 3, |&x| x).is_empty());
    }

    #[test]
    fn retry_gives_up_after_three() {
        let mut calls = 0;
        let r: Result<()> = with_retry(|| {
            calls += 1;
            Err(Error::Backend {
                msg: "down".into(),
                retryable: true,
            })
        });
        assert!(r.is_err());
        assert_eq!(calls, RETRY_ATTEMPTS);
        let mut calls = 0;
        let _: Result<()> = with_retry(|| {
            calls += 1;
            Err(Error::Backend {
                msg: "bad request".into(),
                retryable: false,
            })
        });
        assert_eq!(calls, 1);
    }
}
