//! Neutral-text providers.
//!
//! Each epoch the trainer refreshes a small set of neutral texts to train the
//! discriminator against. Two providers implement that contract: a corpus
//! sampler that draws from held-out real neutral text (the offline,
//! deterministic default) and a remote LLM client that prompts a
//! chat-completions endpoint with few-shot exemplars from the ballast pool.
//!
//! Both providers count their invocations so ablations can assert, for
//! example, that a run without the ballast mechanism makes zero provider
//! calls.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::ballast::PromptText;
use crate::corpus::{LabeledExample, Source, TokenSequence, Vocabulary, NEUTRAL_CLASS};
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

/// A source of fresh neutral text.
pub trait NeutralProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Returns up to `n` neutral examples for the given prompt. The seed
    /// makes sampler-style providers reproducible; remote providers forward
    /// it as a best-effort determinism hint.
    fn provide_neutral(
        &self,
        prompt: &PromptText,
        n: usize,
        seed: u64,
    ) -> Result<Vec<LabeledExample>>;

    /// How many times `provide_neutral` has been invoked.
    fn call_count(&self) -> usize;
}

fn neutral_example(seq: TokenSequence) -> LabeledExample {
    LabeledExample { seq, label: NEUTRAL_CLASS, source: Source::LlmNeutral }
}

/// Draws neutral texts from a fixed corpus slice, with replacement.
///
/// This stands in for a live LLM in offline runs and tests: it honors the
/// same contract (including call counting) while staying fully deterministic
/// per seed. The prompt is accepted but unused.
pub struct CorpusSamplerProvider {
    sequences: Vec<TokenSequence>,
    calls: AtomicUsize,
}

impl CorpusSamplerProvider {
    pub fn new(sequences: Vec<TokenSequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Config(
                "corpus-sampler provider needs at least one neutral sequence".into(),
            ));
        }
        Ok(CorpusSamplerProvider { sequences, calls: AtomicUsize::new(0) })
    }
}

impl NeutralProvider for CorpusSamplerProvider {
    fn name(&self) -> &str {
        "corpus_sampler"
    }

    fn provide_neutral(
        &self,
        _prompt: &PromptText,
        n: usize,
        seed: u64,
    ) -> Result<Vec<LabeledExample>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut rng = rng_from(seed, &[stream::PROVIDER]);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let seq = self.sequences.choose(&mut rng).expect("non-empty by construction");
            out.push(neutral_example(seq.clone()));
        }
        Ok(out)
    }

    fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Connection settings for the remote chat-completions provider.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RemoteProviderConfig {
    pub endpoint: String,
    pub model: String,
    /// Bearer token; omitted header when `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Additional attempts per request after a transport error or 5xx.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Additional generation rounds when usable completions fall short.
    #[serde(default = "default_topup_rounds")]
    pub topup_rounds: u32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_timeout_secs() -> u64 {
    30
}
fn default_max_retries() -> u32 {
    3
}
fn default_topup_rounds() -> u32 {
    2
}
fn default_max_tokens() -> u32 {
    64
}
fn default_temperature() -> f64 {
    1.0
}

/// Client for an OpenAI-style chat-completions endpoint.
///
/// Completions are tokenized into the run vocabulary (out-of-vocabulary
/// words map to the unknown token); empty or untokenizable completions are
/// skipped with a warning and replaced by top-up rounds. Transport errors
/// and 5xx responses are retried with backoff; 4xx responses fail
/// immediately since retrying cannot fix the request.
pub struct RemoteLlmProvider {
    cfg: RemoteProviderConfig,
    vocab: Arc<Vocabulary>,
    agent: ureq::Agent,
    calls: AtomicUsize,
    requests: AtomicUsize,
}

impl RemoteLlmProvider {
    pub fn new(cfg: RemoteProviderConfig, vocab: Arc<Vocabulary>) -> Result<Self> {
        if cfg.endpoint.is_empty() {
            return Err(Error::Config("remote provider endpoint is empty".into()));
        }
        if cfg.timeout_secs == 0 {
            return Err(Error::Config("remote provider timeout must be positive".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(RemoteLlmProvider {
            cfg,
            vocab,
            agent,
            calls: AtomicUsize::new(0),
            requests: AtomicUsize::new(0),
        })
    }

    /// HTTP requests actually sent, including retries and top-up rounds.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn request_completions(
        &self,
        prompt: &PromptText,
        n: usize,
        seed: u64,
    ) -> Result<Vec<String>> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "n": n,
            "max_tokens": self.cfg.max_tokens,
            "temperature": self.cfg.temperature,
            "seed": seed,
        });
        let mut last_error = String::new();
        let attempts = self.cfg.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * (1 << attempt.min(4))));
            }
            self.requests.fetch_add(1, Ordering::SeqCst);
            let mut req = self.agent.post(&self.cfg.endpoint);
            if let Some(key) = &self.cfg.api_key {
                req = req.header("authorization", format!("Bearer {key}"));
            }
            match req.send_json(&body) {
                Err(e) => {
                    last_error = format!("transport error: {e}");
                    log::warn!("provider request attempt {} failed: {last_error}", attempt + 1);
                }
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        let json: serde_json::Value =
                            resp.body_mut().read_json().map_err(|e| Error::Provider {
                                attempts: attempt + 1,
                                message: format!("unparseable response body: {e}"),
                            })?;
                        return Ok(extract_completions(&json));
                    }
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .unwrap_or_else(|_| "<unreadable body>".into());
                    let message = format!("status {status}: {}", text.chars().take(200).collect::<String>());
                    if (400..500).contains(&status) {
                        // A client error will not improve on retry.
                        return Err(Error::Provider { attempts: attempt + 1, message });
                    }
                    last_error = message;
                    log::warn!("provider request attempt {} failed: {last_error}", attempt + 1);
                }
            }
        }
        Err(Error::Provider { attempts, message: last_error })
    }
}

fn extract_completions(json: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(choices) = json.get("choices").and_then(|c| c.as_array()) {
        for choice in choices {
            let content = choice
                .get("message")
                .and_then(|m| m.get("content"))
                .or_else(|| choice.get("text"))
                .and_then(|c| c.as_str());
            if let Some(text) = content {
                out.push(text.to_string());
            }
        }
    }
    out
}

impl NeutralProvider for RemoteLlmProvider {
    fn name(&self) -> &str {
        "remote_llm"
    }

    fn provide_neutral(
        &self,
        prompt: &PromptText,
        n: usize,
        seed: u64,
    ) -> Result<Vec<LabeledExample>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut out: Vec<LabeledExample> = Vec::with_capacity(n);
        let rounds = self.cfg.topup_rounds + 1;
        for round in 0..rounds {
            if out.len() >= n {
                break;
            }
            let need = n - out.len();
            let completions =
                self.request_completions(prompt, need, seed.wrapping_add(round as u64))?;
            for text in completions {
                let ids = self.vocab.encode(&text);
                if ids.is_empty() {
                    log::warn!("provider returned an empty completion; skipping");
                    continue;
                }
                out.push(neutral_example(TokenSequence::new(ids)?));
            }
        }
        if out.is_empty() {
            return Err(Error::Provider {
                attempts: self.cfg.topup_rounds + 1,
                message: "no usable completions after all top-up rounds".into(),
            });
        }
        if out.len() < n {
            log::warn!(
                "provider returned {} of {} requested neutral texts after top-ups",
                out.len(),
                n
            );
        }
        out.truncate(n);
        Ok(out)
    }

    fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

// ---------------------------------------------------------------------------
// Remote sentence encoder
// ---------------------------------------------------------------------------

/// Embedding backend that defers to a remote encoder endpoint. Sequences are
/// detokenized to text and sent one request per embed call; the response
/// vector is length-normalized like the offline default so cosine geometry
/// stays comparable.
pub struct RemoteEncoderBackend {
    endpoint: String,
    model: String,
    dim: usize,
    vocab: Arc<Vocabulary>,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteEncoderBackend {
    pub fn new(
        endpoint: String,
        model: String,
        dim: usize,
        vocab: Arc<Vocabulary>,
    ) -> Result<Self> {
        if endpoint.is_empty() {
            return Err(Error::Config("remote encoder endpoint is empty".into()));
        }
        if dim < 2 {
            return Err(Error::Config(format!("embedding dimension must be at least 2, got {dim}")));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let api_key = std::env::var("TOXIGAN_API_KEY").ok();
        Ok(RemoteEncoderBackend { endpoint, model, dim, vocab, api_key, agent })
    }
}

impl crate::embedding::EmbeddingBackend for RemoteEncoderBackend {
    fn name(&self) -> &str {
        "remote_encoder"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn embed(&self, seq: &TokenSequence) -> Result<crate::embedding::EmbeddingVector> {
        let text = self.vocab.decode(seq)?;
        let body = serde_json::json!({ "model": self.model, "input": [text] });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| Error::Provider {
            attempts: 1,
            message: format!("encoder transport error: {e}"),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(Error::Provider {
                attempts: 1,
                message: format!("encoder returned status {status}"),
            });
        }
        let json: serde_json::Value = resp.body_mut().read_json().map_err(|e| Error::Provider {
            attempts: 1,
            message: format!("unparseable encoder response: {e}"),
        })?;
        let values: Vec<f64> = json
            .get("data")
            .and_then(|d| d.get(0))
            .and_then(|row| row.get("embedding"))
            .and_then(|e| e.as_array())
            .map(|arr| arr.iter().filter_map(|v| v.as_f64()).collect())
            .unwrap_or_default();
        if values.len() != self.dim {
            return Err(Error::Provider {
                attempts: 1,
                message: format!(
                    "encoder returned {} dimensions, expected {}",
                    values.len(),
                    self.dim
                ),
            });
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Provider { attempts: 1, message: "encoder returned a zero vector".into() });
        }
        crate::embedding::EmbeddingVector::new(values.into_iter().map(|v| v / norm).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt() -> PromptText {
        PromptText { text: "write".into(), template_version: "test".into() }
    }

    fn sampler() -> CorpusSamplerProvider {
        let seqs = (0..5u32)
            .map(|i| TokenSequence::new(vec![4 + i, 5 + i]).unwrap())
            .collect();
        CorpusSamplerProvider::new(seqs).unwrap()
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let p = sampler();
        let a = p.provide_neutral(&prompt(), 8, 7).unwrap();
        let b = p.provide_neutral(&prompt(), 8, 7).unwrap();
        assert_eq!(a, b);
        let c = p.provide_neutral(&prompt(), 8, 8).unwrap();
        assert_ne!(a, c, "different seeds gave identical draws");
        assert_eq!(p.call_count(), 3);
    }

    #[test]
    fn sampler_labels_everything_neutral_from_the_provider() {
        let p = sampler();
        let out = p.provide_neutral(&prompt(), 4, 1).unwrap();
        assert_eq!(out.len(), 4);
        for ex in &out {
            assert_eq!(ex.label, NEUTRAL_CLASS);
            assert_eq!(ex.source, Source::LlmNeutral);
        }
    }

    #[test]
    fn sampler_rejects_an_empty_source() {
        assert!(matches!(CorpusSamplerProvider::new(Vec::new()), Err(Error::Config(_))));
    }

    #[test]
    fn completion_extraction_handles_both_shapes() {
        let chat = serde_json::json!({
            "choices": [
                {"message": {"content": "hello there"}},
                {"message": {"content": "second"}},
            ]
        });
        assert_eq!(extract_completions(&chat), vec!["hello there", "second"]);
        let legacy = serde_json::json!({"choices": [{"text": "plain"}]});
        assert_eq!(extract_completions(&legacy), vec!["plain"]);
        assert!(extract_completions(&serde_json::json!({})).is_empty());
    }

    #[test]
    fn remote_config_rejects_empty_endpoint() {
        let cfg = RemoteProviderConfig {
            endpoint: String::new(),
            model: "m".into(),
            api_key: None,
            timeout_secs: 5,
            max_retries: 0,
            topup_rounds: 0,
            max_tokens: 16,
            temperature: 1.0,
        };
        let vocab = Arc::new(Vocabulary::from_texts(["a b"]));
        assert!(matches!(RemoteLlmProvider::new(cfg, vocab), Err(Error::Config(_))));
    }
}
