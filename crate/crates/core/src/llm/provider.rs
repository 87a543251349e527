//! Model backends: an OpenAI-compatible HTTP client, transcript replay and
//! a closure-driven scripted backend for tests.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::transcript::{read_transcript, TranscriptRecord};
use super::LlmError;
use crate::kb::embedding::{hash_embedding, EmbeddingVector};

pub const API_BASE_ENV: &str = "FOAMFLOW_API_BASE";
pub const API_KEY_ENV: &str = "FOAMFLOW_API_KEY";
pub const EMBEDDING_MODEL: &str = "text-embedding-3-small";

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub template_id: String,
    pub system: String,
    pub user: String,
    pub model: String,
    pub temperature: f64,
    pub schema_id: Option<String>,
    pub timeout: Duration,
}

impl ChatRequest {
    fn digest(&self, with_model: bool) -> String {
        let mut h = Sha256::new();
        let model = if with_model { self.model.as_str() } else { "" };
        for part in [
            self.template_id.as_str(),
            self.system.as_str(),
            self.user.as_str(),
            model,
            &format!("{:.4}", self.temperature),
            self.schema_id.as_deref().unwrap_or(""),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex(&h.finalize())
    }

    /// Digest over template id, rendered text, model, temperature and schema id.
    pub fn request_hash(&self) -> String {
        self.digest(true)
    }

    /// Like [`request_hash`](Self::request_hash) but without the model name,
    /// so recorded fixtures replay under any configured model.
    pub fn replay_key(&self) -> String {
        self.digest(false)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn sha256_hex(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Rough token count for backends that do not report usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;

    /// Defaults to the deterministic hash embedding.
    fn embed(&self, text: &str, _timeout: Duration) -> Result<EmbeddingVector, LlmError> {
        Ok(hash_embedding(text)?)
    }

    fn name(&self) -> &'static str;
}

/// OpenAI-compatible `/chat/completions` and `/embeddings` client.
pub struct HttpProvider {
    base: String,
    key: String,
}

impl HttpProvider {
    pub fn new(base: impl Into<String>, key: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            key: key.into(),
        }
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env() -> Result<Self, LlmError> {
        let base = std::env::var(API_BASE_ENV)
            .map_err(|_| LlmError::Config(format!("{API_BASE_ENV} is not set")))?;
        let key = std::env::var(API_KEY_ENV).unwrap_or_default();
        Ok(Self::new(base, key))
    }

    fn post(&self, path: &str, body: &Value, timeout: Duration) -> Result<Value, LlmError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let url = format!("{}/{path}", self.base);
        let mut request = agent.post(&url);
        if !self.key.is_empty() {
            request = request.header("Authorization", &format!("Bearer {}", self.key));
        }
        let response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::ProviderTimeout(timeout),
            other => LlmError::Provider(format!("{url}: {other}")),
        })?;
        response
            .into_body()
            .read_json::<Value>()
            .map_err(|e| LlmError::Provider(format!("{url}: {e}")))
    }
}

impl ChatProvider for HttpProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let v = self.post("chat/completions", &body, request.timeout)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| LlmError::Provider("response has no choices[0].message.content".into()))?
            .to_string();
        let usage = &v["usage"];
        Ok(ChatResponse {
            prompt_tokens: usage["prompt_tokens"].as_u64().unwrap_or_else(|| {
                estimate_tokens(&request.system) + estimate_tokens(&request.user)
            }),
            completion_tokens: usage["completion_tokens"]
                .as_u64()
                .unwrap_or_else(|| estimate_tokens(&text)),
            text,
        })
    }

    fn embed(&self, text: &str, timeout: Duration) -> Result<EmbeddingVector, LlmError> {
        if text.trim().is_empty() {
            return Err(crate::kb::embedding::EmbeddingError::EmptyText.into());
        }
        let v = self.post(
            "embeddings",
            &json!({"model": EMBEDDING_MODEL, "input": text}),
            timeout,
        )?;
        let values = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| LlmError::Provider("response has no data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| LlmError::Provider("embedding contains a non-number".into()))?;
        Ok(EmbeddingVector::new(values)?)
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

/// Replays chat responses recorded in transcript files.
#[derive(Debug, Default)]
pub struct FixtureProvider {
    responses: HashMap<String, (String, u64, u64)>,
}

impl FixtureProvider {
    /// Loads every `*.log` and `*.jsonl` transcript in `dir`, in file-name
    /// order. When a request was recorded twice the first response wins.
    pub fn load(dir: &Path) -> Result<Self, LlmError> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| LlmError::Transcript(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("log" | "jsonl")
                )
            })
            .collect();
        paths.sort();
        let mut provider = Self::default();
        for path in paths {
            provider.extend(read_transcript(&path)?);
        }
        Ok(provider)
    }

    pub fn from_records(records: impl IntoIterator<Item = TranscriptRecord>) -> Self {
        let mut provider = Self::default();
        provider.extend(records);
        provider
    }

    fn extend(&mut self, records: impl IntoIterator<Item = TranscriptRecord>) {
        for record in records {
            if let TranscriptRecord::Chat(c) = record {
                self.responses.entry(c.replay_key).or_insert((
                    c.response,
                    c.prompt_tokens,
                    c.completion_tokens,
                ));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatProvider for FixtureProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let key = request.replay_key();
        match self.responses.get(&key) {
            Some((text, p, c)) => Ok(ChatResponse {
                text: text.clone(),
                prompt_tokens: *p,
                completion_tokens: *c,
            }),
            None => Err(LlmError::TranscriptMiss {
                template_id: request.template_id.clone(),
                replay_key: key,
            }),
        }
    }

    fn name(&self) -> &'static str {
        "fixture"
    }
}

type Script = dyn Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync;

/// Answers each request with a closure; token counts are estimated.
pub struct ScriptedProvider {
    script: Box<Script>,
}

impl ScriptedProvider {
    pub fn new(
        script: impl Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: Box::new(script),
        }
    }
}

impl ChatProvider for ScriptedProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let text = (self.script)(request)?;
        Ok(ChatResponse {
            prompt_tokens: estimate_tokens(&request.system) + estimate_tokens(&request.user),
            completion_tokens: estimate_tokens(&text),
            text,
        })
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(model: &str) -> ChatRequest {
        ChatRequest {
            template_id: "t".into(),
            system: "s".into(),
            user: "u".into(),
            model: model.into(),
            temperature: 0.0,
            schema_id: None,
            timeout: Duration::from_secs(1),
        }
    }

    #[test]
    fn replay_key_ignores_model() {
        assert_ne!(req("a").request_hash(), req("b").request_hash());
        assert_eq!(req("a").replay_key(), req("b").replay_key());
    }

    #[test]
    fn hash_separates_fields() {
        let mut a = req("m");
        a.system = "ab".into();
        a.user = "c".into();
        let mut b = req("m");
        b.system = "a".into();
        b.user = "bc".into();
        assert_ne!(a.request_hash(), b.request_hash());
    }
}
