//! The single path for model calls: prompt rendering, structured output with
//! repair retries, embeddings and the audit transcript.

pub mod provider;
pub mod schema;
pub mod template;
pub mod transcript;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::kb::embedding::{EmbeddingError, EmbeddingVector};
pub use provider::{
    ChatProvider, ChatRequest, ChatResponse, FixtureProvider, HttpProvider, ScriptedProvider,
};
pub use schema::{FieldFailure, FieldSpec, FieldType, Schema, SchemaViolation};
pub use template::{render_fragment, render_prompt, render_text, vars, PromptBundle};
pub use transcript::{AuditLog, ChatRecord, SubprocessRecord, TranscriptRecord};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template placeholder {{{0}}} has no binding")]
    UnboundPlaceholder(String),
    #[error("provider did not answer within {0:?}")]
    ProviderTimeout(Duration),
    #[error("provider error: {0}")]
    Provider(String),
    #[error(transparent)]
    SchemaViolation(#[from] SchemaViolation),
    #[error("no recorded response for template {template_id} (replay key {replay_key})")]
    TranscriptMiss {
        template_id: String,
        replay_key: String,
    },
    #[error("transcript error: {0}")]
    Transcript(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpOpenaiCompatible,
    FixtureReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub provider: ProviderKind,
    pub model_name: String,
    pub temperature: f64,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::FixtureReplay,
            model_name: "gpt-4o".into(),
            temperature: 0.0,
            timeout: Duration::from_secs(120),
            max_retries: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::Config(format!(
                "temperature {} is outside [0, 2]",
                self.temperature
            )));
        }
        if self.timeout.is_zero() {
            return Err(LlmError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Token totals across all calls made through one gateway.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub chat_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub embedding_calls: u64,
    pub embedding_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens + self.embedding_tokens
    }
}

#[derive(Debug, Default)]
struct UsageCounters {
    chat_calls: AtomicU64,
    prompt: AtomicU64,
    completion: AtomicU64,
    embedding_calls: AtomicU64,
    embedding_tokens: AtomicU64,
}

/// Output of [`Gateway::chat_complete`].
#[derive(Debug, Clone, PartialEq)]
pub enum ChatOutput {
    Text(String),
    Structured(Value),
}

#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    config: ModelConfig,
    sinks: Vec<Arc<AuditLog>>,
    usage: Arc<UsageCounters>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.name())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>, config: ModelConfig) -> Self {
        Self {
            provider,
            config,
            sinks: Vec::new(),
            usage: Arc::default(),
        }
    }

    /// A gateway writing to one more audit log, with fresh usage counters.
    pub fn with_audit(&self, log: Arc<AuditLog>) -> Self {
        let mut sinks = self.sinks.clone();
        sinks.push(log);
        Self {
            provider: Arc::clone(&self.provider),
            config: self.config.clone(),
            sinks,
            usage: Arc::default(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn with_temperature(&self, temperature: f64) -> Self {
        let mut g = self.clone();
        g.config.temperature = temperature;
        g
    }

    pub fn usage(&self) -> TokenUsage {
        let u = &self.usage;
        TokenUsage {
            chat_calls: u.chat_calls.load(Ordering::Relaxed),
            prompt_tokens: u.prompt.load(Ordering::Relaxed),
            completion_tokens: u.completion.load(Ordering::Relaxed),
            embedding_calls: u.embedding_calls.load(Ordering::Relaxed),
            embedding_tokens: u.embedding_tokens.load(Ordering::Relaxed),
        }
    }

    /// Appends a record to every audit log.
    pub fn record(&self, record: &TranscriptRecord) -> Result<(), LlmError> {
        for sink in &self.sinks {
            sink.append(record)?;
        }
        Ok(())
    }

    fn call(
        &self,
        bundle: &PromptBundle,
        user: String,
        schema_id: Option<&str>,
        attempt: u32,
    ) -> Result<String, LlmError> {
        let request = ChatRequest {
            template_id: bundle.template_id.clone(),
            system: bundle.system.clone(),
            user,
            model: self.config.model_name.clone(),
            temperature: self.config.temperature,
            schema_id: schema_id.map(str::to_string),
            timeout: self.config.timeout,
        };
        log::debug!("chat {} attempt {attempt}", request.template_id);
        let response = self.provider.chat(&request)?;
        self.usage.chat_calls.fetch_add(1, Ordering::Relaxed);
        self.usage
            .prompt
            .fetch_add(response.prompt_tokens, Ordering::Relaxed);
        self.usage
            .completion
            .fetch_add(response.completion_tokens, Ordering::Relaxed);
        self.record(&TranscriptRecord::Chat(ChatRecord {
            template_id: request.template_id.clone(),
            request_hash: request.request_hash(),
            replay_key: request.replay_key(),
            model: request.model.clone(),
            temperature: request.temperature,
            schema_id: request.schema_id.clone(),
            attempt,
            system: request.system,
            user: request.user,
            response: response.text.clone(),
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
        }))?;
        Ok(response.text)
    }

    pub fn chat_text(&self, bundle: &PromptBundle) -> Result<String, LlmError> {
        self.call(bundle, bundle.user.clone(), None, 1)
    }

    /// Requests JSON matching `schema`, retrying up to `max_retries` times with
    /// the diagnostics appended to the original prompt.
    pub fn chat_structured(
        &self,
        bundle: &PromptBundle,
        schema: &Schema,
    ) -> Result<Value, LlmError> {
        let base = format!(
            "{}\n\nRespond with JSON only, matching this shape: {}",
            bundle.user,
            schema.skeleton()
        );
        let mut user = base.clone();
        let mut attempt = 1;
        loop {
            let text = self.call(bundle, user, Some(&schema.id), attempt)?;
            match schema.validate_text(&text) {
                Ok(value) => return Ok(value),
                Err(violation) if attempt > self.config.max_retries => return Err(violation.into()),
                Err(violation) => {
                    log::warn!(
                        "{} output failed validation: {}",
                        schema.id,
                        violation.diagnostics()
                    );
                    user = format!(
                        "{base}\n\nYour previous output failed validation: {}. Emit only valid output.",
                        violation.diagnostics()
                    );
                    attempt += 1;
                }
            }
        }
    }

    pub fn chat_complete(
        &self,
        bundle: &PromptBundle,
        schema: Option<&Schema>,
    ) -> Result<ChatOutput, LlmError> {
        match schema {
            Some(s) => self.chat_structured(bundle, s).map(ChatOutput::Structured),
            None => self.chat_text(bundle).map(ChatOutput::Text),
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText.into());
        }
        let vector = self.provider.embed(text, self.config.timeout)?;
        let tokens = provider::estimate_tokens(text);
        self.usage.embedding_calls.fetch_add(1, Ordering::Relaxed);
        self.usage
            .embedding_tokens
            .fetch_add(tokens, Ordering::Relaxed);
        self.record(&TranscriptRecord::Embedding(transcript::EmbeddingRecord {
            text_hash: provider::sha256_hex(text),
            chars: text.chars().count(),
            tokens,
        }))?;
        Ok(vector)
    }
}
