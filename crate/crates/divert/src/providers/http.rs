//! Networked provider speaking the OpenAI-compatible chat-completions and
//! embeddings JSON protocols. Tool calls travel as plain text (the engine's
//! fenced directive convention), not as the function-calling wire format.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Deserialize;

use crate::core::TokenUsage;

use super::{
    run_attempts, AttemptOutcome, ChatProvider, ChatRequest, ChatResult, Embedder, ProviderError,
    RoleTag, UnitVector,
};

/// Connection settings for an OpenAI-compatible endpoint. `models` maps each
/// ledger role to the model name used for its calls.
#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub models: BTreeMap<RoleTag, String>,
    pub embedding_model: String,
    pub timeout: Duration,
}

impl HttpProviderConfig {
    fn model_for(&self, tag: RoleTag) -> Result<&str, ProviderError> {
        self.models
            .get(&tag)
            .map(String::as_str)
            .ok_or_else(|| ProviderError::Config(format!("no model configured for role {tag:?}")))
    }
}

pub struct HttpChatProvider {
    config: HttpProviderConfig,
    client: reqwest::blocking::Client,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl From<WireUsage> for TokenUsage {
    fn from(u: WireUsage) -> Self {
        TokenUsage::new(u.prompt_tokens, u.completion_tokens)
    }
}

#[derive(Debug, Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingEntry>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingEntry {
    embedding: Vec<f64>,
}

impl HttpChatProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(HttpChatProvider { config, client })
    }

    /// Maps the engine's roles onto the wire: `agent` turns were produced by
    /// the counterpart assistant, tool results become plain user text.
    fn wire_messages(request: &ChatRequest) -> Vec<serde_json::Value> {
        request
            .messages
            .iter()
            .map(|m| {
                let (role, content) = match m.role.as_str() {
                    "tool" => ("user", format!("Tool result: {}", m.content)),
                    other => (other, m.content.clone()),
                };
                serde_json::json!({ "role": role, "content": content })
            })
            .collect()
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value, String> {
        let url = format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path);
        let mut builder = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(format!("http {status}: {text}"));
        }
        response.json().map_err(|e| e.to_string())
    }
}

impl ChatProvider for HttpChatProvider {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResult, ProviderError> {
        request.validate()?;
        let model = self.config.model_for(request.role_tag)?.to_string();
        let body = serde_json::json!({
            "model": model,
            "messages": Self::wire_messages(request),
            "temperature": request.temperature,
            "seed": request.seed,
        });
        run_attempts(request.allowed_attempts(), |_n| {
            match self.post("v1/chat/completions", &body) {
                Ok(value) => match serde_json::from_value::<ChatCompletionResponse>(value) {
                    Ok(parsed) => {
                        let tokens = parsed.usage.map(TokenUsage::from).unwrap_or_default();
                        match parsed
                            .choices
                            .into_iter()
                            .next()
                            .and_then(|c| c.message.content)
                        {
                            Some(content) if !content.is_empty() => {
                                AttemptOutcome::Ok { content, tokens }
                            }
                            _ => AttemptOutcome::Transient {
                                error: "empty completion".into(),
                                tokens,
                            },
                        }
                    }
                    Err(e) => AttemptOutcome::Transient {
                        error: format!("malformed completion response: {e}"),
                        tokens: TokenUsage::zero(),
                    },
                },
                Err(e) => AttemptOutcome::Transient {
                    error: e,
                    tokens: TokenUsage::zero(),
                },
            }
        })
    }
}

pub struct HttpEmbedder {
    provider: HttpChatProvider,
    max_retries: u32,
}

impl HttpEmbedder {
    pub fn new(config: HttpProviderConfig, max_retries: u32) -> Result<Self, ProviderError> {
        Ok(HttpEmbedder {
            provider: HttpChatProvider::new(config)?,
            max_retries,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<UnitVector, ProviderError> {
        let body = serde_json::json!({
            "model": self.provider.config.embedding_model,
            "input": text,
        });
        let result = run_attempts(self.max_retries.max(1), |_n| {
            match self.provider.post("v1/embeddings", &body) {
                Ok(value) => match serde_json::from_value::<EmbeddingsResponse>(value) {
                    Ok(parsed) => match parsed.data.into_iter().next() {
                        Some(entry) => AttemptOutcome::Ok {
                            content: serde_json::to_string(&entry.embedding).unwrap_or_default(),
                            tokens: TokenUsage::zero(),
                        },
                        None => AttemptOutcome::Transient {
                            error: "empty embeddings response".into(),
                            tokens: TokenUsage::zero(),
                        },
                    },
                    Err(e) => AttemptOutcome::Transient {
                        error: format!("malformed embeddings response: {e}"),
                        tokens: TokenUsage::zero(),
                    },
                },
                Err(e) => AttemptOutcome::Transient {
                    error: e,
                    tokens: TokenUsage::zero(),
                },
            }
        })?;
        let raw: Vec<f64> = serde_json::from_str(&result.content)
            .map_err(|e| ProviderError::Config(format!("embedding decode: {e}")))?;
        let dim = raw.len().max(2);
        if text.trim().is_empty() {
            return Ok(UnitVector::basis(dim, 0));
        }
        UnitVector::normalized(raw).ok_or(ProviderError::NotUnitNorm { norm: 0.0 })
    }

    fn dimension(&self) -> usize {
        // determined by the remote model; callers compare vectors pairwise
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ChatMessage;

    #[test]
    fn wire_messages_map_tool_results_to_user_text() {
        let request = ChatRequest::new(
            vec![
                ChatMessage::new("system", "s"),
                ChatMessage::new("assistant", "TOOL lookup_order {\"order_id\":\"o1\"}"),
                ChatMessage::new("tool", "[lookup_order] ok: order o1: status=open"),
            ],
            0.0,
            3,
            RoleTag::Agent,
        );
        let wire = HttpChatProvider::wire_messages(&request);
        assert_eq!(wire[0]["role"], "system");
        assert_eq!(wire[1]["role"], "assistant");
        assert_eq!(wire[2]["role"], "user");
        assert!(wire[2]["content"]
            .as_str()
            .unwrap()
            .starts_with("Tool result:"));
    }

    #[test]
    fn missing_model_configuration_is_reported() {
        let config = HttpProviderConfig {
            endpoint: "http://127.0.0.1:9".into(),
            api_key: None,
            models: BTreeMap::new(),
            embedding_model: "embed".into(),
            timeout: Duration::from_millis(10),
        };
        let provider = HttpChatProvider::new(config).unwrap();
        let request =
            ChatRequest::new(vec![ChatMessage::new("user", "hi")], 0.0, 1, RoleTag::Agent);
        assert!(matches!(
            provider.chat_complete(&request),
            Err(ProviderError::Config(_))
        ));
    }

    #[test]
    fn unreachable_endpoint_exhausts_retries() {
        let mut models = BTreeMap::new();
        models.insert(RoleTag::Agent, "m".to_string());
        let config = HttpProviderConfig {
            endpoint: "http://127.0.0.1:9".into(),
            api_key: None,
            models,
            embedding_model: "embed".into(),
            timeout: Duration::from_millis(50),
        };
        let provider = HttpChatProvider::new(config).unwrap();
        let request =
            ChatRequest::new(vec![ChatMessage::new("user", "hi")], 0.0, 2, RoleTag::Agent);
        match provider.chat_complete(&request) {
            Err(ProviderError::Exhausted { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }
}
