//! Chat-completion and embedding capabilities behind uniform traits, with a
//! networked OpenAI-compatible client and deterministic seeded mocks.

pub mod embed;
pub mod http;
pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::TokenUsage;

pub use embed::HashedBowEmbedder;
pub use http::{HttpChatProvider, HttpEmbedder, HttpProviderConfig};
pub use mock::{ChargingRule, FlakyChatProvider, MockChatProvider, MockResponder};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider failed after {attempts} attempt(s): {last_error}")]
    Exhausted {
        attempts: u32,
        last_error: String,
        /// Usage accumulated over the failed attempts; still real cost.
        tokens: TokenUsage,
    },
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("vector is not unit norm (|v| = {norm})")]
    NotUnitNorm { norm: f64 },
    #[error("provider configuration error: {0}")]
    Config(String),
}

/// Which ledger bucket a call's tokens are attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleTag {
    Agent,
    User,
    Junction,
    Candidate,
    Judge,
}

/// One (role, content) entry of a chat request. Roles use the wire-neutral
/// names `system` / `user` / `assistant` / `tool`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage {
            role: role.into(),
            content: content.into(),
        }
    }
}

/// A chat-completion request.
///
/// `seed` is the requesting execution's random seed; deterministic providers
/// derive phrasing from it and OpenAI-compatible endpoints receive it as the
/// sampling seed. `sample_nonce` distinguishes independent samples drawn
/// from the same prompt (candidate k of K, branch attempt b). Deterministic
/// providers fold both into their entropy; calls that must replay
/// identically across resumed executions use nonce 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_retries: u32,
    pub role_tag: RoleTag,
    pub seed: u64,
    pub sample_nonce: u64,
}

impl ChatRequest {
    pub fn new(
        messages: Vec<ChatMessage>,
        temperature: f64,
        max_retries: u32,
        role_tag: RoleTag,
    ) -> Self {
        ChatRequest {
            messages,
            temperature,
            max_retries,
            role_tag,
            seed: 0,
            sample_nonce: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_nonce(mut self, nonce: u64) -> Self {
        self.sample_nonce = nonce;
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Retry budget as total allowed attempts, clamped to at least one.
    pub fn allowed_attempts(&self) -> u32 {
        self.max_retries.max(1)
    }
}

/// A chat-completion result. `tokens` accumulates usage over every attempt,
/// including failed ones; `attempts` never exceeds the retry budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResult {
    pub content: String,
    pub tokens: TokenUsage,
    pub attempts: u32,
}

pub trait ChatProvider: Send + Sync {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResult, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<UnitVector, ProviderError>;
    fn dimension(&self) -> usize;
}

const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A fixed-length real vector with Euclidean norm 1 (within 1e-6).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn from_components(components: Vec<f64>) -> Result<Self, ProviderError> {
        let norm = components.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(ProviderError::NotUnitNorm { norm });
        }
        Ok(UnitVector(components))
    }

    /// L2-normalizes a raw vector; `None` for the zero vector.
    pub fn normalized(raw: Vec<f64>) -> Option<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(UnitVector(raw.into_iter().map(|x| x / norm).collect()))
    }

    /// Standard basis vector e_{axis}.
    pub fn basis(dimension: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dimension];
        v[axis] = 1.0;
        UnitVector(v)
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }
}

/// Inner product of two unit vectors; symmetric, in [-1, 1] up to float noise.
pub fn cosine_similarity(a: &UnitVector, b: &UnitVector) -> Result<f64, ProviderError> {
    if a.dimension() != b.dimension() {
        return Err(ProviderError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    Ok(a.components()
        .iter()
        .zip(b.components())
        .map(|(x, y)| x * y)
        .sum())
}

/// FNV-1a 64-bit over concatenated parts, finished with a splitmix64
/// avalanche (raw FNV's low bits correlate across nearby inputs, which
/// would bias modulo-based variant picks). Stable across platforms and
/// runs; the deterministic providers derive all of their entropy from it.
pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator keeps ("ab","c") distinct from ("a","bc")
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

pub(crate) fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

pub(crate) fn request_fingerprint(provider_seed: u64, request: &ChatRequest) -> u64 {
    let mut parts: Vec<&[u8]> = Vec::with_capacity(request.messages.len() * 2 + 4);
    let provider_seed_bytes = provider_seed.to_le_bytes();
    let request_seed_bytes = request.seed.to_le_bytes();
    let nonce_bytes = request.sample_nonce.to_le_bytes();
    parts.push(&provider_seed_bytes);
    parts.push(&request_seed_bytes);
    parts.push(&nonce_bytes);
    for m in &request.messages {
        parts.push(m.role.as_bytes());
        parts.push(m.content.as_bytes());
    }
    stable_hash(&parts)
}

/// Outcome of a single transport attempt.
pub(crate) enum AttemptOutcome {
    Ok { content: String, tokens: TokenUsage },
    Transient { error: String, tokens: TokenUsage },
}

/// Runs up to `allowed_attempts` attempts, accumulating token usage across
/// all of them (failed attempts are real cost and still count).
pub(crate) fn run_attempts(
    allowed_attempts: u32,
    mut attempt: impl FnMut(u32) -> AttemptOutcome,
) -> Result<ChatResult, ProviderError> {
    let mut tokens = TokenUsage::zero();
    let mut last_error = String::new();
    for n in 1..=allowed_attempts {
        match attempt(n) {
            AttemptOutcome::Ok { content, tokens: t } => {
                return Ok(ChatResult {
                    content,
                    tokens: tokens.saturating_add(t),
                    attempts: n,
                });
            }
            AttemptOutcome::Transient { error, tokens: t } => {
                tokens = tokens.saturating_add(t);
                last_error = error;
            }
        }
    }
    Err(ProviderError::Exhausted {
        attempts: allowed_attempts,
        last_error,
        tokens,
    })
}
