//! Deterministic offline embedder: hashed bag-of-words projected into a
//! fixed-dimension space and L2-normalized. Any unit-norm deterministic
//! embedder preserves the argmin/ordering properties the engine relies on.

use super::{stable_hash, Embedder, ProviderError, UnitVector};

pub const DEFAULT_EMBEDDING_DIM: usize = 512;

#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dimension: usize,
}

impl HashedBowEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension >= 2, "embedding dimension must be at least 2");
        Self { dimension }
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM)
    }
}

/// Lowercased alphanumeric runs.
pub(crate) fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

impl Embedder for HashedBowEmbedder {
    fn embed(&self, text: &str) -> Result<UnitVector, ProviderError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            // designated sentinel for empty text
            return Ok(UnitVector::basis(self.dimension, 0));
        }
        // signed feature hashing: bucket collisions cancel in expectation
        let mut counts = vec![0.0f64; self.dimension];
        for token in &tokens {
            let h = stable_hash(&[token.as_bytes()]);
            let slot = (h as usize) % self.dimension;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            counts[slot] += sign;
        }
        if let Some(v) = UnitVector::normalized(counts) {
            return Ok(v);
        }
        // signs cancelled the whole vector; fall back to plain counts
        let mut counts = vec![0.0f64; self.dimension];
        for token in &tokens {
            let slot = (stable_hash(&[token.as_bytes()]) as usize) % self.dimension;
            counts[slot] += 1.0;
        }
        Ok(UnitVector::normalized(counts).expect("nonempty token counts are nonzero"))
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}
