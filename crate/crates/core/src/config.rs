use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
}

/// Rotary embedding base frequency. Fixed so configs stay minimal.
pub const ROPE_BASE: f64 = 10_000.0;

/// Epsilon inside the RMS normalization.
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    /// The toy configuration used for planted-bug experiments.
    pub fn toy_default(vocab_size: usize) -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            d_model: 128,
            d_head: 16,
            d_mlp: 512,
            vocab_size,
            max_seq: 24,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be positive".into());
        }
        if self.n_heads == 0 || !self.n_heads.is_multiple_of(2) {
            return fail(format!(
                "n_heads must be positive and even, got {}",
                self.n_heads
            ));
        }
        if self.d_head == 0 || self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model ({}) must equal n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_mlp == 0 || self.vocab_size == 0 {
            return fail("d_mlp and vocab_size must be positive".into());
        }
        if self.max_seq < 2 {
            return fail(format!("max_seq must be at least 2, got {}", self.max_seq));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return fail(format!(
                "norm_eps must be a small positive number, got {}",
                self.norm_eps
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.d_mlp;
        self.vocab_size * d * 2 + d + self.n_layers * per_layer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_default_is_valid() {
        ModelConfig::toy_default(20).validate().unwrap();
    }

    #[test]
    fn odd_heads_rejected() {
        let mut c = ModelConfig::toy_default(20);
        c.n_heads = 3;
        c.d_head = 1;
        c.d_model = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn short_max_seq_rejected() {
        let mut c = ModelConfig::toy_default(20);
        c.max_seq = 1;
        assert!(c.validate().is_err());
    }
}
