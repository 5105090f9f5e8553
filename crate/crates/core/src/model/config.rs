use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Filled in from the corpus vocabulary when left at 0 in a run config.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub reduction_factor: usize,
    /// When true the output head reuses the token embedding, lives in the
    /// frozen base and is never averaged.
    pub tie_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            vocab_size: 0,
            max_seq_len: 128,
            reduction_factor: 12,
            tie_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            ));
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if self.reduction_factor == 0 {
            return fail("reduction_factor must be positive".into());
        }
        Ok(())
    }

    /// Adapter bottleneck width, `ceil(d_model / reduction_factor)`.
    pub fn bottleneck(&self) -> usize {
        self.d_model.div_ceil(self.reduction_factor).max(1)
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Approximate multiply-adds ×2 for one token of a forward pass over a
    /// context of `context` tokens. Used for deterministic cost accounting.
    pub fn forward_flops_per_token(&self, context: usize, with_adapter: bool) -> f64 {
        let d = self.d_model as f64;
        let ff = self.d_ff() as f64;
        let b = self.bottleneck() as f64;
        let v = self.vocab_size as f64;
        let per_layer = 2.0 * (4.0 * d * d + 2.0 * d * ff)
            + 4.0 * context as f64 * d
            + if with_adapter { 4.0 * d * b } else { 0.0 };
        self.n_layers as f64 * per_layer + 2.0 * d * v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_rounds_up() {
        let cfg = ModelConfig {
            vocab_size: 100,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.bottleneck(), 6);
        let cfg = ModelConfig { d_model: 768, ..cfg };
        assert_eq!(cfg.bottleneck(), 64);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            n_heads: 5,
            vocab_size: 100,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
