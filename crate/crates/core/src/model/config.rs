use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Largest position index + 1 that any token may be rotated to.
    pub max_positions: usize,
    pub theta_base: f32,
    pub epsilon: f32,
}

impl ModelConfig {
    /// A `n_layers`-layer model with `n_heads` heads over `d_model` dims, the
    /// byte vocabulary, `d_ff = 2 * d_model` and default rotary settings.
    pub fn tiny(n_layers: usize, n_heads: usize, d_model: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model.checked_div(n_heads).unwrap_or(0),
            d_ff: 2 * d_model,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_positions: 1 << 20,
            theta_base: 10_000.0,
            epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
            if u32::try_from(v).is_err() {
                return Err(Error::InvalidConfig(format!("{name} does not fit in u32")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "d_head must be even for rotary embedding, got {}",
                self.d_head
            )));
        }
        if !(self.theta_base > 0.0 && self.theta_base.is_finite()) {
            return Err(Error::InvalidConfig("theta_base must be positive".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig("epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_is_valid() {
        ModelConfig::tiny(2, 2, 16).validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig::tiny(2, 2, 16);
        c.d_head = 7;
        assert!(c.validate().is_err());
        let c = ModelConfig::tiny(1, 2, 6); // d_head 3 is odd
        assert!(c.validate().is_err());
        let c = ModelConfig::tiny(0, 2, 16);
        assert!(c.validate().is_err());
    }
}
