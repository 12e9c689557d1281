//! Tiny pre-norm decoder-only transformer: rotary multi-head attention,
//! SiLU-gated MLP, RMSNorm.

mod config;
mod format;
mod forward;
mod weights;

pub use config::ModelConfig;
pub use format::{
    config_hash, encode_header, encode_weights, fnv1a64, load_weights, save_weights,
    HEADER_LEN, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};
pub use forward::{block_score_count, AttentionKnobs, BlockEncoding, EncodeMode};
pub use weights::{random_weights, tensor_layout, LayerWeights, TensorKind, TensorSpec, Weights};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor;

/// Config and weights bundled with derived constants.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    inv_freq: Vec<f64>,
    model_hash: u64,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let bytes = encode_weights(&config, &weights)?;
        if weights.layers.len() != config.n_layers {
            return Err(Error::ShapeInconsistency(format!(
                "{} layer weight sets for {} layers",
                weights.layers.len(),
                config.n_layers
            )));
        }
        Ok(Self {
            inv_freq: tensor::rope_inv_freq(config.d_head, config.theta_base),
            model_hash: fnv1a64(&bytes),
            config,
            weights,
        })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = random_weights(&config, seed)?;
        Self::new(config, weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, weights) = load_weights(path)?;
        Self::new(config, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(path, &self.config, &self.weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// FNV-1a of the serialized weight file; identifies the exact weights.
    pub fn model_hash(&self) -> u64 {
        self.model_hash
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config)
    }
}
