//! Weight tensors and the seeded random generator.
//!
//! Random weights come from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`).
//! Tensors are filled in file order (see [`tensor_layout`]); each value draws
//! one `next_u32()` word `w` and becomes `(2 * (w >> 8) / 2^24 - 1) / sqrt(d_model)`,
//! i.e. uniform on `[-1, 1) / sqrt(d_model)`. Norm gains are fixed at 1.0 and
//! consume no draws.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Matrix,
    NormGain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Serialization order of every tensor for `config`.
pub fn tensor_layout(config: &ModelConfig) -> Vec<TensorSpec> {
    let d = config.d_model;
    let mat = |name: String, r: usize, c: usize| TensorSpec {
        name,
        shape: vec![r, c],
        kind: TensorKind::Matrix,
    };
    let gain = |name: String| TensorSpec {
        name,
        shape: vec![d],
        kind: TensorKind::NormGain,
    };
    let mut specs = vec![mat("token_embedding".into(), config.vocab_size, d)];
    for l in 0..config.n_layers {
        specs.push(gain(format!("layers.{l}.attn_norm")));
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push(mat(format!("layers.{l}.{w}"), d, d));
        }
        specs.push(gain(format!("layers.{l}.mlp_norm")));
        specs.push(mat(format!("layers.{l}.w_gate"), d, config.d_ff));
        specs.push(mat(format!("layers.{l}.w_up"), d, config.d_ff));
        specs.push(mat(format!("layers.{l}.w_down"), config.d_ff, d));
    }
    specs.push(gain("final_norm".into()));
    specs.push(mat("lm_head".into(), d, config.vocab_size));
    specs
}

impl Weights {
    /// Borrowed views in [`tensor_layout`] order.
    pub fn flat_views(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.token_embedding.data()];
        for layer in &self.layers {
            out.push(&layer.attn_norm);
            out.push(layer.wq.data());
            out.push(layer.wk.data());
            out.push(layer.wv.data());
            out.push(layer.wo.data());
            out.push(&layer.mlp_norm);
            out.push(layer.w_gate.data());
            out.push(layer.w_up.data());
            out.push(layer.w_down.data());
        }
        out.push(&self.final_norm);
        out.push(self.lm_head.data());
        out
    }

    /// Rebuilds weights from buffers in [`tensor_layout`] order.
    pub fn from_flat(config: &ModelConfig, buffers: Vec<Vec<f32>>) -> Result<Self> {
        let specs = tensor_layout(config);
        if specs.len() != buffers.len() {
            return Err(Error::ShapeInconsistency(format!(
                "expected {} tensors, got {}",
                specs.len(),
                buffers.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, buf) in specs.iter().zip(buffers) {
            if buf.len() != spec.numel() {
                return Err(Error::ShapeInconsistency(format!(
                    "{} expects {} values, got {}",
                    spec.name,
                    spec.numel(),
                    buf.len()
                )));
            }
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("weight tensor"));
            }
            tensors.push(Tensor::new(spec.shape.clone(), buf)?);
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked against layout");
        let token_embedding = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: next().into_data(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next().into_data(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            });
        }
        let final_norm = next().into_data();
        let lm_head = next();
        Ok(Self {
            token_embedding,
            layers,
            final_norm,
            lm_head,
        })
    }
}

pub fn random_weights(config: &ModelConfig, seed: u64) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (config.d_model as f32).sqrt();
    let buffers = tensor_layout(config)
        .iter()
        .map(|spec| match spec.kind {
            TensorKind::NormGain => vec![1.0; spec.numel()],
            TensorKind::Matrix => (0..spec.numel())
                .map(|_| {
                    let unit = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
                    (2.0 * unit - 1.0) * scale
                })
                .collect(),
        })
        .collect();
    Weights::from_flat(config, buffers)
}
