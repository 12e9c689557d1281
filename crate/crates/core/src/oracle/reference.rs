//! Monolithic full-attention evaluator in f64.
//!
//! Shares no kernels with the engine: weights are read element by element,
//! rotary angles come from `exp(-k·ln θ)`, projections loop output-major,
//! and softmax is a separate max / exp / normalize pass per row. Every token
//! is recomputed from scratch under an explicit visibility mask.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    /// Per layer, `[t × d_model]` rotated keys.
    pub keys: Vec<Vec<f64>>,
    /// Per layer, `[t × d_model]` values.
    pub values: Vec<Vec<f64>>,
    /// `[t × vocab]`.
    pub logits: Vec<f64>,
}

/// `mask[i][j]`: token `i` may attend to token `j`.
pub fn full_attention_reference(
    tokens: &[u32],
    positions: &[usize],
    mask: &[Vec<bool>],
    model: &Model,
) -> Result<ReferenceOutput> {
    let t = tokens.len();
    if positions.len() != t || mask.len() != t {
        return Err(Error::InvalidArgument(format!(
            "malformed mask: {t} tokens, {} positions, {} mask rows",
            positions.len(),
            mask.len()
        )));
    }
    for (i, row) in mask.iter().enumerate() {
        if row.len() != t {
            return Err(Error::InvalidArgument(format!(
                "malformed mask: row {i} has {} columns, expected {t}",
                row.len()
            )));
        }
        if !row.iter().any(|&v| v) {
            return Err(Error::InvalidArgument(format!(
                "malformed mask: row {i} sees no keys"
            )));
        }
    }
    let cfg = model.config();
    if let Some(&bad) = tokens.iter().find(|&&x| x as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab_size: cfg.vocab_size,
        });
    }
    let w = model.weights();
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let eps = cfg.epsilon as f64;

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&tok| w.token_embedding.row(tok as usize).iter().map(|&v| v as f64).collect())
        .collect();
    let mut keys_out = Vec::new();
    let mut values_out = Vec::new();

    for lw in &w.layers {
        let h: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &lw.attn_norm, eps)).collect();
        let mut q: Vec<Vec<f64>> = h.iter().map(|r| project(r, &lw.wq)).collect();
        let mut k: Vec<Vec<f64>> = h.iter().map(|r| project(r, &lw.wk)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| project(r, &lw.wv)).collect();
        for i in 0..t {
            for head in 0..cfg.n_heads {
                rotate(&mut q[i][head * dh..(head + 1) * dh], positions[i], cfg.theta_base as f64);
                rotate(&mut k[i][head * dh..(head + 1) * dh], positions[i], cfg.theta_base as f64);
            }
        }

        let mut attn = vec![vec![0.0f64; d]; t];
        let norm_factor = (dh as f64).sqrt();
        for i in 0..t {
            for head in 0..cfg.n_heads {
                let lo = head * dh;
                let visible: Vec<usize> = (0..t).filter(|&j| mask[i][j]).collect();
                let logits: Vec<f64> = visible
                    .iter()
                    .map(|&j| (0..dh).map(|c| q[i][lo + c] * k[j][lo + c]).sum::<f64>() / norm_factor)
                    .collect();
                let peak = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|s| (s - peak).exp()).collect();
                let total: f64 = exps.iter().sum();
                for c in 0..dh {
                    attn[i][lo + c] = visible
                        .iter()
                        .zip(&exps)
                        .map(|(&j, e)| e / total * v[j][lo + c])
                        .sum();
                }
            }
        }
        for i in 0..t {
            let o = project(&attn[i], &lw.wo);
            for c in 0..d {
                x[i][c] += o[c];
            }
            let h2 = norm(&x[i], &lw.mlp_norm, eps);
            let gate = project(&h2, &lw.w_gate);
            let up = project(&h2, &lw.w_up);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = project(&act, &lw.w_down);
            for c in 0..d {
                x[i][c] += down[c];
            }
        }
        keys_out.push(k.concat());
        values_out.push(v.concat());
    }

    let logits = x
        .iter()
        .flat_map(|r| project(&norm(r, &w.final_norm, eps), &w.lm_head))
        .collect();
    Ok(ReferenceOutput {
        keys: keys_out,
        values: values_out,
        logits,
    })
}

fn norm(x: &[f64], gain: &[f32], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, &g)| v / r * g as f64).collect()
}

/// `x · W` for `W` of shape `[in × out]`, computed one output column at a time.
fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let data = w.data();
    (0..cols)
        .map(|j| (0..rows).map(|p| x[p] * data[p * cols + j] as f64).sum())
        .collect()
}

fn rotate(v: &mut [f64], position: usize, theta: f64) {
    let dh = v.len() as f64;
    for pair in 0..v.len() / 2 {
        let freq = (-(2.0 * pair as f64 / dh) * theta.ln()).exp();
        let (s, c) = (position as f64 * freq).sin_cos();
        let (a, b) = (v[2 * pair], v[2 * pair + 1]);
        v[2 * pair] = a * c - b * s;
        v[2 * pair + 1] = a * s + b * c;
    }
}

/// Causal mask over `t` tokens.
pub fn causal_mask(t: usize) -> Vec<Vec<bool>> {
    (0..t).map(|i| (0..t).map(|j| j <= i).collect()).collect()
}

/// Mask over concatenated spans of the given lengths: span `s` sees every
/// token of the spans listed in `reads[s]` plus its own tokens causally.
pub fn segment_mask(lengths: &[usize], reads: &[Vec<usize>]) -> Vec<Vec<bool>> {
    let mut offsets = Vec::with_capacity(lengths.len());
    let mut acc = 0;
    for &l in lengths {
        offsets.push(acc);
        acc += l;
    }
    let mut mask = vec![vec![false; acc]; acc];
    for (s, &len) in lengths.iter().enumerate() {
        for i in 0..len {
            let row = &mut mask[offsets[s] + i];
            for &src in &reads[s] {
                for j in 0..lengths[src] {
                    row[offsets[src] + j] = true;
                }
            }
            for j in 0..=i {
                row[offsets[s] + j] = true;
            }
        }
    }
    mask
}

/// `max |engine - reference| / max |reference|`.
pub fn rel_err(engine: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(engine.len(), reference.len(), "compared buffers differ in length");
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let diff = engine
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b).abs()));
    diff / scale
}
