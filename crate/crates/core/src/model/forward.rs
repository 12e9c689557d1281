//! Block encoding: the single forward primitive behind every topology.
//!
//! A block of new tokens is rotated to consecutive positions starting at
//! `start_position`. Each token attends to every key of the visible blocks
//! (in list order), then causally to the block's own tokens. Visible blocks
//! carry rotated keys, so their positions are already baked in.

use super::Model;
use crate::error::{Error, Result};
use crate::kvcache::{KvBlock, LayerKv};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// K/V only; the last layer's MLP and the output head are skipped.
    Prefill,
    /// K/V plus next-token logits for each position.
    WithLogits,
}

/// Attention softmax knobs: weights become `softmax(scale · s / temperature)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionKnobs {
    pub temperature: f32,
    pub scale: f32,
}

impl Default for AttentionKnobs {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            scale: 1.0,
        }
    }
}

impl AttentionKnobs {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockEncoding {
    pub layers: Vec<LayerKv>,
    /// `[len × vocab]`, present in [`EncodeMode::WithLogits`].
    pub logits: Option<Tensor>,
    /// Query-key pairs scored by one head of one layer.
    pub score_count: u64,
}

/// Closed form of the attention work in one block call: every token scores
/// all visible keys plus its causal prefix.
pub fn block_score_count(len: usize, visible_tokens: usize) -> u64 {
    let len = len as u64;
    len * visible_tokens as u64 + len * (len + 1) / 2
}

impl Model {
    pub fn encode_block(
        &self,
        tokens: &[u32],
        start_position: usize,
        visible: &[&KvBlock],
        mode: EncodeMode,
        knobs: AttentionKnobs,
    ) -> Result<BlockEncoding> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("encode_block needs at least one token".into()));
        }
        knobs.validate()?;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab_size: cfg.vocab_size,
            });
        }
        let last_position = start_position.saturating_add(tokens.len() - 1);
        if last_position >= cfg.max_positions {
            return Err(Error::PositionOverflow {
                position: last_position,
                max_positions: cfg.max_positions,
            });
        }
        for b in visible {
            if b.d_model() != cfg.d_model || b.layers().len() != cfg.n_layers {
                return Err(Error::ShapeInconsistency(format!(
                    "visible block (segment {}, round {}) has {} layers of width {}, model has {} of width {}",
                    b.segment_id(),
                    b.round(),
                    b.layers().len(),
                    b.d_model(),
                    cfg.n_layers,
                    cfg.d_model
                )));
            }
        }

        let len = tokens.len();
        let d = cfg.d_model;
        let w = &self.weights;
        let mut x = Tensor::zeros(vec![len, d]);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(w.token_embedding.row(t as usize));
        }

        let mut layers_out = Vec::with_capacity(cfg.n_layers);
        for (l, lw) in w.layers.iter().enumerate() {
            let h = tensor::rmsnorm_rows(&x, &lw.attn_norm, cfg.epsilon)?;
            let mut q = tensor::matmul(&h, &lw.wq)?;
            let mut k = tensor::matmul(&h, &lw.wk)?;
            let v = tensor::matmul(&h, &lw.wv)?;
            for i in 0..len {
                let pos = start_position + i;
                for head in 0..cfg.n_heads {
                    let span = head * cfg.d_head..(head + 1) * cfg.d_head;
                    tensor::rope_in_place(&mut q.row_mut(i)[span.clone()], pos, &self.inv_freq);
                    tensor::rope_in_place(&mut k.row_mut(i)[span], pos, &self.inv_freq);
                }
            }
            let visible_layers: Vec<&LayerKv> = visible.iter().map(|b| b.layer(l)).collect();
            let attn = attend(
                q.data(),
                k.data(),
                v.data(),
                &visible_layers,
                cfg.n_heads,
                cfg.d_head,
                knobs,
            );
            let attn = Tensor::new(vec![len, d], attn)?;
            let o = tensor::matmul(&attn, &lw.wo)?;
            add_in_place(x.data_mut(), o.data());

            layers_out.push(LayerKv {
                keys: k.into_data(),
                values: v.into_data(),
            });

            let is_last = l + 1 == cfg.n_layers;
            if is_last && mode == EncodeMode::Prefill {
                break;
            }
            let h2 = tensor::rmsnorm_rows(&x, &lw.mlp_norm, cfg.epsilon)?;
            let gate = tensor::matmul(&h2, &lw.w_gate)?;
            let up = tensor::matmul(&h2, &lw.w_up)?;
            let act: Vec<f32> = gate
                .data()
                .iter()
                .zip(up.data())
                .map(|(&g, &u)| silu(g) * u)
                .collect();
            let act = Tensor::new(vec![len, cfg.d_ff], act)?;
            let down = tensor::matmul(&act, &lw.w_down)?;
            add_in_place(x.data_mut(), down.data());
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("encode_block residual stream"));
        }

        let logits = match mode {
            EncodeMode::Prefill => None,
            EncodeMode::WithLogits => {
                let hf = tensor::rmsnorm_rows(&x, &w.final_norm, cfg.epsilon)?;
                Some(tensor::matmul(&hf, &w.lm_head)?)
            }
        };
        let visible_tokens = visible.iter().map(|b| b.len()).sum();
        Ok(BlockEncoding {
            layers: layers_out,
            logits,
            score_count: block_score_count(len, visible_tokens),
        })
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn add_in_place(dst: &mut [f32], src: &[f32]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Multi-head attention for `len` new rows. Keys are scanned in the order:
/// visible blocks as given, then the block's own rows `0..=i`.
///
/// Tiled with a running softmax: a block of query rows walks the keys in
/// fixed tiles, keeping a running max, normalizer and weighted value sum.
/// Tile boundaries are fixed key indices, so a row's result depends only on
/// its query and the keys it sees, not on which rows share its block.
pub(crate) fn attend(
    q: &[f32],
    own_k: &[f32],
    own_v: &[f32],
    visible: &[&LayerKv],
    n_heads: usize,
    d_head: usize,
    knobs: AttentionKnobs,
) -> Vec<f32> {
    let d = n_heads * d_head;
    let len = q.len() / d;
    let visible_tokens: usize = visible.iter().map(|l| l.keys.len() / d).sum();
    let total = visible_tokens + len;
    let inv_sqrt = 1.0 / (d_head as f32).sqrt();
    let knob_factor = knobs.temperature != 1.0 || knobs.scale != 1.0;
    let mut out = vec![0.0f32; len * d];
    let mut keys_t = vec![0.0f32; d_head * total];
    let mut values = vec![0.0f32; total * d_head];
    let mut tile = [0.0f32; KEY_TILE];
    let mut state: Vec<RowState> = (0..QUERY_BLOCK).map(|_| RowState::new(d_head)).collect();

    for head in 0..n_heads {
        let off = head * d_head;
        let rows = visible
            .iter()
            .flat_map(|l| l.keys.chunks_exact(d).zip(l.values.chunks_exact(d)))
            .chain(own_k.chunks_exact(d).zip(own_v.chunks_exact(d)));
        for (j, (k, v)) in rows.enumerate() {
            for c in 0..d_head {
                keys_t[c * total + j] = k[off + c];
            }
            values[j * d_head..(j + 1) * d_head].copy_from_slice(&v[off..off + d_head]);
        }

        for qb in (0..len).step_by(QUERY_BLOCK) {
            let rows = qb..len.min(qb + QUERY_BLOCK);
            for st in state.iter_mut() {
                st.reset();
            }
            let keys_needed = visible_tokens + rows.end;
            for k0 in (0..keys_needed).step_by(KEY_TILE) {
                for (i, st) in rows.clone().zip(state.iter_mut()) {
                    let k1 = (visible_tokens + i + 1).min(k0 + KEY_TILE);
                    if k1 <= k0 {
                        continue;
                    }
                    let s = &mut tile[..k1 - k0];
                    let qh = &q[i * d + off..i * d + off + d_head];
                    head_scores(s, qh, &keys_t[k0..], total);
                    for v in s.iter_mut() {
                        *v *= inv_sqrt;
                        if knob_factor {
                            *v = knobs.scale * *v / knobs.temperature;
                        }
                    }
                    st.absorb(s, &values[k0 * d_head..k1 * d_head]);
                }
            }
            for (i, st) in rows.zip(state.iter()) {
                st.finish(&mut out[i * d + off..i * d + off + d_head]);
            }
        }
    }
    out
}

const QUERY_BLOCK: usize = 32;
const KEY_TILE: usize = 512;
const KEY_BLOCK: usize = 16;

struct RowState {
    max: f32,
    norm: f32,
    acc: Vec<f32>,
}

impl RowState {
    fn new(d_head: usize) -> Self {
        Self {
            max: f32::NEG_INFINITY,
            norm: 0.0,
            acc: vec![0.0; d_head],
        }
    }

    fn reset(&mut self) {
        self.max = f32::NEG_INFINITY;
        self.norm = 0.0;
        self.acc.fill(0.0);
    }

    /// Folds one tile of raw scores (overwritten with weights) and its values.
    fn absorb(&mut self, scores: &mut [f32], values: &[f32]) {
        let new_max = self.max.max(tensor::lane_max(scores));
        let carry = tensor::exp_nonpositive(self.max - new_max);
        for s in scores.iter_mut() {
            *s = tensor::exp_nonpositive(*s - new_max);
        }
        self.norm = self.norm * carry + tensor::lane_sum(scores);
        if carry != 1.0 {
            for a in self.acc.iter_mut() {
                *a *= carry;
            }
        }
        weighted_values(&mut self.acc, scores, values);
        self.max = new_max;
    }

    fn finish(&self, dst: &mut [f32]) {
        for (o, &a) in dst.iter_mut().zip(&self.acc) {
            *o = a / self.norm;
        }
    }
}

/// `row[j] = Σ_c q[c] · keys_t[c·stride + j]`, summed in ascending `c`.
fn head_scores(row: &mut [f32], q: &[f32], keys_t: &[f32], stride: usize) {
    let n = row.len();
    let full = n / KEY_BLOCK * KEY_BLOCK;
    for j0 in (0..full).step_by(KEY_BLOCK) {
        let mut acc = [0.0f32; KEY_BLOCK];
        for (c, &qc) in q.iter().enumerate() {
            let k = &keys_t[c * stride + j0..c * stride + j0 + KEY_BLOCK];
            for l in 0..KEY_BLOCK {
                acc[l] += qc * k[l];
            }
        }
        row[j0..j0 + KEY_BLOCK].copy_from_slice(&acc);
    }
    for (j, r) in row.iter_mut().enumerate().skip(full) {
        let mut acc = 0.0f32;
        for (c, &qc) in q.iter().enumerate() {
            acc += qc * keys_t[c * stride + j];
        }
        *r = acc;
    }
}

/// `dst += Σ_j p[j] · v_j` over `[n × d_head]` values, with keys split across
/// four running sums by `j mod 4` and combined as `(s0 + s1) + (s2 + s3)`.
fn weighted_values(dst: &mut [f32], p: &[f32], values: &[f32]) {
    let dh = dst.len();
    if dh > 64 {
        for (&w, v) in p.iter().zip(values.chunks_exact(dh)) {
            axpy(dst, w, v);
        }
        return;
    }
    let mut acc = [[0.0f32; 64]; 4];
    let mut groups = p.chunks_exact(4).zip(values.chunks_exact(4 * dh));
    for (w, v) in groups.by_ref() {
        for (a, (&wk, vk)) in acc.iter_mut().zip(w.iter().zip(v.chunks_exact(dh))) {
            axpy(&mut a[..dh], wk, vk);
        }
    }
    let done = p.len() / 4 * 4;
    for (a, (&wk, vk)) in acc
        .iter_mut()
        .zip(p[done..].iter().zip(values[done * dh..].chunks_exact(dh)))
    {
        axpy(&mut a[..dh], wk, vk);
    }
    for c in 0..dh {
        dst[c] += (acc[0][c] + acc[1][c]) + (acc[2][c] + acc[3][c]);
    }
}

#[inline]
fn axpy(dst: &mut [f32], alpha: f32, x: &[f32]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_weights, ModelConfig};

    fn model() -> Model {
        let c = ModelConfig::tiny(2, 2, 16);
        Model::new(c, random_weights(&c, 9).unwrap()).unwrap()
    }

    #[test]
    fn single_key_attention_is_identity_on_value() {
        let q = [0.3, -0.7, 0.2, 0.9];
        let k = [0.5, 0.1, -0.4, 0.8];
        let v = [1.5, -2.0, 0.25, 3.0];
        let out = attend(&q, &k, &v, &[], 2, 2, AttentionKnobs::default());
        assert_eq!(out, v);
    }

    #[test]
    fn score_count_closed_form() {
        let m = model();
        let a = m
            .encode_block(&[1, 2, 3], 0, &[], EncodeMode::Prefill, AttentionKnobs::default())
            .unwrap();
        assert_eq!(a.score_count, 6);
        let blk = KvBlock::new(0, 0, 0, 16, a.layers).unwrap();
        let b = m
            .encode_block(&[4, 5], 3, &[&blk], EncodeMode::Prefill, AttentionKnobs::default())
            .unwrap();
        assert_eq!(b.score_count, 2 * 3 + 3);
    }

    #[test]
    fn prefill_and_logits_modes_share_kv() {
        let m = model();
        let toks = [10, 20, 30, 40];
        let p = m
            .encode_block(&toks, 2, &[], EncodeMode::Prefill, AttentionKnobs::default())
            .unwrap();
        let l = m
            .encode_block(&toks, 2, &[], EncodeMode::WithLogits, AttentionKnobs::default())
            .unwrap();
        assert!(p.logits.is_none());
        assert_eq!(l.logits.as_ref().unwrap().shape(), &[4, 259]);
        assert_eq!(p.layers, l.layers);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = model();
        let k = AttentionKnobs::default();
        assert!(matches!(
            m.encode_block(&[259], 0, &[], EncodeMode::Prefill, k),
            Err(Error::TokenOutOfRange { token: 259, .. })
        ));
        assert!(matches!(
            m.encode_block(&[1, 2], (1 << 20) - 1, &[], EncodeMode::Prefill, k),
            Err(Error::PositionOverflow { .. })
        ));
        assert!(m.encode_block(&[], 0, &[], EncodeMode::Prefill, k).is_err());
        let bad_knobs = AttentionKnobs {
            temperature: 0.0,
            scale: 1.0,
        };
        assert!(m.encode_block(&[1], 0, &[], EncodeMode::Prefill, bad_knobs).is_err());
    }

    #[test]
    fn rejects_foreign_block() {
        let m = model();
        let foreign = KvBlock::new(
            0,
            0,
            0,
            8,
            vec![LayerKv {
                keys: vec![0.0; 8],
                values: vec![0.0; 8],
            }],
        )
        .unwrap();
        assert!(matches!(
            m.encode_block(&[1], 1, &[&foreign], EncodeMode::Prefill, AttentionKnobs::default()),
            Err(Error::ShapeInconsistency(_))
        ));
    }
}
