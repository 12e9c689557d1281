//! `GKVW` weight file.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GKVW"
//! 4       4     version (u32 LE, currently 1)
//! 8       4     n_layers      (u32 LE)
//! 12      4     n_heads       (u32 LE)
//! 16      4     d_model       (u32 LE)
//! 20      4     d_head        (u32 LE)
//! 24      4     d_ff          (u32 LE)
//! 28      4     vocab_size    (u32 LE)
//! 32      4     max_positions (u32 LE)
//! 36      4     theta_base    (f32 LE)
//! 40      4     epsilon       (f32 LE)
//! 44      ...   tensors in `tensor_layout` order, raw f32 LE, row-major
//! ```
//!
//! The config hash is 64-bit FNV-1a over bytes 0..44. The model hash, which
//! cache files record, is FNV-1a over the whole file.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::config::ModelConfig;
use super::weights::{tensor_layout, Weights};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GKVW";
pub const WEIGHTS_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 44;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode_header(config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for v in [
        config.n_layers,
        config.n_heads,
        config.d_model,
        config.d_head,
        config.d_ff,
        config.vocab_size,
        config.max_positions,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&config.theta_base.to_le_bytes());
    out.extend_from_slice(&config.epsilon.to_le_bytes());
    out
}

pub fn config_hash(config: &ModelConfig) -> u64 {
    fnv1a64(&encode_header(config))
}

pub fn encode_weights(config: &ModelConfig, weights: &Weights) -> Result<Vec<u8>> {
    config.validate()?;
    let specs = tensor_layout(config);
    let views = weights.flat_views();
    let mut out = encode_header(config);
    for (spec, view) in specs.iter().zip(&views) {
        if view.len() != spec.numel() {
            return Err(Error::ShapeInconsistency(format!(
                "{} holds {} values, config implies {}",
                spec.name,
                view.len(),
                spec.numel()
            )));
        }
        for v in view.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_weights(path: &Path, config: &ModelConfig, weights: &Weights) -> Result<()> {
    let bytes = encode_weights(config, weights)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, Weights)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(path, &bytes)
}

pub(crate) fn decode_weights(path: &Path, bytes: &[u8]) -> Result<(ModelConfig, Weights)> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "GKVW",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != WEIGHTS_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: WEIGHTS_VERSION,
        });
    }
    let config = ModelConfig {
        n_layers: u32_at(8) as usize,
        n_heads: u32_at(12) as usize,
        d_model: u32_at(16) as usize,
        d_head: u32_at(20) as usize,
        d_ff: u32_at(24) as usize,
        vocab_size: u32_at(28) as usize,
        max_positions: u32_at(32) as usize,
        theta_base: f32_at(36),
        epsilon: f32_at(40),
    };
    config
        .validate()
        .map_err(|e| Error::ShapeInconsistency(format!("header: {e}")))?;

    let mut offset = HEADER_LEN;
    let mut buffers = Vec::new();
    for spec in tensor_layout(&config) {
        let n = spec.numel() * 4;
        let end = offset + n;
        if end > bytes.len() {
            return Err(truncated(format!(
                "tensor {} needs bytes {offset}..{end}, file has {}",
                spec.name,
                bytes.len()
            )));
        }
        buffers.push(
            bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::ShapeInconsistency(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - offset
        )));
    }
    let weights = Weights::from_flat(&config, buffers)?;
    Ok((config, weights))
}
