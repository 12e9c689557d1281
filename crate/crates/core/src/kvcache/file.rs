//! `GKVC` cache file.
//!
//! ```text
//! header: magic "GKVC" | version u32 | model_hash u64 | L u32 | block_count u32
//! block:  segment_id u32 | round u32 | position_start u32 | length u32
//!         then for each layer: K [length × d_model] f32, V [length × d_model] f32
//! ```
//!
//! All integers and floats little-endian. Blocks are written in canonical
//! `(segment_id, round)` order. `model_hash` is the FNV-1a hash of the weight
//! file the blocks were computed with.

use std::path::Path;

use super::block::{KvBlock, LayerKv};
use super::store::KvStore;
use crate::error::{Error, Result};
use crate::model::Model;

pub const CACHE_MAGIC: &[u8; 4] = b"GKVC";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn encode_cache(store: &KvStore, model_hash: u64, chunk_len: usize) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + store.token_entries() * 64);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&model_hash.to_le_bytes());
    out.extend_from_slice(&to_u32(chunk_len, "L")?.to_le_bytes());
    out.extend_from_slice(&to_u32(store.len(), "block count")?.to_le_bytes());
    for b in store.all() {
        out.extend_from_slice(&b.segment_id().to_le_bytes());
        out.extend_from_slice(&b.round().to_le_bytes());
        out.extend_from_slice(&to_u32(b.position_start(), "position_start")?.to_le_bytes());
        out.extend_from_slice(&to_u32(b.len(), "length")?.to_le_bytes());
        for layer in b.layers() {
            for v in layer.keys.iter().chain(&layer.values) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_cache(path: &Path, store: &KvStore, model: &Model, chunk_len: usize) -> Result<()> {
    let bytes = encode_cache(store, model.model_hash(), chunk_len)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a cache and checks it was produced by `model`. Returns `(L, store)`.
pub fn load_cache(path: &Path, model: &Model) -> Result<(usize, KvStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(path, &bytes, model)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "{what} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn decode_cache(path: &Path, bytes: &[u8], model: &Model) -> Result<(usize, KvStore)> {
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "GKVC",
        });
    }
    let mut r = Reader {
        path,
        bytes,
        pos: 4,
    };
    let version = r.u32("version")?;
    if version != CACHE_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: CACHE_VERSION,
        });
    }
    let hash = r.u64("model hash")?;
    if hash != model.model_hash() {
        return Err(Error::ModelHashMismatch {
            expected: model.model_hash(),
            found: hash,
        });
    }
    let chunk_len = r.u32("L")? as usize;
    let count = r.u32("block count")?;
    let cfg = model.config();
    let mut store = KvStore::new();
    for i in 0..count {
        let segment_id = r.u32("segment_id")?;
        let round = r.u32("round")?;
        let position_start = r.u32("position_start")? as usize;
        let length = r.u32("length")? as usize;
        let n = length * cfg.d_model;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let what = format!("block {i} layer {l}");
            let keys = r.f32s(n, &what)?;
            let values = r.f32s(n, &what)?;
            layers.push(LayerKv { keys, values });
        }
        if store.contains(segment_id, round) {
            return Err(Error::ShapeInconsistency(format!(
                "duplicate block for segment {segment_id} round {round}"
            )));
        }
        store.put(KvBlock::new(segment_id, round, position_start, cfg.d_model, layers)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::ShapeInconsistency(format!(
            "{} trailing bytes after last block",
            bytes.len() - r.pos
        )));
    }
    Ok((chunk_len, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionKnobs, EncodeMode, ModelConfig};

    fn setup() -> (Model, KvStore) {
        let m = Model::random(ModelConfig::tiny(2, 2, 8), 3).unwrap();
        let mut store = KvStore::new();
        for (seg, toks) in [(1u32, vec![1u32, 2, 3]), (0, vec![9, 8])] {
            let enc = m
                .encode_block(&toks, 0, &[], EncodeMode::Prefill, AttentionKnobs::default())
                .unwrap();
            store.put(KvBlock::new(seg, 0, 0, 8, enc.layers).unwrap());
        }
        (m, store)
    }

    #[test]
    fn roundtrip_bitwise() {
        let (m, store) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gkvc");
        save_cache(&p, &store, &m, 3).unwrap();
        let (l, loaded) = load_cache(&p, &m).unwrap();
        assert_eq!(l, 3);
        assert!(loaded.bit_eq(&store));
        assert_eq!(std::fs::read(&p).unwrap(), encode_cache(&loaded, m.model_hash(), 3).unwrap());
    }

    #[test]
    fn rejects_other_weights() {
        let (m, store) = setup();
        let other = Model::random(*m.config(), 4).unwrap();
        let bytes = encode_cache(&store, m.model_hash(), 3).unwrap();
        assert!(matches!(
            decode_cache(Path::new("c"), &bytes, &other),
            Err(Error::ModelHashMismatch { .. })
        ));
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let (m, store) = setup();
        let bytes = encode_cache(&store, m.model_hash(), 3).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            decode_cache(Path::new("c"), cut, &m),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = b'W';
        assert!(matches!(
            decode_cache(Path::new("c"), &bad, &m),
            Err(Error::BadMagic { .. })
        ));
    }
}
