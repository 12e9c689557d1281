use std::collections::BTreeMap;
use std::sync::Arc;

use super::block::KvBlock;
use crate::error::{Error, Result};

/// Blocks keyed by `(segment_id, round)`. Iteration is always in ascending
/// key order. Stored blocks are immutable and cheaply shareable.
#[derive(Debug, Clone, Default)]
pub struct KvStore {
    blocks: BTreeMap<(u32, u32), Arc<KvBlock>>,
}

impl KvStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a block, replacing any previous block under the same key.
    pub fn put(&mut self, block: KvBlock) {
        self.blocks
            .insert((block.segment_id(), block.round()), Arc::new(block));
    }

    pub fn get(&self, segment_id: u32, round: u32) -> Result<&KvBlock> {
        self.blocks
            .get(&(segment_id, round))
            .map(Arc::as_ref)
            .ok_or(Error::MissingBlock { segment_id, round })
    }

    pub fn contains(&self, segment_id: u32, round: u32) -> bool {
        self.blocks.contains_key(&(segment_id, round))
    }

    /// Blocks whose key satisfies `pred`, ascending by `(segment_id, round)`.
    pub fn select(&self, mut pred: impl FnMut(u32, u32) -> bool) -> Vec<&KvBlock> {
        self.blocks
            .iter()
            .filter(|((s, r), _)| pred(*s, *r))
            .map(|(_, b)| b.as_ref())
            .collect()
    }

    pub fn all(&self) -> Vec<&KvBlock> {
        self.select(|_, _| true)
    }

    /// Highest stored round `<= max_round` for a segment.
    pub fn latest(&self, segment_id: u32, max_round: u32) -> Result<&KvBlock> {
        self.blocks
            .range((segment_id, 0)..=(segment_id, max_round))
            .next_back()
            .map(|(_, b)| b.as_ref())
            .ok_or(Error::MissingBlock {
                segment_id,
                round: max_round,
            })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Per-token KV entries across all stored blocks.
    pub fn token_entries(&self) -> usize {
        self.blocks.values().map(|b| b.len()).sum()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::LayerKv;

    fn block(seg: u32, round: u32, val: f32) -> KvBlock {
        KvBlock::new(
            seg,
            round,
            0,
            2,
            vec![LayerKv {
                keys: vec![val, val],
                values: vec![-val, -val],
            }],
        )
        .unwrap()
    }

    #[test]
    fn put_then_get() {
        let mut s = KvStore::new();
        s.put(block(4, 0, 1.5));
        assert!(s.get(4, 0).unwrap().bit_eq(&block(4, 0, 1.5)));
        assert!(matches!(
            s.get(4, 1),
            Err(Error::MissingBlock {
                segment_id: 4,
                round: 1
            })
        ));
    }

    #[test]
    fn empty_selector_is_empty() {
        let mut s = KvStore::new();
        s.put(block(0, 0, 1.0));
        assert!(s.select(|_, _| false).is_empty());
    }

    #[test]
    fn ascending_canonical_order() {
        let mut s = KvStore::new();
        s.put(block(7, 0, 1.0));
        s.put(block(2, 1, 2.0));
        s.put(block(2, 0, 3.0));
        let keys: Vec<(u32, u32)> = s.all().iter().map(|b| (b.segment_id(), b.round())).collect();
        assert_eq!(keys, vec![(2, 0), (2, 1), (7, 0)]);
        assert_eq!(s.latest(2, 5).unwrap().round(), 1);
        assert_eq!(s.latest(2, 0).unwrap().round(), 0);
        assert!(s.latest(3, 1).is_err());
    }
}
