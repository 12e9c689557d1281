use crate::error::{Error, Result};

/// Keys and values of one layer, each `[length × d_model]` row-major
/// (`d_model = n_heads × d_head`). Keys are stored already rotated.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// Cached K/V of one segment for one round, committed to a position range.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    segment_id: u32,
    round: u32,
    position_start: usize,
    length: usize,
    d_model: usize,
    layers: Vec<LayerKv>,
}

impl KvBlock {
    pub fn new(
        segment_id: u32,
        round: u32,
        position_start: usize,
        d_model: usize,
        layers: Vec<LayerKv>,
    ) -> Result<Self> {
        let length = match layers.first() {
            Some(l) if d_model > 0 => l.keys.len() / d_model,
            _ => 0,
        };
        for (i, l) in layers.iter().enumerate() {
            if l.keys.len() != length * d_model || l.values.len() != length * d_model {
                return Err(Error::ShapeInconsistency(format!(
                    "block layer {i}: {} keys / {} values for {length} tokens of width {d_model}",
                    l.keys.len(),
                    l.values.len()
                )));
            }
        }
        Ok(Self {
            segment_id,
            round,
            position_start,
            length,
            d_model,
            layers,
        })
    }

    pub fn segment_id(&self) -> u32 {
        self.segment_id
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn position_start(&self) -> usize {
        self.position_start
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    /// Last position covered, `None` for an empty block.
    pub fn last_position(&self) -> Option<usize> {
        (self.length > 0).then(|| self.position_start + self.length - 1)
    }

    /// Extends the block with tokens that directly follow it.
    pub fn append(&mut self, more: &[LayerKv]) -> Result<()> {
        if more.len() != self.layers.len() {
            return Err(Error::ShapeInconsistency(format!(
                "append of {} layers onto {}",
                more.len(),
                self.layers.len()
            )));
        }
        let added = more.first().map_or(0, |l| l.keys.len() / self.d_model);
        for (dst, src) in self.layers.iter_mut().zip(more) {
            if src.keys.len() != added * self.d_model || src.values.len() != added * self.d_model {
                return Err(Error::ShapeInconsistency("ragged append".into()));
            }
            dst.keys.extend_from_slice(&src.keys);
            dst.values.extend_from_slice(&src.values);
        }
        self.length += added;
        Ok(())
    }

    /// Copy of tokens `[from, to)` as a new block starting at
    /// `position_start + from`.
    pub fn slice(&self, segment_id: u32, round: u32, from: usize, to: usize) -> Result<Self> {
        if from > to || to > self.length {
            return Err(Error::InvalidArgument(format!(
                "slice {from}..{to} of block with {} tokens",
                self.length
            )));
        }
        let d = self.d_model;
        let layers = self
            .layers
            .iter()
            .map(|l| LayerKv {
                keys: l.keys[from * d..to * d].to_vec(),
                values: l.values[from * d..to * d].to_vec(),
            })
            .collect();
        Self::new(segment_id, round, self.position_start + from, d, layers)
    }

    /// Metadata and every stored float equal bit for bit.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.segment_id == other.segment_id
            && self.round == other.round
            && self.position_start == other.position_start
            && self.length == other.length
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                bits_eq(&a.keys, &b.keys) && bits_eq(&a.values, &b.values)
            })
    }
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(n: usize, d: usize, base: f32) -> LayerKv {
        LayerKv {
            keys: (0..n * d).map(|i| base + i as f32).collect(),
            values: (0..n * d).map(|i| -base - i as f32).collect(),
        }
    }

    #[test]
    fn length_from_layers() {
        let b = KvBlock::new(3, 1, 10, 4, vec![layer(2, 4, 0.0), layer(2, 4, 1.0)]).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.last_position(), Some(11));
    }

    #[test]
    fn rejects_ragged_layers() {
        assert!(KvBlock::new(0, 0, 0, 4, vec![layer(2, 4, 0.0), layer(3, 4, 0.0)]).is_err());
    }

    #[test]
    fn append_then_slice() {
        let mut b = KvBlock::new(0, 0, 5, 2, vec![layer(1, 2, 0.0)]).unwrap();
        b.append(&[layer(2, 2, 10.0)]).unwrap();
        assert_eq!(b.len(), 3);
        let s = b.slice(7, 0, 1, 3).unwrap();
        assert_eq!(s.position_start(), 6);
        assert_eq!(s.layer(0).keys, vec![10.0, 11.0, 12.0, 13.0]);
        assert!(b.slice(0, 0, 2, 4).is_err());
    }
}
