use std::collections::BTreeMap;

use super::config::ModelConfig;
use crate::router::PoolCarry;

/// Growable `f32` buffer whose contents start on a 64-byte boundary, so a
/// 16-float head slice of a row never straddles two cache lines.
#[derive(Clone, Debug, Default)]
struct AlignedBuf {
    buf: Vec<f32>,
    off: usize,
    len: usize,
}

impl AlignedBuf {
    const ALIGN_BYTES: usize = 64;
    const PAD: usize = Self::ALIGN_BYTES / std::mem::size_of::<f32>();

    fn as_slice(&self) -> &[f32] {
        &self.buf[self.off..self.off + self.len]
    }

    fn extend_from_slice(&mut self, src: &[f32]) {
        let need = self.len + src.len();
        if self.off + need > self.buf.len() {
            let mut buf = vec![0.0; (2 * need).max(256) + Self::PAD];
            let off = buf.as_ptr().align_offset(Self::ALIGN_BYTES).min(Self::PAD);
            buf[off..off + self.len].copy_from_slice(self.as_slice());
            self.buf = buf;
            self.off = off;
        }
        let end = self.off + self.len;
        self.buf[end..end + src.len()].copy_from_slice(src);
        self.len = need;
    }
}

impl PartialEq for AlignedBuf {
    fn eq(&self, other: &Self) -> bool {
        self.as_slice() == other.as_slice()
    }
}

/// Keys and values written to one layer. Rows are `[cached_len × d_model]`
/// with heads as contiguous column blocks, which holds the same values as a
/// `[n_heads × cached_len × head_dim]` layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    keys: AlignedBuf,
    values: AlignedBuf,
    /// Absolute position of every cached row.
    pub positions: Vec<usize>,
}

impl LayerCache {
    pub fn keys(&self) -> &[f32] {
        self.keys.as_slice()
    }

    pub fn values(&self) -> &[f32] {
        self.values.as_slice()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Per-sequence generation state.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    n_heads: usize,
    head_dim: usize,
    /// `None` until the layer's attention first runs for this sequence; stays
    /// `None` when the layer is bypassed for the whole sequence.
    layers: Vec<Option<LayerCache>>,
    /// Positions processed so far.
    pub seen: usize,
    /// Sequence-level keep decisions fixed at prefill, by layer.
    pub held: BTreeMap<usize, bool>,
    /// Running sums for causal-prefix pooling, by layer.
    pub pool: BTreeMap<usize, PoolCarry>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        KvCache {
            n_heads: config.n_heads,
            head_dim: config.head_dim,
            layers: vec![None; config.n_layers],
            seen: 0,
            held: BTreeMap::new(),
            pool: BTreeMap::new(),
        }
    }

    pub fn layer(&self, l: usize) -> Option<&LayerCache> {
        self.layers.get(l).and_then(|c| c.as_ref())
    }

    pub fn is_present(&self, l: usize) -> bool {
        self.layer(l).is_some()
    }

    pub fn cached_len(&self, l: usize) -> usize {
        self.layer(l).map_or(0, LayerCache::len)
    }

    pub(crate) fn append(&mut self, l: usize, keys: &[f32], values: &[f32], positions: &[usize]) {
        let c = self.layers[l].get_or_insert_with(LayerCache::default);
        c.keys.extend_from_slice(keys);
        c.values.extend_from_slice(values);
        c.positions.extend_from_slice(positions);
    }

    /// Σ over present layers of 2 · n_heads · cached_len · head_dim · 4.
    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|c| 2 * self.n_heads * c.len() * self.head_dim * 4)
            .sum()
    }

    pub fn present_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&l| self.is_present(l)).collect()
    }
}
