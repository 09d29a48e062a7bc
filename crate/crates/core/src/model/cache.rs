use super::EngineError;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerCache {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Per-layer key/value store.
///
/// Every entry remembers the token it was computed from and the position
/// id it was encoded at. Positions are never derived from the entry index.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    width: usize,
    layers: Vec<LayerCache>,
    tokens: Vec<TokenId>,
    positions: Vec<u32>,
}

impl KvCache {
    /// `width` is the number of floats per entry per layer (heads x head_dim).
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self {
            width,
            layers: vec![LayerCache::default(); n_layers],
            tokens: Vec::new(),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn token(&self, index: usize) -> TokenId {
        self.tokens[index]
    }

    pub fn position(&self, index: usize) -> u32 {
        self.positions[index]
    }

    /// Key vector of `index` in `layer`, all heads concatenated.
    pub fn key(&self, layer: usize, index: usize) -> &[f32] {
        &self.layers[layer].keys[index * self.width..(index + 1) * self.width]
    }

    pub fn value(&self, layer: usize, index: usize) -> &[f32] {
        &self.layers[layer].values[index * self.width..(index + 1) * self.width]
    }

    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.layers[layer].keys
    }

    pub fn layer_values(&self, layer: usize) -> &[f32] {
        &self.layers[layer].values
    }

    /// Registers new entries. Per-layer tensors must follow through
    /// [`KvCache::push_kv`] before the cache is consistent again.
    pub(crate) fn push_entries(&mut self, tokens: &[TokenId], positions: &[u32]) {
        self.tokens.extend_from_slice(tokens);
        self.positions.extend_from_slice(positions);
    }

    pub(crate) fn push_kv(&mut self, layer: usize, key: &[f32], value: &[f32]) {
        debug_assert_eq!(key.len(), self.width);
        let l = &mut self.layers[layer];
        l.keys.extend_from_slice(key);
        l.values.extend_from_slice(value);
    }

    /// Drops every entry with index >= `length`.
    pub fn truncate(&mut self, length: usize) -> Result<(), EngineError> {
        if length > self.len() {
            return Err(EngineError::LengthExceedsCache { length, cache_len: self.len() });
        }
        self.tokens.truncate(length);
        self.positions.truncate(length);
        for l in &mut self.layers {
            l.keys.truncate(length * self.width);
            l.values.truncate(length * self.width);
        }
        Ok(())
    }

    /// True when entries `< length` of both caches agree bit for bit.
    pub fn prefix_bitwise_eq(&self, other: &KvCache, length: usize) -> bool {
        if self.len() < length || other.len() < length || self.width != other.width {
            return false;
        }
        if self.n_layers() != other.n_layers()
            || self.tokens[..length] != other.tokens[..length]
            || self.positions[..length] != other.positions[..length]
        {
            return false;
        }
        let n = length * self.width;
        let bits_eq = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.layers.iter().zip(&other.layers).all(|(a, b)| {
            bits_eq(&a.keys[..n], &b.keys[..n]) && bits_eq(&a.values[..n], &b.values[..n])
        })
    }
}

/// Truncates a cache to `length` entries.
pub fn truncate_cache(mut cache: KvCache, length: usize) -> Result<KvCache, EngineError> {
    cache.truncate(length)?;
    Ok(cache)
}
