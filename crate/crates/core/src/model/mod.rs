//! Forward engines: a small seeded transformer, a rule-driven scripted
//! engine, and a hybrid of the two. All of them take explicit per-token
//! visibility sets and position ids.

mod cache;
mod config;
mod guided;
mod rope;
mod scripted;
mod transformer;
mod weights;

pub use cache::{truncate_cache, KvCache};
pub use config::ModelConfig;
pub use guided::GuidedEngine;
pub use scripted::{scripted_engine, Script, ScriptedEngine};
pub use transformer::{init_model, Transformer};
pub use weights::{load_weights, save_weights};

use thiserror::Error;

use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("request length mismatch: {tokens} tokens, {positions} positions, {masks} mask rows")]
    LengthMismatch { tokens: usize, positions: usize, masks: usize },
    #[error("row {row} (cache index {query}) references key {key}; visible keys must be <= the query index")]
    MaskOutOfRange { row: usize, query: usize, key: usize },
    #[error("row {row} (cache index {query}) does not see itself")]
    SelfNotVisible { row: usize, query: usize },
    #[error("token id {token} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("cache has {cache_layers} layers x {cache_width}, engine expects {layers} x {width}")]
    CacheShape { cache_layers: usize, cache_width: usize, layers: usize, width: usize },
    #[error("cannot truncate cache of length {cache_len} to {length}")]
    LengthExceedsCache { length: usize, cache_len: usize },
    #[error("non-finite logit in row {row}")]
    NonFinite { row: usize },
    #[error("script has no continuation for a visible context of {visible_len} tokens")]
    ScriptUndefinedContinuation { visible_len: usize },
    #[error("weight file: {0}")]
    Weights(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One engine invocation.
///
/// `mask_rows[r]` lists the cache indices row `r` may attend to, including
/// indices of rows earlier in this same request and the row itself. The row
/// itself lands at index `cache.len() + r`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardRequest {
    pub token_ids: Vec<TokenId>,
    pub position_ids: Vec<u32>,
    pub mask_rows: Vec<Vec<usize>>,
}

impl ForwardRequest {
    /// Plain causal request continuing a cache that holds `cache_len`
    /// entries at positions `0..cache_len`.
    pub fn causal(cache_len: usize, tokens: &[TokenId]) -> Self {
        let position_ids = (cache_len..cache_len + tokens.len()).map(|p| p as u32).collect();
        Self::causal_at(cache_len, tokens, position_ids)
    }

    /// Causal over the whole cache, with caller-chosen positions.
    pub fn causal_at(cache_len: usize, tokens: &[TokenId], position_ids: Vec<u32>) -> Self {
        let mask_rows = (0..tokens.len()).map(|r| (0..=cache_len + r).collect()).collect();
        Self { token_ids: tokens.to_vec(), position_ids, mask_rows }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Checks the request against a cache of `cache_len` entries and returns
    /// each row's visible set sorted by cache index with duplicates removed.
    pub fn normalized_rows(
        &self,
        cache_len: usize,
        vocab_size: usize,
    ) -> Result<Vec<Vec<usize>>, EngineError> {
        if self.token_ids.len() != self.position_ids.len()
            || self.token_ids.len() != self.mask_rows.len()
        {
            return Err(EngineError::LengthMismatch {
                tokens: self.token_ids.len(),
                positions: self.position_ids.len(),
                masks: self.mask_rows.len(),
            });
        }
        if let Some(&token) = self.token_ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(EngineError::TokenOutOfRange { token, vocab_size });
        }
        self.mask_rows
            .iter()
            .enumerate()
            .map(|(row, visible)| {
                let query = cache_len + row;
                let mut sorted = visible.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if let Some(&key) = sorted.last().filter(|&&k| k > query) {
                    return Err(EngineError::MaskOutOfRange { row, query, key });
                }
                if sorted.last() != Some(&query) {
                    return Err(EngineError::SelfNotVisible { row, query });
                }
                Ok(sorted)
            })
            .collect()
    }
}

/// One vocab-sized logit vector per request row.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    vocab_size: usize,
    data: Vec<f32>,
}

impl Logits {
    pub fn new(vocab_size: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len() % vocab_size, 0);
        Self { vocab_size, data }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.vocab_size
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.vocab_size..(r + 1) * self.vocab_size]
    }

    pub fn last(&self) -> &[f32] {
        self.row(self.rows() - 1)
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.vocab_size)
    }

    pub(crate) fn check_finite(&self) -> Result<(), EngineError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(EngineError::NonFinite { row: i / self.vocab_size }),
            None => Ok(()),
        }
    }
}

/// Anything that can turn a masked, positioned request into logits while
/// appending to a [`KvCache`]. Engines are immutable after construction.
pub trait ForwardEngine: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// An empty cache shaped for this engine.
    fn new_cache(&self) -> KvCache;

    /// Appends exactly `request.len()` entries to `cache` and returns one
    /// logit row per input token. On error the cache is left unchanged.
    fn forward(&self, request: &ForwardRequest, cache: &mut KvCache) -> Result<Logits, EngineError>;
}

impl<E: ForwardEngine + ?Sized> ForwardEngine for &E {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn new_cache(&self) -> KvCache {
        (**self).new_cache()
    }

    fn forward(&self, request: &ForwardRequest, cache: &mut KvCache) -> Result<Logits, EngineError> {
        (**self).forward(request, cache)
    }
}

impl<E: ForwardEngine + ?Sized> ForwardEngine for Box<E> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn new_cache(&self) -> KvCache {
        (**self).new_cache()
    }

    fn forward(&self, request: &ForwardRequest, cache: &mut KvCache) -> Result<Logits, EngineError> {
        (**self).forward(request, cache)
    }
}

/// Greedy selection; ties go to the lowest token id.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best as TokenId
}
