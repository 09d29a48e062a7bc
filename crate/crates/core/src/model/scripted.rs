use super::{EngineError, ForwardEngine, ForwardRequest, KvCache, Logits};
use crate::vocab::{TokenId, PAD, VOCAB_SIZE};

/// A deterministic next-token rule over the tokens a query can see.
///
/// `visible` is the query's visible subsequence in cache order, ending
/// with the query token itself. `None` means the rule has no continuation.
pub trait Script: Send + Sync {
    fn next_token(&self, visible: &[TokenId]) -> Option<TokenId>;
}

impl<F> Script for F
where
    F: Fn(&[TokenId]) -> Option<TokenId> + Send + Sync,
{
    fn next_token(&self, visible: &[TokenId]) -> Option<TokenId> {
        self(visible)
    }
}

/// Engine whose greedy output is dictated by a [`Script`].
///
/// Each row's logits are `1.0` at the scripted token and `0.0` elsewhere.
/// Rows whose input token is `PAD` get all-zero logits without consulting
/// the script. The cache stores tokens and positions only.
pub struct ScriptedEngine<S> {
    script: S,
}

impl<S: Script> ScriptedEngine<S> {
    pub fn new(script: S) -> Self {
        Self { script }
    }

    pub fn script(&self) -> &S {
        &self.script
    }

    /// Scripted token for each row of `request`, with `None` for pad rows.
    /// Shared with [`super::GuidedEngine`].
    pub(crate) fn choose(
        &self,
        request: &ForwardRequest,
        rows: &[Vec<usize>],
        cache: &KvCache,
        base: usize,
    ) -> Result<Vec<Option<TokenId>>, EngineError> {
        let mut visible = Vec::new();
        rows.iter()
            .enumerate()
            .map(|(r, row)| {
                if request.token_ids[r] == PAD {
                    return Ok(None);
                }
                visible.clear();
                visible.extend(row.iter().map(|&k| {
                    if k < base {
                        cache.token(k)
                    } else {
                        request.token_ids[k - base]
                    }
                }));
                self.script
                    .next_token(&visible)
                    .map(Some)
                    .ok_or(EngineError::ScriptUndefinedContinuation { visible_len: visible.len() })
            })
            .collect()
    }
}

/// Wraps a script as a forward engine.
pub fn scripted_engine<S: Script>(script: S) -> ScriptedEngine<S> {
    ScriptedEngine::new(script)
}

impl<S: Script> ForwardEngine for ScriptedEngine<S> {
    fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    fn new_cache(&self) -> KvCache {
        KvCache::new(0, 0)
    }

    fn forward(&self, request: &ForwardRequest, cache: &mut KvCache) -> Result<Logits, EngineError> {
        let base = cache.len();
        let rows = request.normalized_rows(base, VOCAB_SIZE)?;
        let picks = self.choose(request, &rows, cache, base)?;
        let mut data = vec![0.0f32; picks.len() * VOCAB_SIZE];
        for (r, pick) in picks.iter().enumerate() {
            if let Some(t) = pick {
                if (*t as usize) >= VOCAB_SIZE {
                    return Err(EngineError::TokenOutOfRange { token: *t, vocab_size: VOCAB_SIZE });
                }
                data[r * VOCAB_SIZE + *t as usize] = 1.0;
            }
        }
        cache.push_entries(&request.token_ids, &request.position_ids);
        Ok(Logits::new(VOCAB_SIZE, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::argmax;
    use crate::vocab::{encode, MARK};

    /// Echoes a fixed title then MARK, whatever came before.
    fn echo_title(title: &'static str) -> impl Fn(&[TokenId]) -> Option<TokenId> {
        let toks = encode(title);
        move |visible: &[TokenId]| {
            // tokens after the last NUL have already been echoed
            let done = visible.iter().rev().take_while(|&&t| t != 0).count();
            Some(*toks.get(done).unwrap_or(&MARK))
        }
    }

    #[test]
    fn echo_script_emits_title_then_mark() {
        let engine = ScriptedEngine::new(echo_title("ab"));
        let mut cache = engine.new_cache();
        let mut last = engine.forward(&ForwardRequest::causal(0, &[5, 0]), &mut cache).unwrap();
        let mut out = Vec::new();
        for _ in 0..3 {
            let t = argmax(last.last());
            out.push(t);
            last = engine.forward(&ForwardRequest::causal(cache.len(), &[t]), &mut cache).unwrap();
        }
        assert_eq!(out, vec![b'a' as u32, b'b' as u32, MARK]);
    }

    /// Next token is `title + 100` where the title is the last byte below 10
    /// that the row can see.
    fn keyed(visible: &[TokenId]) -> Option<TokenId> {
        visible.iter().rev().find(|&&t| t < 10).map(|t| t + 100).or(Some(99))
    }

    #[test]
    fn branch_rows_see_different_titles() {
        let engine = ScriptedEngine::new(keyed);
        let mut cache = engine.new_cache();
        engine.forward(&ForwardRequest::causal(0, &[50, 51]), &mut cache).unwrap();
        let req = ForwardRequest {
            token_ids: vec![1, 2],
            position_ids: vec![2, 2],
            mask_rows: vec![vec![0, 1, 2], vec![0, 1, 3]],
        };
        let out = engine.forward(&req, &mut cache).unwrap();
        assert_eq!(argmax(out.row(0)), 101);
        assert_eq!(argmax(out.row(1)), 102);
    }

    #[test]
    fn hidden_discriminating_token_has_no_effect() {
        let engine = ScriptedEngine::new(keyed);
        let mut cache = engine.new_cache();
        engine.forward(&ForwardRequest::causal(0, &[3, 50]), &mut cache).unwrap();
        // row hides index 0, the only title-like token
        let req = ForwardRequest { token_ids: vec![60], position_ids: vec![2], mask_rows: vec![vec![1, 2]] };
        let out = engine.forward(&req, &mut cache).unwrap();
        assert_eq!(argmax(out.row(0)), 99);
    }

    #[test]
    fn undefined_continuation_is_an_error_and_leaves_cache() {
        let engine = ScriptedEngine::new(|_: &[TokenId]| None);
        let mut cache = engine.new_cache();
        let err = engine.forward(&ForwardRequest::causal(0, &[1]), &mut cache).unwrap_err();
        assert!(matches!(err, EngineError::ScriptUndefinedContinuation { visible_len: 1 }));
        assert!(cache.is_empty());
    }

    #[test]
    fn pad_rows_skip_the_script() {
        let engine = ScriptedEngine::new(|_: &[TokenId]| None);
        let mut cache = engine.new_cache();
        let out = engine.forward(&ForwardRequest::causal(0, &[PAD]), &mut cache).unwrap();
        assert!(out.row(0).iter().all(|&x| x == 0.0));
    }
}
