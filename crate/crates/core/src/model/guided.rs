use std::sync::Arc;

use super::{EngineError, ForwardEngine, ForwardRequest, KvCache, Logits, Script, ScriptedEngine, Transformer};

/// Transformer whose greedy choice is steered by a script.
///
/// Keys and values come from the transformer, so cache contents are real
/// numeric state; the scripted token receives a large logit bonus so the
/// token stream follows the script. Both halves honor the request mask,
/// so isolation properties of either carry over.
pub struct GuidedEngine<S> {
    model: Arc<Transformer>,
    script: ScriptedEngine<S>,
    bonus: f32,
}

impl<S: Script> GuidedEngine<S> {
    pub fn new(model: impl Into<Arc<Transformer>>, script: S) -> Self {
        Self { model: model.into(), script: ScriptedEngine::new(script), bonus: 1000.0 }
    }

    pub fn model(&self) -> &Transformer {
        &self.model
    }
}

impl<S: Script> ForwardEngine for GuidedEngine<S> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn new_cache(&self) -> KvCache {
        self.model.new_cache()
    }

    fn forward(&self, request: &ForwardRequest, cache: &mut KvCache) -> Result<Logits, EngineError> {
        let base = cache.len();
        let rows = request.normalized_rows(base, self.vocab_size())?;
        let picks = self.script.choose(request, &rows, cache, base)?;
        let logits = self.model.forward(request, cache)?;
        let v = logits.vocab_size();
        let mut data = Vec::with_capacity(logits.rows() * v);
        for (row, pick) in logits.iter_rows().zip(&picks) {
            let start = data.len();
            data.extend_from_slice(row);
            if let Some(t) = pick {
                data[start + *t as usize] += self.bonus;
            }
        }
        Ok(Logits::new(v, data))
    }
}
