use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::vocab::VOCAB_SIZE;

/// Shape and seed of the stand-in transformer.
///
/// Read from a TOML file whose keys are exactly these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            head_dim: 16,
            hidden_dim: 64,
            vocab_size: VOCAB_SIZE,
            rope_theta: 10_000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let invalid = |msg: String| Err(EngineError::InvalidConfig(msg));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be at least 1"));
            }
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return invalid(format!(
                "hidden_dim {} != n_heads {} x head_dim {}",
                self.hidden_dim, self.n_heads, self.head_dim
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return invalid(format!("head_dim {} must be even for rotary", self.head_dim));
        }
        if self.vocab_size < VOCAB_SIZE {
            return invalid(format!(
                "vocab_size {} is below the {VOCAB_SIZE} ids the vocabulary defines",
                self.vocab_size
            ));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return invalid(format!("rope_theta {} must be positive", self.rope_theta));
        }
        Ok(())
    }

    /// Width of the SwiGLU feed-forward layer.
    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn from_toml_str(text: &str) -> Result<Self, EngineError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
