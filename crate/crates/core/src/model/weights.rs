//! Weight dump format: an 8-byte little-endian header length, a JSON
//! header (config plus tensor manifest), then every tensor as contiguous
//! little-endian `f32` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::transformer::manifest;
use super::{EngineError, ModelConfig, Transformer};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f32 elements from the start of the data section.
    offset: usize,
}

pub fn save_weights(model: &Transformer, path: impl AsRef<Path>) -> Result<(), EngineError> {
    let cfg = model.config().clone();
    let mut offset = 0;
    let tensors = manifest(&cfg)
        .into_iter()
        .map(|(name, shape, _)| {
            let entry = TensorEntry { offset, name, shape };
            offset += entry.shape.iter().product::<usize>();
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header { config: cfg, tensors })
        .map_err(|e| EngineError::Weights(e.to_string()))?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for t in model.tensors() {
        for x in t {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Transformer, EngineError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| EngineError::Weights(m.to_string());

    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().unwrap();
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 8usize.checked_add(header_len).ok_or_else(|| bad("header length overflow"))?;
    let header: Header = serde_json::from_slice(bytes.get(8..header_end).ok_or_else(|| bad("truncated header"))?)
        .map_err(|e| EngineError::Weights(e.to_string()))?;
    header.config.validate()?;

    let data = &bytes[header_end..];
    if data.len() % 4 != 0 {
        return Err(bad("data section is not a whole number of f32"));
    }
    let floats: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

    let expected = manifest(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(bad("tensor manifest does not match config"));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(EngineError::Weights(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        let n: usize = shape.iter().product();
        let slice = floats
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| EngineError::Weights(format!("{name} runs past end of data")))?;
        tensors.push(slice.to_vec());
    }
    Transformer::from_tensors(header.config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ForwardEngine, ForwardRequest};

    #[test]
    fn dump_then_load_is_bit_identical() {
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, head_dim: 4, hidden_dim: 8, seed: 4, ..Default::default() };
        let m = init_model(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&m, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.config(), m.config());

        let req = ForwardRequest::causal(0, &[3, 1, 4, 1, 5]);
        let a = m.forward(&req, &mut m.new_cache()).unwrap();
        let b = back.forward(&req, &mut back.new_cache()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m = init_model(ModelConfig { n_layers: 1, n_heads: 1, head_dim: 4, hidden_dim: 4, ..Default::default() })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_weights(&path), Err(EngineError::Weights(_))));
    }
}
