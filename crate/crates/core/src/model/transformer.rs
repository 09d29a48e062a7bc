use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::rope::Rope;
use super::{EngineError, ForwardEngine, ForwardRequest, KvCache, Logits, ModelConfig};

const INIT_STD: f32 = 0.02;
const NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Ones,
}

/// Name, shape and initializer of every tensor, in storage order.
pub(crate) fn manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, f, v) = (cfg.hidden_dim, cfg.ffn_dim(), cfg.vocab_size);
    let mut out = vec![("embed".to_string(), vec![v, h], Init::Normal)];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.push((p("attn_norm"), vec![h], Init::Ones));
        out.push((p("wq"), vec![h, h], Init::Normal));
        out.push((p("wk"), vec![h, h], Init::Normal));
        out.push((p("wv"), vec![h, h], Init::Normal));
        out.push((p("wo"), vec![h, h], Init::Normal));
        out.push((p("mlp_norm"), vec![h], Init::Ones));
        out.push((p("w_gate"), vec![h, f], Init::Normal));
        out.push((p("w_up"), vec![h, f], Init::Normal));
        out.push((p("w_down"), vec![f, h], Init::Normal));
    }
    out.push(("final_norm".to_string(), vec![h], Init::Ones));
    out.push(("lm_head".to_string(), vec![h, v], Init::Normal));
    out
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    attn_norm: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    mlp_norm: Vec<f32>,
    w_gate: Vec<f32>,
    w_up: Vec<f32>,
    w_down: Vec<f32>,
}

/// Decoder-only transformer with seeded random weights.
///
/// All arithmetic is `f32` with a fixed accumulation order: dot products
/// run sequentially over the feature dimension and attention accumulates
/// over keys in ascending cache index. A row's result therefore depends
/// only on its own visible keys, never on which other rows share the pass.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    rope: Rope,
    embed: Vec<f32>,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    lm_head: Vec<f32>,
}

/// Builds a transformer whose weights are a pure function of `config`.
pub fn init_model(config: ModelConfig) -> Result<Transformer, EngineError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let tensors = manifest(&config)
        .into_iter()
        .map(|(_, shape, init)| {
            let n = shape.iter().product();
            match init {
                Init::Ones => vec![1.0; n],
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            }
        })
        .collect();
    Transformer::from_tensors(config, tensors)
}

impl Transformer {
    /// Assembles a model from tensors given in [`manifest`] order.
    pub(crate) fn from_tensors(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self, EngineError> {
        config.validate()?;
        let specs = manifest(&config);
        if specs.len() != tensors.len() {
            return Err(EngineError::Weights(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            let n: usize = shape.iter().product();
            if t.len() != n {
                return Err(EngineError::Weights(format!("{name}: expected {n} values, got {}", t.len())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let embed = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let lm_head = next();
        Ok(Self {
            rope: Rope::new(config.head_dim, config.rope_theta),
            config,
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Tensors in [`manifest`] order.
    pub(crate) fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                l.attn_norm.as_slice(),
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    fn attend(&self, cache: &KvCache, layer: usize, q: &[f32], visible: &[usize], out: &mut [f32]) {
        let d = self.config.head_dim;
        let scale = 1.0 / (d as f32).sqrt();
        let mut scores = vec![0.0f32; visible.len()];
        for h in 0..self.config.n_heads {
            let qh = &q[h * d..(h + 1) * d];
            let mut max = f32::NEG_INFINITY;
            for (s, &k) in scores.iter_mut().zip(visible) {
                let kh = &cache.key(layer, k)[h * d..(h + 1) * d];
                *s = dot(qh, kh) * scale;
                max = max.max(*s);
            }
            let mut sum = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let oh = &mut out[h * d..(h + 1) * d];
            oh.fill(0.0);
            for (&s, &k) in scores.iter().zip(visible) {
                let p = s / sum;
                let vh = &cache.value(layer, k)[h * d..(h + 1) * d];
                for (o, v) in oh.iter_mut().zip(vh) {
                    *o += p * v;
                }
            }
        }
    }
}

impl ForwardEngine for Transformer {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.n_layers, self.config.hidden_dim)
    }

    fn forward(&self, request: &ForwardRequest, cache: &mut KvCache) -> Result<Logits, EngineError> {
        let cfg = &self.config;
        let (hd, d) = (cfg.hidden_dim, cfg.head_dim);
        if cache.n_layers() != cfg.n_layers || cache.width() != hd {
            return Err(EngineError::CacheShape {
                cache_layers: cache.n_layers(),
                cache_width: cache.width(),
                layers: cfg.n_layers,
                width: hd,
            });
        }
        let base = cache.len();
        let rows = request.normalized_rows(base, cfg.vocab_size)?;
        let n = request.len();

        let mut xs: Vec<Vec<f32>> = request
            .token_ids
            .iter()
            .map(|&t| self.embed[t as usize * hd..(t as usize + 1) * hd].to_vec())
            .collect();
        cache.push_entries(&request.token_ids, &request.position_ids);

        let mut h = vec![0.0f32; hd];
        let mut k = vec![0.0f32; hd];
        let mut v = vec![0.0f32; hd];
        let mut attn = vec![0.0f32; hd];
        let mut proj = vec![0.0f32; hd];
        let mut gate = vec![0.0f32; cfg.ffn_dim()];
        let mut up = vec![0.0f32; cfg.ffn_dim()];
        let mut qs = vec![vec![0.0f32; hd]; n];

        for (li, lw) in self.layers.iter().enumerate() {
            for (r, x) in xs.iter().enumerate() {
                rms_norm(x, &lw.attn_norm, &mut h);
                matvec(&h, &lw.wq, &mut qs[r]);
                matvec(&h, &lw.wk, &mut k);
                matvec(&h, &lw.wv, &mut v);
                let pos = request.position_ids[r];
                for head in 0..cfg.n_heads {
                    self.rope.apply(&mut qs[r][head * d..(head + 1) * d], pos);
                    self.rope.apply(&mut k[head * d..(head + 1) * d], pos);
                }
                cache.push_kv(li, &k, &v);
            }
            for (r, x) in xs.iter_mut().enumerate() {
                self.attend(cache, li, &qs[r], &rows[r], &mut attn);
                matvec(&attn, &lw.wo, &mut proj);
                add_assign(x, &proj);

                rms_norm(x, &lw.mlp_norm, &mut h);
                matvec(&h, &lw.w_gate, &mut gate);
                matvec(&h, &lw.w_up, &mut up);
                for (g, u) in gate.iter_mut().zip(&up) {
                    *g = silu(*g) * u;
                }
                matvec(&gate, &lw.w_down, &mut proj);
                add_assign(x, &proj);
            }
        }

        let mut data = vec![0.0f32; n * cfg.vocab_size];
        for (x, out) in xs.iter().zip(data.chunks_exact_mut(cfg.vocab_size)) {
            rms_norm(x, &self.final_norm, &mut h);
            matvec(&h, &self.lm_head, out);
        }
        let logits = Logits::new(cfg.vocab_size, data);
        if let Err(e) = logits.check_finite() {
            cache.truncate(base)?;
            return Err(e);
        }
        Ok(logits)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out = x . w` for row-major `w` of shape `[x.len(), out.len()]`.
fn matvec(x: &[f32], w: &[f32], out: &mut [f32]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), x.len() * cols);
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

fn rms_norm(x: &[f32], weight: &[f32], out: &mut [f32]) {
    let ms = dot(x, x) / x.len() as f32;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for ((o, xi), w) in out.iter_mut().zip(x).zip(weight) {
        *o = xi * inv * w;
    }
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}
