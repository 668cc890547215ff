//! Tiny decoder-only transformer: pre-norm residual blocks with grouped-query
//! attention, rotary embeddings, sliding-window masking and SwiGLU FFNs, plus
//! checkpointing and sampling.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::nn::{
    self, AttentionConfig, AttnCache, NnError, SwigluCache,
};
use crate::tensor::{Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-5;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WLAB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range (vocab {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub sliding_window: usize,
    pub rope_theta: f64,
}

impl ModelConfig {
    /// Desk-scale preset: under 2M parameters, trains in seconds.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            model_dim: 128,
            n_heads: 8,
            n_kv_heads: 2,
            head_dim: 16,
            intermediate_size: 448,
            vocab_size: 512,
            context_length: 256,
            sliding_window: 128,
            rope_theta: 10000.0,
        }
    }

    /// Full-scale 7B preset. Exists for config validation and symbolic
    /// parameter counting only; never allocate it.
    pub fn full_scale_7b() -> Self {
        Self {
            n_layers: 32,
            model_dim: 4096,
            n_heads: 32,
            n_kv_heads: 8,
            head_dim: 128,
            intermediate_size: 14336,
            vocab_size: 32000,
            context_length: 8192,
            sliding_window: 4096,
            rope_theta: 10000.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positives = [
            self.n_layers,
            self.model_dim,
            self.n_heads,
            self.n_kv_heads,
            self.head_dim,
            self.intermediate_size,
            self.vocab_size,
            self.context_length,
            self.sliding_window,
        ];
        if positives.iter().any(|&v| v == 0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.model_dim != self.n_heads * self.head_dim {
            return Err(ModelError::Config(format!(
                "model_dim {} != n_heads {} * head_dim {}",
                self.model_dim, self.n_heads, self.head_dim
            )));
        }
        if self.context_length < self.sliding_window {
            return Err(ModelError::Config(format!(
                "context_length {} < sliding_window {}",
                self.context_length, self.sliding_window
            )));
        }
        self.attention_config().validate()?;
        Ok(())
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            sliding_window: Some(self.sliding_window),
            rope_theta: self.rope_theta,
        }
    }

    /// Total parameter count, computed symbolically.
    pub fn param_count(&self) -> u64 {
        let d = self.model_dim as u64;
        let kv = (self.n_kv_heads * self.head_dim) as u64;
        let h = self.intermediate_size as u64;
        let v = self.vocab_size as u64;
        let per_layer = d // attn_norm
            + d * d // wq
            + d * kv // wk
            + d * kv // wv
            + d * d // wo
            + d // ffn_norm
            + d * h // w_gate
            + d * h // w_up
            + h * d; // w_down
        v * d + self.n_layers as u64 * per_layer + d + d * v
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights<T = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// A materialized model: config plus named parameter tensors.
#[derive(Debug, Clone)]
pub struct TinyModel<T = f32> {
    pub config: ModelConfig,
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
}

/// Result of `generate`: the continuation plus a context-overflow flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: Vec<u32>,
    pub truncated: bool,
}

pub struct LayerCache<T> {
    pub x_in: Tensor<T>,
    pub normed1: Tensor<T>,
    pub attn: AttnCache<T>,
    pub attn_concat: Tensor<T>,
    pub x_mid: Tensor<T>,
    pub normed2: Tensor<T>,
    pub swiglu: SwigluCache<T>,
}

pub struct ForwardCache<T> {
    pub ids: Vec<usize>,
    pub layers: Vec<LayerCache<T>>,
    pub x_final: Tensor<T>,
    pub normed_final: Tensor<T>,
}

/// Gradients mirror the parameter structure of the model itself.
pub type ModelGrads<T> = TinyModel<T>;

impl<T: Scalar> TinyModel<T> {
    pub fn zeros_like(config: &ModelConfig) -> Self {
        let d = config.model_dim;
        let kv = config.n_kv_heads * config.head_dim;
        let h = config.intermediate_size;
        let v = config.vocab_size;
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::zeros(&[d]),
                wq: Tensor::zeros(&[d, d]),
                wk: Tensor::zeros(&[d, kv]),
                wv: Tensor::zeros(&[d, kv]),
                wo: Tensor::zeros(&[d, d]),
                ffn_norm: Tensor::zeros(&[d]),
                w_gate: Tensor::zeros(&[d, h]),
                w_up: Tensor::zeros(&[d, h]),
                w_down: Tensor::zeros(&[h, d]),
            })
            .collect();
        Self {
            config: config.clone(),
            embedding: Tensor::zeros(&[v, d]),
            layers,
            final_norm: Tensor::zeros(&[d]),
            lm_head: Tensor::zeros(&[d, v]),
        }
    }

    /// Deterministic initialization: linear weights ~ N(0, 0.02), norm gains 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self::zeros_like(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid distribution");
        for (name, t) in model.named_parameters_mut() {
            if name.ends_with("norm") {
                for v in t.data_mut() {
                    *v = T::one();
                }
            } else {
                for v in t.data_mut() {
                    *v = T::scalar_from(normal.sample(&mut rng));
                }
            }
        }
        Ok(model)
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("embedding".into(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![("embedding".into(), &mut self.embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &mut l.ffn_norm));
            out.push((format!("layers.{i}.w_gate"), &mut l.w_gate));
            out.push((format!("layers.{i}.w_up"), &mut l.w_up));
            out.push((format!("layers.{i}.w_down"), &mut l.w_down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_parameters().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Elementwise add another parameter set (gradient accumulation).
    pub fn accumulate(&mut self, other: &TinyModel<T>) {
        let other_params = other.named_parameters();
        for ((_, dst), (_, src)) in self.named_parameters_mut().into_iter().zip(other_params) {
            dst.add_assign(src).expect("matching parameter shapes");
        }
    }

    /// Scale every parameter tensor by `s`.
    pub fn scale_all(&mut self, s: T) {
        for (_, t) in self.named_parameters_mut() {
            t.scale(s);
        }
    }

    pub fn cast<U: Scalar>(&self) -> TinyModel<U> {
        TinyModel {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<Vec<usize>, ModelError> {
        if ids.len() > self.config.context_length {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                context: self.config.context_length,
            });
        }
        ids.iter()
            .map(|&id| {
                if (id as usize) < self.config.vocab_size {
                    Ok(id as usize)
                } else {
                    Err(ModelError::TokenOutOfRange {
                        id,
                        vocab: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    /// Forward pass producing `[seq, vocab]` logits.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward_with_cache(ids)?.0)
    }

    /// Forward pass keeping every intermediate needed for `backward`.
    pub fn forward_with_cache(&self, ids: &[u32]) -> Result<(Tensor<T>, ForwardCache<T>), ModelError> {
        let ids = self.check_ids(ids)?;
        let eps = T::scalar_from(RMS_EPS);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let cfg = self.config.attention_config();
        let mut x = nn::embedding_lookup(&self.embedding, &ids)?;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let x_in = x;
            let normed1 = nn::rmsnorm(&x_in, &l.attn_norm, eps)?;
            let q = nn::matmul(&normed1, &l.wq)?;
            let k = nn::matmul(&normed1, &l.wk)?;
            let v = nn::matmul(&normed1, &l.wv)?;
            let qr = nn::rope_apply(&q, &positions, self.config.head_dim, self.config.rope_theta)?;
            let kr = nn::rope_apply(&k, &positions, self.config.head_dim, self.config.rope_theta)?;
            let (attn_concat, attn) = nn::attention(&qr, &kr, &v, &cfg, true)?;
            let proj = nn::matmul(&attn_concat, &l.wo)?;
            let mut x_mid = x_in.clone();
            x_mid.add_assign(&proj).expect("residual shapes");
            let normed2 = nn::rmsnorm(&x_mid, &l.ffn_norm, eps)?;
            let (ffn_out, swiglu) = nn::swiglu(&normed2, &l.w_gate, &l.w_up, &l.w_down)?;
            let mut x_out = x_mid.clone();
            x_out.add_assign(&ffn_out).expect("residual shapes");
            layer_caches.push(LayerCache {
                x_in,
                normed1,
                attn,
                attn_concat,
                x_mid,
                normed2,
                swiglu,
            });
            x = x_out;
        }
        let normed_final = nn::rmsnorm(&x, &self.final_norm, eps)?;
        let logits = nn::matmul(&normed_final, &self.lm_head)?;
        Ok((
            logits,
            ForwardCache {
                ids,
                layers: layer_caches,
                x_final: x,
                normed_final,
            },
        ))
    }

    /// Analytic backward pass; returns gradients shaped like the model.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> ModelGrads<T> {
        let eps = T::scalar_from(RMS_EPS);
        let positions: Vec<usize> = (0..cache.ids.len()).collect();
        let mut grads = ModelGrads::zeros_like(&self.config);
        let (dnormed_final, dlm_head) = nn::matmul_backward(&cache.normed_final, &self.lm_head, dlogits);
        grads.lm_head = dlm_head;
        let (mut dx, dfinal_norm) = nn::rmsnorm_backward(&cache.x_final, &self.final_norm, eps, &dnormed_final);
        grads.final_norm = dfinal_norm;
        for (l, lc, gl) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(&mut grads.layers)
            .map(|((a, b), c)| (a, b, c))
            .rev()
        {
            // x_out = x_mid + ffn_out
            let (dnormed2, dwg, dwu, dwd) =
                nn::swiglu_backward(&lc.normed2, &l.w_gate, &l.w_up, &l.w_down, &lc.swiglu, &dx);
            gl.w_gate = dwg;
            gl.w_up = dwu;
            gl.w_down = dwd;
            let (dx_mid_norm, dffn_norm) = nn::rmsnorm_backward(&lc.x_mid, &l.ffn_norm, eps, &dnormed2);
            gl.ffn_norm = dffn_norm;
            let mut dx_mid = dx;
            dx_mid.add_assign(&dx_mid_norm).expect("shapes");
            // x_mid = x_in + attn_concat·wo
            let (dattn_concat, dwo) = nn::matmul_backward(&lc.attn_concat, &l.wo, &dx_mid);
            gl.wo = dwo;
            let (dqr, dkr, dv) = nn::attention_backward(&lc.attn, &dattn_concat);
            let dq = nn::rope_backward(&dqr, &positions, self.config.head_dim, self.config.rope_theta);
            let dk = nn::rope_backward(&dkr, &positions, self.config.head_dim, self.config.rope_theta);
            let (dn1_q, dwq) = nn::matmul_backward(&lc.normed1, &l.wq, &dq);
            let (dn1_k, dwk) = nn::matmul_backward(&lc.normed1, &l.wk, &dk);
            let (dn1_v, dwv) = nn::matmul_backward(&lc.normed1, &l.wv, &dv);
            gl.wq = dwq;
            gl.wk = dwk;
            gl.wv = dwv;
            let mut dnormed1 = dn1_q;
            dnormed1.add_assign(&dn1_k).expect("shapes");
            dnormed1.add_assign(&dn1_v).expect("shapes");
            let (dx_in_norm, dattn_norm) = nn::rmsnorm_backward(&lc.x_in, &l.attn_norm, eps, &dnormed1);
            gl.attn_norm = dattn_norm;
            dx = dx_mid;
            dx.add_assign(&dx_in_norm).expect("shapes");
        }
        grads.embedding = nn::embedding_backward(self.config.vocab_size, self.config.model_dim, &cache.ids, &dx);
        grads
    }

    /// Greedy (`temperature == 0`, ties to the lowest id) or seeded sampled
    /// generation. Prompts longer than the context are truncated from the left
    /// and flagged.
    pub fn generate(
        &self,
        prompt: &[u32],
        max_new: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Generated, ModelError> {
        if temperature < 0.0 {
            return Err(ModelError::Config("temperature must be >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = self.config.context_length;
        let mut truncated = false;
        let mut all: Vec<u32> = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let start = if all.len() > ctx {
                truncated = true;
                all.len() - ctx
            } else {
                0
            };
            let window = &all[start..];
            let logits = self.forward(window)?;
            if logits.row_count() == 0 {
                return Err(ModelError::Config("cannot generate from an empty prompt".into()));
            }
            let last = logits.row(logits.row_count() - 1);
            let next = if temperature == 0.0 {
                let mut best = 0usize;
                for (i, &v) in last.iter().enumerate() {
                    if v > last[best] {
                        best = i;
                    }
                }
                best as u32
            } else {
                let scaled: Vec<T> = last.iter().map(|&v| v / T::scalar_from(temperature)).collect();
                let probs = nn::softmax(&Tensor::from_vec(scaled), 0)?;
                let r: f64 = rand::Rng::gen::<f64>(&mut rng);
                let mut acc = 0.0f64;
                let mut chosen = probs.len() - 1;
                for (i, p) in probs.data().iter().enumerate() {
                    acc += p.as_f64();
                    if r < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen as u32
            };
            out.push(next);
            all.push(next);
        }
        Ok(Generated { tokens: out, truncated })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "WLAB", version u32, config block of named u64
// fields, then per-parameter records (name, dims, little-endian f32 payload).
// ---------------------------------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| ModelError::Checkpoint("truncated file (u32)".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| ModelError::Checkpoint("truncated file (u64)".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String, ModelError> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(ModelError::Checkpoint(format!("implausible name length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| ModelError::Checkpoint("truncated file (name)".into()))?;
    String::from_utf8(buf).map_err(|_| ModelError::Checkpoint("non-utf8 name".into()))
}

const CONFIG_FIELDS: [&str; 10] = [
    "n_layers",
    "model_dim",
    "n_heads",
    "n_kv_heads",
    "head_dim",
    "intermediate_size",
    "vocab_size",
    "context_length",
    "sliding_window",
    "rope_theta_bits",
];

fn config_field_values(cfg: &ModelConfig) -> [u64; 10] {
    [
        cfg.n_layers as u64,
        cfg.model_dim as u64,
        cfg.n_heads as u64,
        cfg.n_kv_heads as u64,
        cfg.head_dim as u64,
        cfg.intermediate_size as u64,
        cfg.vocab_size as u64,
        cfg.context_length as u64,
        cfg.sliding_window as u64,
        cfg.rope_theta.to_bits(),
    ]
}

/// FNV-1a over the serialized body; appended as a trailer so bit flips
/// anywhere in the file are rejected on load.
fn body_checksum(body: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in body {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn save_checkpoint(model: &TinyModel<f32>, path: &Path) -> Result<(), ModelError> {
    let mut body = Vec::new();
    {
        let w = &mut body;
        write_u32(w, CONFIG_FIELDS.len() as u32)?;
        for (name, value) in CONFIG_FIELDS.iter().zip(config_field_values(&model.config)) {
            write_str(w, name)?;
            write_u64(w, value)?;
        }
        let params = model.named_parameters();
        write_u32(w, params.len() as u32)?;
        for (name, t) in params {
            write_str(w, &name)?;
            write_u32(w, t.shape().len() as u32)?;
            for &d in t.shape() {
                write_u64(w, d as u64)?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut w, CHECKPOINT_VERSION)?;
        w.write_all(&body)?;
        write_u64(&mut w, body_checksum(&body))?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TinyModel<f32>, ModelError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 + 4 + 8 {
        return Err(ModelError::Checkpoint("truncated file (header)".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!("bad magic {:?}", &bytes[..4])));
    }
    let body = &bytes[8..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if body_checksum(body) != stored {
        return Err(ModelError::Checkpoint("checksum mismatch (corrupted file)".into()));
    }
    let mut r = std::io::Cursor::new(&bytes[4..8]);
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut r = std::io::Cursor::new(body);
    let n_fields = read_u32(&mut r)? as usize;
    let mut fields = std::collections::BTreeMap::new();
    for _ in 0..n_fields {
        let name = read_str(&mut r)?;
        let value = read_u64(&mut r)?;
        fields.insert(name, value);
    }
    let get = |name: &str| -> Result<u64, ModelError> {
        fields
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Checkpoint(format!("missing config field {name}")))
    };
    let config = ModelConfig {
        n_layers: get("n_layers")? as usize,
        model_dim: get("model_dim")? as usize,
        n_heads: get("n_heads")? as usize,
        n_kv_heads: get("n_kv_heads")? as usize,
        head_dim: get("head_dim")? as usize,
        intermediate_size: get("intermediate_size")? as usize,
        vocab_size: get("vocab_size")? as usize,
        context_length: get("context_length")? as usize,
        sliding_window: get("sliding_window")? as usize,
        rope_theta: f64::from_bits(get("rope_theta_bits")?),
    };
    config.validate().map_err(|e| ModelError::Checkpoint(format!("invalid config: {e}")))?;
    let mut model = TinyModel::<f32>::zeros_like(&config);
    let n_params = read_u32(&mut r)? as usize;
    let expected = model.named_parameters().len();
    if n_params != expected {
        return Err(ModelError::Checkpoint(format!(
            "parameter count {n_params} does not match config (expected {expected})"
        )));
    }
    let expected_shapes: std::collections::BTreeMap<String, Vec<usize>> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut records: std::collections::BTreeMap<String, Vec<f32>> = std::collections::BTreeMap::new();
    for _ in 0..n_params {
        let name = read_str(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let Some(expected_shape) = expected_shapes.get(&name) else {
            return Err(ModelError::Checkpoint(format!("unknown parameter {name}")));
        };
        if expected_shape != &dims {
            return Err(ModelError::Checkpoint(format!(
                "shape mismatch for parameter {name}: file has {dims:?}, config implies {expected_shape:?}"
            )));
        }
        let count: usize = dims.iter().product();
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)
            .map_err(|_| ModelError::Checkpoint(format!("truncated payload for parameter {name}")))?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if records.insert(name.clone(), values).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate parameter record {name}")));
        }
    }
    if records.len() != expected {
        return Err(ModelError::Checkpoint("missing parameter records".into()));
    }
    for (name, t) in model.named_parameters_mut() {
        let values = records.remove(&name).expect("checked above");
        t.data_mut().copy_from_slice(&values);
    }
    Ok(model)
}
