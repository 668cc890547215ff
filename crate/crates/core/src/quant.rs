//! Block-wise symmetric k-bit weight quantization with optional
//! importance-matrix calibration, plus the fidelity metric suite comparing a
//! quantized model's token distributions against the full-precision
//! reference (perplexity, KL divergence, correct-token probability shift,
//! top-token agreement).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TinyModel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("bits must be in 2..=8, got {0}")]
    InvalidBits(u8),
    #[error("block size must be positive")]
    InvalidBlockSize,
    #[error("empty block")]
    EmptyBlock,
    #[error("empty calibration stream")]
    EmptyStream,
    #[error("eval stream needs at least 2 tokens, got {0}")]
    StreamTooShort(usize),
    #[error("importance for {param} has {actual} rows, parameter has {expected}")]
    ImportanceShape {
        param: String,
        expected: usize,
        actual: usize,
    },
    #[error("importance matrix missing entry for {0}")]
    ImportanceMissing(String),
    #[error("negative importance {value} for {param}")]
    NegativeImportance { param: String, value: f64 },
    #[error("vocab mismatch: reference {reference}, quantized {quantized}")]
    VocabMismatch { reference: usize, quantized: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Symmetric quantization scheme: `bits` per code plus one 32-bit scale per
/// block of `block_size` weights (ragged final block allowed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u8,
    pub block_size: usize,
    pub imatrix_enabled: bool,
}

impl QuantScheme {
    pub fn new(bits: u8, imatrix_enabled: bool) -> Result<Self, QuantError> {
        let s = Self {
            bits,
            block_size: 32,
            imatrix_enabled,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if !(2..=8).contains(&self.bits) {
            return Err(QuantError::InvalidBits(self.bits));
        }
        if self.block_size == 0 {
            return Err(QuantError::InvalidBlockSize);
        }
        Ok(())
    }

    /// Largest representable code magnitude.
    pub fn qmax(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    pub fn label(&self) -> String {
        format!("Q{}", self.bits)
    }
}

/// Per-parameter, per-input-row importance weights: accumulated squared
/// input activations for linear weights, token counts for the embedding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    /// Keyed by parameter name; one weight per row of the `[in, out]`
    /// parameter matrix.
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl ImportanceMatrix {
    /// Pointwise sum with another accumulation run.
    pub fn accumulate(&mut self, other: &ImportanceMatrix) {
        for (name, vals) in &other.rows {
            let entry = self.rows.entry(name.clone()).or_insert_with(|| vec![0.0; vals.len()]);
            for (a, b) in entry.iter_mut().zip(vals) {
                *a += b;
            }
        }
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn weighted_error(values: &[f32], importance: Option<&[f64]>, scale: f64, qmax: i32) -> f64 {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let imp = importance.map_or(1.0, |w| w[i]);
            let code = if scale == 0.0 {
                0.0
            } else {
                ((v as f64 / scale).round()).clamp(-(qmax as f64), qmax as f64)
            };
            let err = v as f64 - scale * code;
            imp * err * err
        })
        .sum()
}

/// Quantize one block. Without importance the scale is `max|v| / qmax`;
/// with importance it minimizes the weighted reconstruction error by
/// golden-section search over `[0.5, 1.2] * max|v| / qmax`.
pub fn quantize_block(
    values: &[f32],
    scheme: &QuantScheme,
    importance: Option<&[f64]>,
) -> Result<(Vec<i8>, f32), QuantError> {
    scheme.validate()?;
    if values.is_empty() {
        return Err(QuantError::EmptyBlock);
    }
    let qmax = scheme.qmax();
    let maxabs = values.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if maxabs == 0.0 {
        return Ok((vec![0; values.len()], 0.0));
    }
    let base = maxabs as f64 / qmax as f64;
    let scale = match importance {
        None => base,
        Some(w) => {
            let mut lo = 0.5 * base;
            let mut hi = 1.2 * base;
            let tol = 1e-6 * (hi - lo);
            let mut a = hi - GOLDEN * (hi - lo);
            let mut b = lo + GOLDEN * (hi - lo);
            let mut fa = weighted_error(values, Some(w), a, qmax);
            let mut fb = weighted_error(values, Some(w), b, qmax);
            while hi - lo > tol {
                if fa <= fb {
                    hi = b;
                    b = a;
                    fb = fa;
                    a = hi - GOLDEN * (hi - lo);
                    fa = weighted_error(values, Some(w), a, qmax);
                } else {
                    lo = a;
                    a = b;
                    fa = fb;
                    b = lo + GOLDEN * (hi - lo);
                    fb = weighted_error(values, Some(w), b, qmax);
                }
            }
            (lo + hi) / 2.0
        }
    };
    let codes = values
        .iter()
        .map(|&v| ((v as f64 / scale).round()).clamp(-(qmax as f64), qmax as f64) as i8)
        .collect();
    Ok((codes, scale as f32))
}

/// Which parameters are quantized (everything except norm gains), and the
/// activation feeding each one. Row importance attaches to dim 0 of the
/// `[in, out]` weight.
fn is_quantized(name: &str) -> bool {
    !name.ends_with("norm")
}

/// Per-input-row importance from calibration forward passes: for every
/// linear weight, the running sum over positions of the squared input
/// activation in that row's dimension; for the embedding, how often each
/// token row was looked up.
pub fn accumulate_imatrix(
    model: &TinyModel<f32>,
    stream: &[u32],
) -> Result<ImportanceMatrix, QuantError> {
    if stream.is_empty() {
        return Err(QuantError::EmptyStream);
    }
    let cfg = &model.config;
    let mut im = ImportanceMatrix::default();
    fn add_rows(im: &mut ImportanceMatrix, name: String, x: &Tensor<f32>) {
        let d = x.last_dim();
        let entry = im.rows.entry(name).or_insert_with(|| vec![0.0; d]);
        for r in 0..x.row_count() {
            for (acc, &v) in entry.iter_mut().zip(x.row(r)) {
                *acc += (v as f64) * (v as f64);
            }
        }
    }
    for chunk in stream.chunks(cfg.context_length) {
        let (_, cache) = model.forward_with_cache(chunk)?;
        for (li, lc) in cache.layers.iter().enumerate() {
            for wname in ["wq", "wk", "wv"] {
                add_rows(&mut im, format!("layers.{li}.{wname}"), &lc.normed1);
            }
            add_rows(&mut im, format!("layers.{li}.wo"), &lc.attn_concat);
            for wname in ["w_gate", "w_up"] {
                add_rows(&mut im, format!("layers.{li}.{wname}"), &lc.normed2);
            }
            add_rows(&mut im, format!("layers.{li}.w_down"), &lc.swiglu.hidden);
        }
        add_rows(&mut im, "lm_head".to_string(), &cache.normed_final);
        let emb = im
            .rows
            .entry("embedding".to_string())
            .or_insert_with(|| vec![0.0; cfg.vocab_size]);
        for &id in chunk {
            emb[id as usize] += 1.0;
        }
    }
    Ok(im)
}

fn quantize_tensor(
    t: &mut Tensor<f32>,
    scheme: &QuantScheme,
    row_importance: Option<&[f64]>,
) -> Result<f64, QuantError> {
    let mut bytes = 0.0f64;
    let cols = t.last_dim();
    let rows = t.row_count();
    // blocks run down dim 0 so per-input-row importance varies inside a block
    for c in 0..cols {
        let mut r0 = 0;
        while r0 < rows {
            let r1 = (r0 + scheme.block_size).min(rows);
            let vals: Vec<f32> = (r0..r1).map(|r| t.row(r)[c]).collect();
            let imp: Option<Vec<f64>> = row_importance.map(|w| w[r0..r1].to_vec());
            let (codes, scale) = quantize_block(&vals, scheme, imp.as_deref())?;
            for (r, code) in (r0..r1).zip(codes) {
                t.row_mut(r)[c] = scale * code as f32;
            }
            bytes += (scheme.bits as f64 * (r1 - r0) as f64 + 32.0) / 8.0;
            r0 = r1;
        }
    }
    Ok(bytes)
}

/// Quantize then dequantize every linear/embedding weight in place
/// (simulated quantized inference); norm gains stay full precision. Returns
/// the quantized model and the estimated on-disk size in bytes.
pub fn quantize_model(
    model: &TinyModel<f32>,
    scheme: &QuantScheme,
    imatrix: Option<&ImportanceMatrix>,
) -> Result<(TinyModel<f32>, f64), QuantError> {
    scheme.validate()?;
    let mut out = model.clone();
    let mut total = 0.0;
    for (name, t) in out.named_parameters_mut() {
        if !is_quantized(&name) {
            continue;
        }
        let imp = match imatrix {
            None => None,
            Some(im) => {
                let rows = im
                    .rows
                    .get(&name)
                    .ok_or_else(|| QuantError::ImportanceMissing(name.clone()))?;
                if rows.len() != t.row_count() {
                    return Err(QuantError::ImportanceShape {
                        param: name.clone(),
                        expected: t.row_count(),
                        actual: rows.len(),
                    });
                }
                if let Some(&bad) = rows.iter().find(|&&v| v < 0.0) {
                    return Err(QuantError::NegativeImportance {
                        param: name.clone(),
                        value: bad,
                    });
                }
                Some(rows.as_slice())
            }
        };
        total += quantize_tensor(t, scheme, imp)?;
    }
    Ok((out, total))
}

/// KL(p ‖ q) in nats; terms with p = 0 contribute 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Fidelity metrics; `delta_*p` fields are in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub scheme: String,
    pub imatrix: bool,
    pub size_bytes: f64,
    pub ppl_ref: f64,
    pub ppl_q: f64,
    pub delta_ppl: f64,
    pub kld_mean: f64,
    pub mean_dp: f64,
    pub rms_dp: f64,
    pub same_top_percent: f64,
    pub positions: usize,
}

impl FidelityReport {
    pub fn size_gib(&self) -> f64 {
        self.size_bytes / (1u64 << 30) as f64
    }

    pub fn csv_header() -> &'static str {
        "scheme,imatrix,size_gib,ppl,delta_ppl,kld,mean_dp,rms_dp,same_top_p"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.4},{:.4},{:.6},{:.4},{:.4},{:.2}",
            self.scheme,
            if self.imatrix { "Y" } else { "N" },
            self.size_gib(),
            self.ppl_q,
            self.delta_ppl,
            self.kld_mean,
            self.mean_dp,
            self.rms_dp,
            self.same_top_percent
        )
    }
}

#[derive(Default, Clone, Copy)]
struct FidelityAccum {
    nll_ref: f64,
    nll_q: f64,
    kl: f64,
    dp: f64,
    dp2: f64,
    same_top: usize,
    positions: usize,
}

impl FidelityAccum {
    fn merge(mut self, o: FidelityAccum) -> FidelityAccum {
        self.nll_ref += o.nll_ref;
        self.nll_q += o.nll_q;
        self.kl += o.kl;
        self.dp += o.dp;
        self.dp2 += o.dp2;
        self.same_top += o.same_top;
        self.positions += o.positions;
        self
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Teacher-forced comparison of next-token distributions over the eval
/// stream, processed in context-length windows. PPL = exp(mean NLL of the
/// true next token); KLD is KL(reference ‖ quantized).
pub fn fidelity(
    reference: &TinyModel<f32>,
    quantized: &TinyModel<f32>,
    stream: &[u32],
    scheme_label: &str,
    imatrix: bool,
    size_bytes: f64,
) -> Result<FidelityReport, QuantError> {
    if reference.config.vocab_size != quantized.config.vocab_size {
        return Err(QuantError::VocabMismatch {
            reference: reference.config.vocab_size,
            quantized: quantized.config.vocab_size,
        });
    }
    if stream.len() < 2 {
        return Err(QuantError::StreamTooShort(stream.len()));
    }
    let ctx = reference.config.context_length.min(quantized.config.context_length);
    let windows: Vec<&[u32]> = stream
        .chunks(ctx)
        .filter(|w| w.len() >= 2)
        .collect();
    let partials: Vec<Result<FidelityAccum, QuantError>> = windows
        .par_iter()
        .map(|window| {
            let lr = reference.forward(window)?;
            let lq = quantized.forward(window)?;
            let mut acc = FidelityAccum::default();
            for p in 0..window.len() - 1 {
                let pr = softmax_f64(lr.row(p));
                let pq = softmax_f64(lq.row(p));
                let truth = window[p + 1] as usize;
                acc.nll_ref += -pr[truth].ln();
                acc.nll_q += -pq[truth].ln();
                acc.kl += kl_divergence(&pr, &pq);
                let dp = pq[truth] - pr[truth];
                acc.dp += dp;
                acc.dp2 += dp * dp;
                acc.same_top += usize::from(argmax(&pr) == argmax(&pq));
                acc.positions += 1;
            }
            Ok(acc)
        })
        .collect();
    let mut total = FidelityAccum::default();
    for p in partials {
        total = total.merge(p?);
    }
    let n = total.positions as f64;
    let ppl_ref = (total.nll_ref / n).exp();
    let ppl_q = (total.nll_q / n).exp();
    Ok(FidelityReport {
        scheme: scheme_label.to_string(),
        imatrix,
        size_bytes,
        ppl_ref,
        ppl_q,
        delta_ppl: ppl_q - ppl_ref,
        kld_mean: total.kl / n,
        mean_dp: 100.0 * total.dp / n,
        rms_dp: 100.0 * (total.dp2 / n).sqrt(),
        same_top_percent: 100.0 * total.same_top as f64 / n,
        positions: total.positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.n_layers = 2;
        cfg.model_dim = 32;
        cfg.n_heads = 4;
        cfg.n_kv_heads = 2;
        cfg.head_dim = 8;
        cfg.intermediate_size = 64;
        cfg.vocab_size = 64;
        cfg.context_length = 32;
        cfg.sliding_window = 16;
        cfg
    }

    #[test]
    fn zero_block_quantizes_to_zeros() {
        let scheme = QuantScheme::new(4, false).unwrap();
        let (codes, scale) = quantize_block(&[0.0; 8], &scheme, None).unwrap();
        assert_eq!(scale, 0.0);
        assert!(codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn eight_bit_block_scale_and_error_bound() {
        let scheme = QuantScheme::new(8, false).unwrap();
        let vals = [1.0f32, -2.0, 3.0, -4.0];
        let (codes, scale) = quantize_block(&vals, &scheme, None).unwrap();
        assert!((scale - 4.0 / 127.0).abs() < 1e-7);
        for (&v, &c) in vals.iter().zip(&codes) {
            let err = (v - scale * c as f32).abs();
            assert!(err <= scale / 2.0 + 1e-7, "err {err} > scale/2 {}", scale / 2.0);
        }
    }

    #[test]
    fn uniform_importance_matches_unweighted_scale() {
        // values exactly representable at the base scale: the weighted
        // objective has its zero there, so the search must land on it
        let scheme = QuantScheme::new(3, false).unwrap(); // qmax = 3
        let vals = [0.5f32, -1.0, 1.5];
        let (_, s_plain) = quantize_block(&vals, &scheme, None).unwrap();
        let (_, s_unif) = quantize_block(&vals, &scheme, Some(&[1.0, 1.0, 1.0])).unwrap();
        assert!((s_plain - 0.5).abs() < 1e-7);
        assert!(
            (s_unif - s_plain).abs() < 1e-3,
            "uniform {s_unif} vs plain {s_plain}"
        );
    }

    #[test]
    fn importance_search_never_worse_than_base_scale() {
        let scheme = QuantScheme::new(2, false).unwrap();
        let vals: Vec<f32> = (0..32).map(|i| ((i * 37 % 17) as f32 - 8.0) * 0.1).collect();
        let imp: Vec<f64> = (0..32).map(|i| 1.0 + (i % 5) as f64).collect();
        let (_, s) = quantize_block(&vals, &scheme, Some(&imp)).unwrap();
        let maxabs = vals.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let base = maxabs as f64 / scheme.qmax() as f64;
        let e_found = weighted_error(&vals, Some(&imp), s as f64, scheme.qmax());
        let e_base = weighted_error(&vals, Some(&imp), base, scheme.qmax());
        assert!(e_found <= e_base + 1e-9, "found {e_found} base {e_base}");
    }

    #[test]
    fn imatrix_hand_trace_on_first_layer() {
        let cfg = tiny_config();
        let model = TinyModel::<f32>::init(&cfg, 5).unwrap();
        let stream: Vec<u32> = (0..8).map(|i| (i * 7) % cfg.vocab_size as u32).collect();
        let im = accumulate_imatrix(&model, &stream).unwrap();
        // independent recomputation of the wq input: embed + rmsnorm by hand
        let mut expected = vec![0.0f64; cfg.model_dim];
        for &id in &stream {
            let row = model.embedding.row(id as usize);
            let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
                / cfg.model_dim as f64;
            let inv = 1.0 / (ms + crate::model::RMS_EPS).sqrt();
            for (d, &v) in row.iter().enumerate() {
                let gain = model.layers[0].attn_norm.data()[d] as f64;
                let normed = (v as f64 * inv) as f32 as f64 * gain;
                expected[d] += normed * normed;
            }
        }
        let got = &im.rows["layers.0.wq"];
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-4 * (1.0 + e.abs()), "{g} vs {e}");
        }
        // embedding importance = token counts
        let emb = &im.rows["embedding"];
        assert_eq!(emb.iter().sum::<f64>(), stream.len() as f64);
    }

    #[test]
    fn imatrix_is_additive_and_rejects_empty_stream() {
        let cfg = tiny_config();
        let model = TinyModel::<f32>::init(&cfg, 1).unwrap();
        let s1: Vec<u32> = vec![1, 2, 3, 4];
        let s2: Vec<u32> = vec![9, 8, 7];
        let mut both = accumulate_imatrix(&model, &s1).unwrap();
        both.accumulate(&accumulate_imatrix(&model, &s2).unwrap());
        let mut joint: Vec<u32> = s1.clone();
        joint.extend(&s2);
        // different chunking would change per-window rmsnorm context, so
        // compare against two separate runs instead of one concatenated one
        let mut again = accumulate_imatrix(&model, &s1).unwrap();
        again.accumulate(&accumulate_imatrix(&model, &s2).unwrap());
        assert_eq!(both, again);
        assert!(matches!(
            accumulate_imatrix(&model, &[]),
            Err(QuantError::EmptyStream)
        ));
    }

    #[test]
    fn quantize_model_spares_norms_and_shrinks_with_bits() {
        let cfg = tiny_config();
        let model = TinyModel::<f32>::init(&cfg, 2).unwrap();
        let mut sizes = Vec::new();
        for bits in [8u8, 6, 4, 3, 2] {
            let scheme = QuantScheme::new(bits, false).unwrap();
            let (q, size) = quantize_model(&model, &scheme, None).unwrap();
            sizes.push(size);
            for ((name, orig), (_, quant)) in
                model.named_parameters().iter().zip(q.named_parameters())
            {
                if name.ends_with("norm") {
                    assert_eq!(orig.data(), quant.data(), "{name} gain changed");
                }
            }
            let logits = q.forward(&[1, 2, 3]).unwrap();
            logits.check_finite().unwrap();
        }
        for w in sizes.windows(2) {
            assert!(w[0] > w[1], "size must decrease with bits: {sizes:?}");
        }
    }

    #[test]
    fn quantize_model_validates_imatrix_shapes() {
        let cfg = tiny_config();
        let model = TinyModel::<f32>::init(&cfg, 3).unwrap();
        let scheme = QuantScheme::new(4, true).unwrap();
        let mut im = accumulate_imatrix(&model, &[1, 2, 3, 4]).unwrap();
        im.rows.get_mut("layers.0.wq").unwrap().pop();
        assert!(matches!(
            quantize_model(&model, &scheme, Some(&im)),
            Err(QuantError::ImportanceShape { .. })
        ));
        let empty = ImportanceMatrix::default();
        assert!(matches!(
            quantize_model(&model, &scheme, Some(&empty)),
            Err(QuantError::ImportanceMissing(_))
        ));
    }

    #[test]
    fn kl_fixture_and_identities() {
        let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
        assert!((kl - 0.143841).abs() < 1e-6, "kl = {kl}");
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!(kl_divergence(&[0.9, 0.1], &[0.1, 0.9]) > 0.0);
    }

    #[test]
    fn fidelity_of_identical_models_is_exact() {
        let cfg = tiny_config();
        let model = TinyModel::<f32>::init(&cfg, 4).unwrap();
        let stream: Vec<u32> = (0..80).map(|i| (i * 13 % cfg.vocab_size) as u32).collect();
        let r = fidelity(&model, &model, &stream, "Q8", false, 0.0).unwrap();
        assert_eq!(r.delta_ppl, 0.0);
        assert_eq!(r.kld_mean, 0.0);
        assert_eq!(r.mean_dp, 0.0);
        assert_eq!(r.rms_dp, 0.0);
        assert_eq!(r.same_top_percent, 100.0);
        // windows of 32 tokens predict 31 next tokens each
        assert_eq!(r.positions, 31 + 31 + 15);
    }

    #[test]
    fn fidelity_rejects_vocab_mismatch_and_short_stream() {
        let cfg = tiny_config();
        let model = TinyModel::<f32>::init(&cfg, 4).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.vocab_size = 128;
        let other = TinyModel::<f32>::init(&cfg2, 4).unwrap();
        assert!(matches!(
            fidelity(&model, &other, &[1, 2, 3], "Q8", false, 0.0),
            Err(QuantError::VocabMismatch { .. })
        ));
        assert!(matches!(
            fidelity(&model, &model, &[1], "Q8", false, 0.0),
            Err(QuantError::StreamTooShort(1))
        ));
    }

    #[test]
    fn rms_dp_dominates_mean_dp() {
        let cfg = tiny_config();
        let model = TinyModel::<f32>::init(&cfg, 6).unwrap();
        let scheme = QuantScheme::new(3, false).unwrap();
        let (q, size) = quantize_model(&model, &scheme, None).unwrap();
        let stream: Vec<u32> = (0..100).map(|i| (i * 11 % cfg.vocab_size) as u32).collect();
        let r = fidelity(&model, &q, &stream, "Q3", false, size).unwrap();
        assert!(r.kld_mean > 0.0);
        assert!(r.rms_dp >= r.mean_dp.abs());
    }

    #[test]
    fn eight_bit_generation_mostly_unchanged() {
        use crate::train::{train, AdamWConfig, InstructionSample, ScheduleConfig, TrainConfig};
        // a freshly initialized model has near-uniform logits, where greedy
        // argmax flips under any perturbation; memorize a short repeating
        // pattern first so the comparison runs on confident distributions
        let cfg = tiny_config();
        let mut model = TinyModel::<f32>::init(&cfg, 9).unwrap();
        let tokens: Vec<u32> = (0..24).map(|i| (i * 3 % cfg.vocab_size) as u32).collect();
        let sample = InstructionSample {
            mask: vec![true; tokens.len()],
            tokens: tokens.clone(),
            weight: 1.0,
        };
        let tc = TrainConfig {
            schedule: ScheduleConfig {
                base_lr: 1e-3,
                min_lr: 1e-4,
                warmup_iters: 10,
                total_iters: 200,
                baseline_batch_tokens: 24,
                alr_enabled: false,
            },
            optimizer: AdamWConfig::default(),
            batch_size: 1,
            seed: 7,
        };
        train(&mut model, &[sample], &tc).unwrap();
        let scheme = QuantScheme::new(8, false).unwrap();
        let (q, _) = quantize_model(&model, &scheme, None).unwrap();
        let prompt: Vec<u32> = tokens[..16].to_vec();
        let a = model.generate(&prompt, 32, 0.0, 0).unwrap();
        let b = q.generate(&prompt, 32, 0.0, 0).unwrap();
        let diff = a
            .tokens
            .iter()
            .zip(&b.tokens)
            .filter(|(x, y)| x != y)
            .count();
        assert!(
            diff * 10 < a.tokens.len(),
            "{diff}/{} generated tokens changed at 8 bits",
            a.tokens.len()
        );
    }
}
