//! Architecture building blocks: softmax, RMSNorm, SwiGLU, rotary embeddings,
//! grouped-query attention with causal/sliding-window masking, plus matmul,
//! embedding lookup and cross-entropy.
//!
//! Every forward op has a paired analytic backward. Backwards take the
//! forward inputs (or cached outputs) explicitly; there is no tape.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
}

/// Attention geometry and masking parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// `None` disables windowing (full causal span).
    pub sliding_window: Option<usize>,
    pub rope_theta: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(NnError::Config("head counts and head_dim must be positive".into()));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(NnError::Config(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(NnError::Config(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim
            )));
        }
        if self.sliding_window == Some(0) {
            return Err(NnError::Config("sliding_window must be at least 1".into()));
        }
        if !(self.rope_theta > 0.0) {
            return Err(NnError::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// KV head serving query head `q`: contiguous blocks of queries share one KV head.
    pub fn kv_head_for(&self, q: usize) -> usize {
        q * self.n_kv_heads / self.n_heads
    }
}

fn axis_extents<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(usize, usize, usize), NnError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(NnError::Tensor(TensorError::AxisOutOfRange {
            axis,
            rank: shape.len(),
        }));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NnError> {
    x.check_finite()?;
    let (outer, len, inner) = axis_extents(x, axis)?;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                let v = src[base + a * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for a in 0..len {
                let e = (src[base + a * inner] - max).exp();
                dst[base + a * inner] = e;
                sum = sum + e;
            }
            for a in 0..len {
                dst[base + a * inner] = dst[base + a * inner] / sum;
            }
        }
    }
    Ok(out)
}

/// Backward of softmax given its output `y` and upstream gradient `dy`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_extents(y, axis).expect("axis validated in forward");
    let mut dx = Tensor::zeros(y.shape());
    let yv = y.data();
    let gv = dy.data();
    let dst = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                dot = dot + yv[base + a * inner] * gv[base + a * inner];
            }
            for a in 0..len {
                let idx = base + a * inner;
                dst[idx] = yv[idx] * (gv[idx] - dot);
            }
        }
    }
    dx
}

/// RMS normalization over the last dimension with learned gain.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>, NnError> {
    let d = x.last_dim();
    if gain.len() != d {
        return Err(NnError::Shape {
            op: "rmsnorm",
            detail: format!("gain length {} vs last dim {}", gain.len(), d),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    let nd = T::from_usize(d).unwrap();
    for r in 0..x.row_count() {
        let row = x.row(r);
        let mut ss = T::zero();
        for &v in row {
            ss = ss + v * v;
        }
        let inv = (ss / nd + eps).sqrt().recip();
        let out_row = out.row_mut(r);
        for (i, &v) in row.iter().enumerate() {
            out_row[i] = v * inv * gain.data()[i];
        }
    }
    Ok(out)
}

/// Backward of rmsnorm; returns `(dx, dgain)`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = x.last_dim();
    let nd = T::from_usize(d).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(gain.shape());
    for r in 0..x.row_count() {
        let xr = x.row(r);
        let gr = dy.row(r);
        let mut ss = T::zero();
        for &v in xr {
            ss = ss + v * v;
        }
        let inv = (ss / nd + eps).sqrt().recip();
        let inv3 = inv * inv * inv;
        // dot = sum_j dy_j * gain_j * x_j
        let mut dot = T::zero();
        for j in 0..d {
            dot = dot + gr[j] * gain.data()[j] * xr[j];
        }
        let dxr = dx.row_mut(r);
        for i in 0..d {
            dxr[i] = gr[i] * gain.data()[i] * inv - xr[i] * inv3 / nd * dot;
        }
        for i in 0..d {
            dgain.data_mut()[i] = dgain.data_mut()[i] + gr[i] * xr[i] * inv;
        }
    }
    (dx, dgain)
}

/// `a [m,k] · b [k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (m, k) = (a.row_count(), a.last_dim());
    let (kb, n) = (b.row_count(), b.last_dim());
    if k != kb || a.rank() != 2 || b.rank() != 2 {
        return Err(NnError::Shape {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    let av = a.data();
    let bv = b.data();
    let ov = out.data_mut();
    for i in 0..m {
        for p in 0..k {
            let aip = av[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &bv[p * n..(p + 1) * n];
            let orow = &mut ov[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    Ok(out)
}

/// Backward of matmul; returns `(da, db)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.row_count(), a.last_dim());
    let n = b.last_dim();
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    let av = a.data();
    let bv = b.data();
    let gv = dy.data();
    // da = dy · b^T
    {
        let dav = da.data_mut();
        for i in 0..m {
            for p in 0..k {
                let mut acc = T::zero();
                for j in 0..n {
                    acc = acc + gv[i * n + j] * bv[p * n + j];
                }
                dav[i * k + p] = acc;
            }
        }
    }
    // db = a^T · dy
    {
        let dbv = db.data_mut();
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                for j in 0..n {
                    dbv[p * n + j] = dbv[p * n + j] + aip * gv[i * n + j];
                }
            }
        }
    }
    (da, db)
}

pub fn silu<T: Scalar>(z: T) -> T {
    z / (T::one() + (-z).exp())
}

pub fn silu_grad<T: Scalar>(z: T) -> T {
    let s = T::one() / (T::one() + (-z).exp());
    s * (T::one() + z * (T::one() - s))
}

/// Cached intermediates of a SwiGLU forward pass.
pub struct SwigluCache<T> {
    pub gate_pre: Tensor<T>,
    pub up: Tensor<T>,
    pub hidden: Tensor<T>,
}

/// `w_down · (silu(w_gate · x) ⊙ (w_up · x))` for `x [m, d]`.
pub fn swiglu<T: Scalar>(
    x: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
) -> Result<(Tensor<T>, SwigluCache<T>), NnError> {
    let gate_pre = matmul(x, w_gate)?;
    let up = matmul(x, w_up)?;
    let mut hidden = Tensor::zeros(gate_pre.shape());
    for (h, (&g, &u)) in hidden
        .data_mut()
        .iter_mut()
        .zip(gate_pre.data().iter().zip(up.data()))
    {
        *h = silu(g) * u;
    }
    let out = matmul(&hidden, w_down)?;
    Ok((out, SwigluCache { gate_pre, up, hidden }))
}

/// Backward of swiglu; returns `(dx, dw_gate, dw_up, dw_down)`.
pub fn swiglu_backward<T: Scalar>(
    x: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
    cache: &SwigluCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let (dhidden, dw_down) = matmul_backward(&cache.hidden, w_down, dy);
    let mut dgate = Tensor::zeros(cache.gate_pre.shape());
    let mut dup = Tensor::zeros(cache.up.shape());
    for i in 0..dhidden.len() {
        let g = cache.gate_pre.data()[i];
        let u = cache.up.data()[i];
        let dh = dhidden.data()[i];
        dgate.data_mut()[i] = dh * u * silu_grad(g);
        dup.data_mut()[i] = dh * silu(g);
    }
    let (dx_g, dw_gate) = matmul_backward(x, w_gate, &dgate);
    let (mut dx, dw_up) = matmul_backward(x, w_up, &dup);
    dx.add_assign(&dx_g).expect("same shape");
    (dx, dw_gate, dw_up, dw_down)
}

/// Rotate consecutive dimension pairs of each head by `pos · theta^(-2i/d)`.
///
/// `x` is `[seq, n_heads·head_dim]`; `positions` gives the absolute position of
/// each sequence row.
pub fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    head_dim: usize,
    theta: f64,
) -> Result<Tensor<T>, NnError> {
    if head_dim % 2 != 0 {
        return Err(NnError::Config(format!("head_dim {head_dim} must be even")));
    }
    let width = x.last_dim();
    if width % head_dim != 0 {
        return Err(NnError::Shape {
            op: "rope_apply",
            detail: format!("last dim {width} not a multiple of head_dim {head_dim}"),
        });
    }
    if positions.len() != x.row_count() {
        return Err(NnError::Shape {
            op: "rope_apply",
            detail: format!("{} positions for {} rows", positions.len(), x.row_count()),
        });
    }
    rope_rotate(x, positions, head_dim, theta, false)
}

/// Backward of rope_apply: rotation by the negated angles.
pub fn rope_backward<T: Scalar>(
    dy: &Tensor<T>,
    positions: &[usize],
    head_dim: usize,
    theta: f64,
) -> Tensor<T> {
    rope_rotate(dy, positions, head_dim, theta, true).expect("shapes validated in forward")
}

fn rope_rotate<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    head_dim: usize,
    theta: f64,
    invert: bool,
) -> Result<Tensor<T>, NnError> {
    let width = x.last_dim();
    let n_heads = width / head_dim;
    let half = head_dim / 2;
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.row_count() {
        let pos = positions[r] as f64;
        let src = x.row(r);
        let dst = out.row_mut(r);
        for h in 0..n_heads {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let mut angle = pos * freq;
                if invert {
                    angle = -angle;
                }
                let (sin, cos) = (T::scalar_from(angle.sin()), T::scalar_from(angle.cos()));
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (src[a], src[a + 1]);
                dst[a] = x0 * cos - x1 * sin;
                dst[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    Ok(out)
}

/// Per-head attention weights kept for the backward pass.
pub struct AttnCache<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// `[n_heads][q_pos][k_pos]`, exactly 0 at masked positions.
    pub weights: Vec<Vec<Vec<T>>>,
    pub cfg: AttentionConfig,
    pub causal: bool,
}

fn mask_allows(cfg: &AttentionConfig, causal: bool, i: usize, j: usize) -> bool {
    if causal && j > i {
        return false;
    }
    if let Some(w) = cfg.sliding_window {
        // position i attends to j with i - w < j <= i
        if j + w <= i {
            return false;
        }
    }
    true
}

/// Grouped-query scaled dot-product attention with causal and sliding-window
/// masks. `q` is `[seq, n_heads·head_dim]`, `k`/`v` are `[seq, n_kv·head_dim]`.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<(Tensor<T>, AttnCache<T>), NnError> {
    cfg.validate()?;
    let seq = q.row_count();
    let hd = cfg.head_dim;
    if q.last_dim() != cfg.n_heads * hd {
        return Err(NnError::Shape {
            op: "attention",
            detail: format!("q width {} vs n_heads*head_dim {}", q.last_dim(), cfg.n_heads * hd),
        });
    }
    if k.last_dim() != cfg.n_kv_heads * hd || v.last_dim() != cfg.n_kv_heads * hd {
        return Err(NnError::Shape {
            op: "attention",
            detail: format!("k/v width {} vs n_kv_heads*head_dim {}", k.last_dim(), cfg.n_kv_heads * hd),
        });
    }
    if k.row_count() != seq || v.row_count() != seq {
        return Err(NnError::Shape {
            op: "attention",
            detail: "q/k/v sequence lengths differ".into(),
        });
    }
    let scale = T::scalar_from(1.0 / (hd as f64).sqrt());
    let mut out = Tensor::zeros(q.shape());
    let mut weights = vec![vec![vec![T::zero(); seq]; seq]; cfg.n_heads];
    for h in 0..cfg.n_heads {
        let kvh = cfg.kv_head_for(h);
        for i in 0..seq {
            let qrow = &q.row(i)[h * hd..(h + 1) * hd];
            // stable softmax over allowed positions only
            let mut scores: Vec<(usize, T)> = Vec::new();
            let mut max = T::neg_infinity();
            for j in 0..seq {
                if !mask_allows(cfg, causal, i, j) {
                    continue;
                }
                let krow = &k.row(j)[kvh * hd..(kvh + 1) * hd];
                let mut dot = T::zero();
                for d in 0..hd {
                    dot = dot + qrow[d] * krow[d];
                }
                let s = dot * scale;
                if s > max {
                    max = s;
                }
                scores.push((j, s));
            }
            let mut sum = T::zero();
            for (_, s) in scores.iter_mut() {
                *s = (*s - max).exp();
                sum = sum + *s;
            }
            let orow = &mut out.row_mut(i)[h * hd..(h + 1) * hd];
            for (j, e) in scores {
                let w = e / sum;
                weights[h][i][j] = w;
                let vrow = &v.row(j)[kvh * hd..(kvh + 1) * hd];
                for d in 0..hd {
                    orow[d] = orow[d] + w * vrow[d];
                }
            }
        }
    }
    Ok((
        out,
        AttnCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            weights,
            cfg: cfg.clone(),
            causal,
        },
    ))
}

/// Backward of attention; returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(cache: &AttnCache<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let cfg = &cache.cfg;
    let seq = cache.q.row_count();
    let hd = cfg.head_dim;
    let scale = T::scalar_from(1.0 / (hd as f64).sqrt());
    let mut dq = Tensor::zeros(cache.q.shape());
    let mut dk = Tensor::zeros(cache.k.shape());
    let mut dv = Tensor::zeros(cache.v.shape());
    for h in 0..cfg.n_heads {
        let kvh = cfg.kv_head_for(h);
        for i in 0..seq {
            let dorow = &dout.row(i)[h * hd..(h + 1) * hd];
            // dW[i][j] = dout_i · v_j ; weights row softmax backward
            let wrow = &cache.weights[h][i];
            let mut dw = vec![T::zero(); seq];
            let mut dot = T::zero();
            for j in 0..seq {
                if wrow[j] == T::zero() {
                    continue;
                }
                let vrow = &cache.v.row(j)[kvh * hd..(kvh + 1) * hd];
                let mut acc = T::zero();
                for d in 0..hd {
                    acc = acc + dorow[d] * vrow[d];
                }
                dw[j] = acc;
                dot = dot + wrow[j] * acc;
            }
            for j in 0..seq {
                let w = wrow[j];
                if w == T::zero() {
                    continue;
                }
                let dscore = w * (dw[j] - dot) * scale;
                let qrow = &cache.q.row(i)[h * hd..(h + 1) * hd];
                let krow = &cache.k.row(j)[kvh * hd..(kvh + 1) * hd];
                {
                    let dqrow = &mut dq.row_mut(i)[h * hd..(h + 1) * hd];
                    for d in 0..hd {
                        dqrow[d] = dqrow[d] + dscore * krow[d];
                    }
                }
                {
                    let dkrow = &mut dk.row_mut(j)[kvh * hd..(kvh + 1) * hd];
                    for d in 0..hd {
                        dkrow[d] = dkrow[d] + dscore * qrow[d];
                    }
                }
                {
                    let dvrow = &mut dv.row_mut(j)[kvh * hd..(kvh + 1) * hd];
                    for d in 0..hd {
                        dvrow[d] = dvrow[d] + w * dorow[d];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gather rows of `table [vocab, dim]` by token id.
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>, NnError> {
    let vocab = table.row_count();
    let dim = table.last_dim();
    let mut out = Tensor::zeros(&[ids.len(), dim]);
    for (r, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(NnError::Config(format!("token id {id} out of range (vocab {vocab})")));
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatter-add upstream gradients back into the embedding table.
pub fn embedding_backward<T: Scalar>(vocab: usize, dim: usize, ids: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dtable = Tensor::zeros(&[vocab, dim]);
    for (r, &id) in ids.iter().enumerate() {
        let src = dy.row(r);
        let dst = dtable.row_mut(id);
        for d in 0..dim {
            dst[d] = dst[d] + src[d];
        }
    }
    dtable
}

/// Per-row negative log-likelihood of `targets` under `softmax(logits)`,
/// computed with log-sum-exp max subtraction.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<T>, NnError> {
    let c = logits.last_dim();
    if targets.len() != logits.row_count() {
        return Err(NnError::Shape {
            op: "cross_entropy",
            detail: format!("{} targets for {} rows", targets.len(), logits.row_count()),
        });
    }
    let mut out = Vec::with_capacity(targets.len());
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(NnError::Config(format!("target {t} out of range (classes {c})")));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in row {
            sum = sum + (v - max).exp();
        }
        out.push(sum.ln() + max - row[t]);
    }
    Ok(out)
}

/// Gradient of summed cross-entropy w.r.t. logits: `softmax(logits) - onehot`.
pub fn cross_entropy_backward<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Tensor<T> {
    let mut probs = softmax(logits, logits.rank() - 1).expect("finite logits");
    for (r, &t) in targets.iter().enumerate() {
        let row = probs.row_mut(r);
        row[t] = row[t] - T::one();
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(v)
    }

    #[test]
    fn softmax_uniform_logits() {
        let y = softmax(&t(vec![0.0; 4]), 0).unwrap();
        for &p in y.data() {
            assert!((p - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_extreme_logits_no_overflow() {
        let y = softmax(&t(vec![1000.0, 0.0]), 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_known_values() {
        // frozen from a high-precision scalar oracle: exp(x_i)/sum exp
        let y = softmax(&t(vec![1.0, 2.0, 3.0]), 0).unwrap();
        let expect = [0.09003057f32, 0.24472847, 0.66524096];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax(&t(vec![0.0, f32::NAN]), 0).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn rmsnorm_unit_rms_identity() {
        let x = t(vec![1.0, 1.0, 1.0, 1.0]);
        let g = t(vec![1.0; 4]);
        let y = rmsnorm(&x, &g, 0.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn rmsnorm_scale_normalizing() {
        let y = rmsnorm(&t(vec![2.0, 2.0]), &t(vec![1.0, 1.0]), 0.0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-7);
        assert!((y.data()[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rmsnorm_with_gain_oracle() {
        // rms = sqrt((9+16)/2 + 1e-5) = sqrt(12.50001)
        let y = rmsnorm(&t(vec![3.0, 4.0]), &t(vec![1.0, 2.0]), 1e-5).unwrap();
        let rms = (12.50001f64).sqrt();
        assert!((y.data()[0] as f64 - 3.0 / rms).abs() < 1e-6);
        assert!((y.data()[1] as f64 - 8.0 / rms).abs() < 1e-6);
    }

    #[test]
    fn swiglu_zero_input_is_zero() {
        let x = Tensor::zeros(&[1, 2]);
        let wg = Tensor::full(&[2, 3], 0.5f32);
        let wu = Tensor::full(&[2, 3], 0.5f32);
        let wd = Tensor::full(&[3, 2], 0.5f32);
        let (y, _) = swiglu(&x, &wg, &wu, &wd).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn swiglu_scalar_identity_weights() {
        let one = Tensor::new(vec![1, 1], vec![1.0f32]).unwrap();
        let (y, _) = swiglu(&one, &one.clone(), &one.clone(), &one.clone()).unwrap();
        assert!((y.data()[0] - 0.7310586).abs() < 1e-6); // silu(1)
    }

    #[test]
    fn swiglu_up_path_is_linear() {
        let x = Tensor::new(vec![1, 2], vec![0.3f32, -0.7]).unwrap();
        let wg = Tensor::new(vec![2, 2], vec![0.1f32, 0.2, -0.3, 0.4]).unwrap();
        let wu = Tensor::new(vec![2, 2], vec![0.5f32, -0.6, 0.7, 0.8]).unwrap();
        let wd = Tensor::new(vec![2, 2], vec![0.9f32, 0.1, -0.2, 0.3]).unwrap();
        let (y1, _) = swiglu(&x, &wg, &wu, &wd).unwrap();
        let mut wu2 = wu.clone();
        wu2.scale(2.0);
        let (y2, _) = swiglu(&x, &wg, &wu2, &wd).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = Tensor::new(vec![1, 4], vec![0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let y = rope_apply(&x, &[0], 4, 10000.0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rope_unit_rotation() {
        // frequency of pair 0 is theta^0 = 1, so (1,0) at pos p -> (cos p, sin p)
        let x = Tensor::new(vec![1, 2], vec![1.0f32, 0.0]).unwrap();
        let y = rope_apply(&x, &[3], 2, 10000.0).unwrap();
        assert!((y.data()[0] - (3.0f32).cos()).abs() < 1e-6);
        assert!((y.data()[1] - (3.0f32).sin()).abs() < 1e-6);
    }

    #[test]
    fn rope_matches_per_pair_oracle() {
        let x = Tensor::new(vec![1, 4], vec![0.5f32, -1.0, 2.0, 0.25]).unwrap();
        let y = rope_apply(&x, &[2], 4, 10000.0).unwrap();
        let oracle = |x0: f64, x1: f64, angle: f64| (x0 * angle.cos() - x1 * angle.sin(), x0 * angle.sin() + x1 * angle.cos());
        let a0 = 2.0 * 10000f64.powf(0.0);
        let a1 = 2.0 * 10000f64.powf(-0.5);
        let (e0, e1) = oracle(0.5, -1.0, a0);
        let (e2, e3) = oracle(2.0, 0.25, a1);
        let expect = [e0, e1, e2, e3];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let x = Tensor::<f32>::zeros(&[1, 3]);
        assert!(rope_apply(&x, &[0], 3, 10000.0).is_err());
    }

    fn cfg(n_heads: usize, n_kv: usize, hd: usize, window: Option<usize>) -> AttentionConfig {
        AttentionConfig {
            n_heads,
            n_kv_heads: n_kv,
            head_dim: hd,
            sliding_window: window,
            rope_theta: 10000.0,
        }
    }

    #[test]
    fn attention_single_position_returns_v() {
        let q = Tensor::new(vec![1, 2], vec![0.7f32, -0.3]).unwrap();
        let k = Tensor::new(vec![1, 2], vec![1.5f32, 0.2]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![-2.0f32, 4.0]).unwrap();
        let (out, _) = attention(&q, &k, &v, &cfg(1, 1, 2, None), true).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_window_zeroes_distant_positions() {
        let seq = 5;
        let q = Tensor::new(vec![seq, 2], (0..seq * 2).map(|i| (i as f32) * 0.1).collect()).unwrap();
        let k = q.clone();
        let v = q.clone();
        let (_, cache) = attention(&q, &k, &v, &cfg(1, 1, 2, Some(2)), true).unwrap();
        // position 4 attends only to {3, 4}
        for j in 0..seq {
            let w = cache.weights[0][4][j];
            if j == 3 || j == 4 {
                assert!(w > 0.0);
            } else {
                assert_eq!(w, 0.0);
            }
        }
        let sum: f32 = cache.weights[0][4].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_rejects_zero_window() {
        let q = Tensor::<f32>::zeros(&[1, 2]);
        assert!(attention(&q, &q.clone(), &q.clone(), &cfg(1, 1, 2, Some(0)), true).is_err());
    }

    #[test]
    fn gqa_degenerate_case_matches_mha() {
        // with n_kv_heads == n_heads the mapping is the identity; brute-force
        // compare against an independently-computed dense masked attention
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let seq = 4;
        let hd = 2;
        let heads = 3;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::new(vec![seq, heads * hd], (0..seq * heads * hd).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
        };
        let q = mk(&mut rng);
        let k = mk(&mut rng);
        let v = mk(&mut rng);
        let (a, _) = attention(&q, &k, &v, &cfg(heads, heads, hd, None), true).unwrap();
        // dense oracle
        for h in 0..heads {
            for i in 0..seq {
                let mut weights = vec![0.0f64; seq];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let mut dot = 0.0f64;
                    for d in 0..hd {
                        dot += q.row(i)[h * hd + d] as f64 * k.row(j)[h * hd + d] as f64;
                    }
                    weights[j] = dot / (hd as f64).sqrt();
                    max = max.max(weights[j]);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    weights[j] = (weights[j] - max).exp();
                    sum += weights[j];
                }
                for d in 0..hd {
                    let mut acc = 0.0f64;
                    for j in 0..=i {
                        acc += weights[j] / sum * v.row(j)[h * hd + d] as f64;
                    }
                    assert!((a.row(i)[h * hd + d] as f64 - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_grad_identity() {
        let logits = Tensor::new(vec![1, 4], vec![0.0f32; 4]).unwrap();
        let g = cross_entropy_backward(&logits, &[2]);
        let expect = [0.25f32, 0.25, -0.75, 0.25];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
