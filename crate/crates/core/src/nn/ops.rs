//! Forward and backward kernels for the transformer building blocks.

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::{NnError, Result, Scalar, Tensor};

/// Epsilon inside the RMS normalizer.
pub const RMS_EPS: f64 = 1e-6;
/// Additive logit applied to masked attention positions.
pub const MASK_LOGIT: f64 = -1e9;

fn shape_err(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(shape_err(format!("{what}: expected rank 2, got {s:?}"))),
    }
}

/// `a[m×k] · b[k×n]` with `f64` accumulation.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(shape_err(format!("matmul inner dims {k} vs {k2}")));
    }
    Tensor::new(&[m, n], gemm(a.data(), b.data(), m, k, n))
}

/// Backward of `y = x · w`; returns `(dx, dw)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = dims2(x, "linear x")?;
    let (k2, n) = dims2(w, "linear w")?;
    let (m2, n2) = dims2(dy, "linear dy")?;
    if k != k2 || m != m2 || n != n2 {
        return Err(shape_err(format!(
            "linear backward x{:?} w{:?} dy{:?}",
            x.shape(),
            w.shape(),
            dy.shape()
        )));
    }
    let dx = Tensor::new(&[m, k], gemm_nt(dy.data(), w.data(), m, n, k))?;
    let dw = Tensor::new(&[k, n], gemm_tn(x.data(), dy.data(), m, k, n))?;
    Ok((dx, dw))
}

fn softmax_row_into<T: Scalar>(logits: &[f64], out: &mut [T]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut exps = Vec::with_capacity(logits.len());
    for &z in logits {
        let e = (z - max).exp();
        sum += e;
        exps.push(e);
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = T::from_f64(e / sum);
    }
}

/// Max-subtracted softmax over the last dimension.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.last_dim() == 0 {
        return Err(shape_err("softmax over empty last dim".into()));
    }
    x.check_finite("softmax input")?;
    let mut out = Tensor::zeros(x.shape());
    let mut buf = Vec::with_capacity(x.last_dim());
    for i in 0..x.rows() {
        buf.clear();
        buf.extend(x.row(i).iter().map(|v| v.to_f64()));
        softmax_row_into(&buf, out.row_mut(i));
    }
    Ok(out)
}

/// Per-row inverse RMS saved for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct RmsCache {
    pub inv_rms: Vec<f64>,
}

/// `x / sqrt(mean(x²) + eps) * gain` over the last dimension.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<(Tensor<T>, RmsCache)> {
    let d = x.last_dim();
    if gain.len() != d || gain.shape().len() != 1 {
        return Err(shape_err(format!(
            "rmsnorm gain {:?} vs last dim {d}",
            gain.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    let mut inv_rms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv_rms.push(r);
        for ((o, &xv), &g) in out.row_mut(i).iter_mut().zip(row).zip(gain.data()) {
            *o = T::from_f64(xv.to_f64() * r * g.to_f64());
        }
    }
    Ok((out, RmsCache { inv_rms }))
}

/// Backward of [`rmsnorm`]; returns `(dx, dgain)`.
pub fn rmsnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    cache: &RmsCache,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.shape() != dy.shape() || cache.inv_rms.len() != x.rows() {
        return Err(shape_err("rmsnorm backward shapes".into()));
    }
    let d = x.last_dim();
    let mut dx = Tensor::zeros(x.shape());
    let mut dg = vec![0.0f64; d];
    let g: Vec<f64> = gain.data().iter().map(|v| v.to_f64()).collect();
    for i in 0..x.rows() {
        let r = cache.inv_rms[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mut dot = 0.0;
        for j in 0..d {
            let xv = xr[j].to_f64();
            let dv = dyr[j].to_f64();
            dot += g[j] * dv * xv;
            dg[j] += dv * xv * r;
        }
        let coef = r * r * r * dot / d as f64;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = T::from_f64(r * g[j] * dyr[j].to_f64() - coef * xr[j].to_f64());
        }
    }
    Ok((dx, Tensor::from_f64_slice(&[d], &dg)?))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if v.to_f64() <= 0.0 {
            *v = T::default();
        }
    }
    out
}

/// Passes `dy` where the pre-activation was strictly positive.
pub fn relu_backward<T: Scalar>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut out = dy.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p.to_f64() <= 0.0 {
            *o = T::default();
        }
    }
    out
}

/// Query×key visibility; `true` means the key may be attended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub lq: usize,
    pub lk: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn full(lq: usize, lk: usize) -> Self {
        Self {
            lq,
            lk,
            allowed: vec![true; lq * lk],
        }
    }

    /// Row `i` may see keys `0..=i`.
    pub fn causal(l: usize) -> Self {
        let mut m = Self::full(l, l);
        for i in 0..l {
            for j in i + 1..l {
                m.allowed[i * l + j] = false;
            }
        }
        m
    }

    /// Every query sees exactly the keys flagged valid.
    pub fn keys(lq: usize, valid: &[bool]) -> Self {
        let lk = valid.len();
        let mut allowed = Vec::with_capacity(lq * lk);
        for _ in 0..lq {
            allowed.extend_from_slice(valid);
        }
        Self { lq, lk, allowed }
    }

    pub fn from_fn(lq: usize, lk: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(lq * lk);
        for i in 0..lq {
            for j in 0..lk {
                allowed.push(f(i, j));
            }
        }
        Self { lq, lk, allowed }
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.lk + k]
    }
}

/// `[L, h*dh]` → `[h, L, dh]`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (l, d) = dims2(x, "split_heads")?;
    if heads == 0 || d % heads != 0 {
        return Err(shape_err(format!("{d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let mut out = vec![T::default(); l * d];
    for i in 0..l {
        for h in 0..heads {
            let src = &x.data()[i * d + h * dh..i * d + (h + 1) * dh];
            out[(h * l + i) * dh..(h * l + i + 1) * dh].copy_from_slice(src);
        }
    }
    Tensor::new(&[heads, l, dh], out)
}

/// `[h, L, dh]` → `[L, h*dh]`.
pub fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [heads, l, dh] = *x.shape() else {
        return Err(shape_err(format!("merge_heads rank: {:?}", x.shape())));
    };
    let d = heads * dh;
    let mut out = vec![T::default(); l * d];
    for h in 0..heads {
        for i in 0..l {
            let src = &x.data()[(h * l + i) * dh..(h * l + i + 1) * dh];
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(src);
        }
    }
    Tensor::new(&[l, d], out)
}

/// Attention probabilities `[h, Lq, Lk]` saved for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<T: Scalar = f32> {
    pub probs: Tensor<T>,
}

fn attn_dims<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Mask,
) -> Result<(usize, usize, usize, usize)> {
    let [h, lq, dh] = *q.shape() else {
        return Err(shape_err(format!("attention q rank: {:?}", q.shape())));
    };
    let [hk, lk, dk] = *k.shape() else {
        return Err(shape_err(format!("attention k rank: {:?}", k.shape())));
    };
    if hk != h || dk != dh || v.shape() != k.shape() {
        return Err(shape_err(format!(
            "attention q{:?} k{:?} v{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if mask.lq != lq || mask.lk != lk {
        return Err(shape_err(format!(
            "mask {}×{} vs attention {lq}×{lk}",
            mask.lq, mask.lk
        )));
    }
    Ok((h, lq, lk, dh))
}

/// Scaled dot-product attention per head: `softmax(QKᵀ/√dh + mask) · V`.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Mask,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (h, lq, lk, dh) = attn_dims(q, k, v, mask)?;
    if let Some(row) = (0..lq).find(|&i| (0..lk).all(|j| !mask.allows(i, j))) {
        return Err(NnError::AllMaskedRow { row });
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![T::default(); h * lq * lk];
    let mut out = Vec::with_capacity(h * lq * dh);
    let mut logits = vec![0.0f64; lk];
    for head in 0..h {
        let qh = &q.data()[head * lq * dh..(head + 1) * lq * dh];
        let kh = &k.data()[head * lk * dh..(head + 1) * lk * dh];
        let vh = &v.data()[head * lk * dh..(head + 1) * lk * dh];
        let ph = &mut probs[head * lq * lk..(head + 1) * lq * lk];
        for i in 0..lq {
            let qi = &qh[i * dh..(i + 1) * dh];
            for (j, z) in logits.iter_mut().enumerate() {
                let kj = &kh[j * dh..(j + 1) * dh];
                let dot: f64 = qi
                    .iter()
                    .zip(kj)
                    .map(|(a, b)| a.to_f64() * b.to_f64())
                    .sum();
                *z = dot * scale + if mask.allows(i, j) { 0.0 } else { MASK_LOGIT };
            }
            softmax_row_into(&logits, &mut ph[i * lk..(i + 1) * lk]);
        }
        out.extend(gemm(ph, vh, lq, lk, dh));
    }
    let out = Tensor::new(&[h, lq, dh], out)?;
    out.check_finite("attention output")?;
    Ok((
        out,
        AttentionCache {
            probs: Tensor::new(&[h, lq, lk], probs)?,
        },
    ))
}

/// Backward of [`attention`]; returns `(dq, dk, dv)`.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cache: &AttentionCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [h, lq, dh] = *q.shape() else {
        return Err(shape_err("attention backward q rank".into()));
    };
    let lk = k.shape()[1];
    if d_out.shape() != q.shape() || cache.probs.shape() != [h, lq, lk] {
        return Err(shape_err("attention backward shapes".into()));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = Vec::with_capacity(k.len());
    let mut dv = Vec::with_capacity(v.len());
    for head in 0..h {
        let qh = &q.data()[head * lq * dh..(head + 1) * lq * dh];
        let kh = &k.data()[head * lk * dh..(head + 1) * lk * dh];
        let vh = &v.data()[head * lk * dh..(head + 1) * lk * dh];
        let ph = &cache.probs.data()[head * lq * lk..(head + 1) * lq * lk];
        let doh = &d_out.data()[head * lq * dh..(head + 1) * lq * dh];

        dv.extend(gemm_tn(ph, doh, lq, lk, dh));
        let dp = gemm_nt(doh, vh, lq, dh, lk);
        let mut ds = vec![T::default(); lq * lk];
        for i in 0..lq {
            let pr = &ph[i * lk..(i + 1) * lk];
            let dpr = &dp[i * lk..(i + 1) * lk];
            let dot: f64 = pr
                .iter()
                .zip(dpr)
                .map(|(p, d)| p.to_f64() * d.to_f64())
                .sum();
            for j in 0..lk {
                let p = pr[j].to_f64();
                ds[i * lk + j] = T::from_f64(p * (dpr[j].to_f64() - dot) * scale);
            }
        }
        dq.extend(gemm(&ds, kh, lq, lk, dh));
        dk.extend(gemm_tn(&ds, qh, lq, lk, dh));
    }
    Ok((
        Tensor::new(q.shape(), dq)?,
        Tensor::new(k.shape(), dk)?,
        Tensor::new(v.shape(), dv)?,
    ))
}

/// Summed token cross-entropy over non-pad rows. The returned gradient is
/// the gradient of the sum multiplied by `grad_scale`. Also returns the
/// number of non-pad rows.
pub fn cross_entropy_sum<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    pad_id: u32,
    grad_scale: f64,
) -> Result<(f64, Tensor<T>, usize)> {
    let (l, vocab) = dims2(logits, "cross_entropy logits")?;
    if targets.len() != l {
        return Err(shape_err(format!(
            "{} targets for {l} logit rows",
            targets.len()
        )));
    }
    if let Some((position, &t)) = targets
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= vocab)
    {
        return Err(NnError::TargetOutOfRange {
            position,
            target: t as usize,
            vocab,
        });
    }
    logits.check_finite("logits")?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let mut count = 0;
    let mut buf = vec![0.0f64; vocab];
    for (i, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        count += 1;
        for (b, v) in buf.iter_mut().zip(logits.row(i)) {
            *b = v.to_f64();
        }
        let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = buf.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - buf[t as usize];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (buf[j] - lse).exp();
            let onehot = if j == t as usize { 1.0 } else { 0.0 };
            *g = T::from_f64((p - onehot) * grad_scale);
        }
    }
    Ok((loss, grad, count))
}

/// Mean token cross-entropy over non-pad rows and its gradient.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    pad_id: u32,
) -> Result<(f64, Tensor<T>)> {
    let n = targets.iter().filter(|&&t| t != pad_id).count();
    if n == 0 {
        return Err(NnError::AllPad);
    }
    let (loss, grad, _) = cross_entropy_sum(logits, targets, pad_id, 1.0 / n as f64)?;
    Ok((loss / n as f64, grad))
}
