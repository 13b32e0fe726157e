//! Forward/backward pairs for the primitives the two policies are built
//! from. Every `*_forward` returns what its `*_backward` needs; backward
//! functions accumulate parameter gradients and return the input gradient.

use super::tensor::{axpy, dot, matmul_into, Real, Tensor2};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax over a logit vector; `-inf` entries get probability exactly 0.
/// Returns `(probabilities, log-normaliser)`.
pub fn softmax<T: Real>(logits: &[T]) -> (Vec<T>, T) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut probs: Vec<T> = logits
        .iter()
        .map(|&u| if u == T::neg_infinity() { T::zero() } else { (u - max).exp() })
        .collect();
    let z: T = probs.iter().copied().sum();
    for p in &mut probs {
        *p = *p / z;
    }
    (probs, max + z.ln())
}

/// `y = x·w + b`.
pub fn linear<T: Real>(x: &Tensor2<T>, w: &Tensor2<T>, b: Option<&Tensor2<T>>) -> Tensor2<T> {
    let mut y = Tensor2::zeros(x.rows, w.cols);
    if let Some(b) = b {
        for r in 0..y.rows {
            y.row_mut(r).copy_from_slice(&b.data);
        }
    }
    matmul_into(x, w, &mut y);
    y
}

pub fn linear_backward<T: Real>(
    x: &Tensor2<T>,
    w: &Tensor2<T>,
    dy: &Tensor2<T>,
    dw: &mut Tensor2<T>,
    db: Option<&mut Tensor2<T>>,
) -> Tensor2<T> {
    x.add_tn_into(dy, dw);
    if let Some(db) = db {
        dy.add_colsum_into(db);
    }
    dy.matmul_nt(w)
}

pub struct LayerNormCache<T> {
    xhat: Tensor2<T>,
    inv_std: Vec<T>,
}

/// Row-wise layer normalisation with learned gain and bias.
pub fn layer_norm<T: Real>(x: &Tensor2<T>, gain: &Tensor2<T>, bias: &Tensor2<T>) -> (Tensor2<T>, LayerNormCache<T>) {
    let d = T::of(x.cols as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = Tensor2::zeros(x.rows, x.cols);
    let mut y = Tensor2::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let yr = y.row_mut(r);
        for c in 0..x.cols {
            yr[c] = gain.data[c] * xhat.data[r * x.cols + c] + bias.data[c];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &Tensor2<T>,
    dy: &Tensor2<T>,
    dgain: &mut Tensor2<T>,
    dbias: &mut Tensor2<T>,
) -> Tensor2<T> {
    let cols = dy.cols;
    let d = T::of(cols as f64);
    let mut dx = Tensor2::zeros(dy.rows, cols);
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..dy.rows {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..cols {
            dgain.data[c] = dgain.data[c] + g[c] * xh[c];
            dbias.data[c] = dbias.data[c] + g[c];
            dxhat[c] = g[c] * gain.data[c];
        }
        let mean_g = dxhat.iter().copied().sum::<T>() / d;
        let mean_gx = dot(&dxhat, xh) / d;
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = is * (dxhat[c] - mean_g - xh[c] * mean_gx);
        }
    }
    dx
}

pub struct FeedForwardCache<T> {
    x: Tensor2<T>,
    hidden: Tensor2<T>,
}

/// `relu(x·w1 + b1)·w2 + b2`.
pub fn feed_forward<T: Real>(
    x: &Tensor2<T>,
    w1: &Tensor2<T>,
    b1: &Tensor2<T>,
    w2: &Tensor2<T>,
    b2: &Tensor2<T>,
) -> (Tensor2<T>, FeedForwardCache<T>) {
    let mut hidden = linear(x, w1, Some(b1));
    hidden.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    let y = linear(&hidden, w2, Some(b2));
    (y, FeedForwardCache { x: x.clone(), hidden })
}

pub struct FeedForwardGrads<'a, T> {
    pub w1: &'a mut Tensor2<T>,
    pub b1: &'a mut Tensor2<T>,
    pub w2: &'a mut Tensor2<T>,
    pub b2: &'a mut Tensor2<T>,
}

pub fn feed_forward_backward<T: Real>(
    cache: &FeedForwardCache<T>,
    w1: &Tensor2<T>,
    w2: &Tensor2<T>,
    dy: &Tensor2<T>,
    grads: FeedForwardGrads<'_, T>,
) -> Tensor2<T> {
    let mut dh = linear_backward(&cache.hidden, w2, dy, grads.w2, Some(grads.b2));
    for (g, &h) in dh.data.iter_mut().zip(&cache.hidden.data) {
        if h <= T::zero() {
            *g = T::zero();
        }
    }
    linear_backward(&cache.x, w1, &dh, grads.w1, Some(grads.b1))
}

/// Intermediates of the attention-free operator.
pub struct AafmCache<T> {
    sig_q: Tensor2<T>,
    /// `exp(A - rowmax)`, q x m.
    ea: Tensor2<T>,
    /// `exp(K - colmax)`, m x d.
    ek: Tensor2<T>,
    v: Tensor2<T>,
    /// `num / den`, q x d.
    ratio: Tensor2<T>,
    den: Tensor2<T>,
}

/// `σ(Q) ⊙ [exp(A)(exp(K) ⊙ V)] / [exp(A) exp(K)]`.
///
/// Evaluated with a per-row max shift on `A` and a per-column max shift on
/// `K`; the ratio is invariant under both. Only keys with a finite entry in
/// some row of `A` take part in the column max, so fully masked (padded)
/// keys leave the result bit-identical to an unpadded evaluation.
pub fn aafm<T: Real>(q: &Tensor2<T>, k: &Tensor2<T>, v: &Tensor2<T>, a: &Tensor2<T>) -> Result<(Tensor2<T>, AafmCache<T>)> {
    let (nq, d) = q.shape();
    let m = k.rows;
    if k.cols != d || v.shape() != (m, d) || a.shape() != (nq, m) {
        return Err(Error::Shape(format!(
            "aafm: Q {:?}, K {:?}, V {:?}, A {:?}",
            q.shape(),
            k.shape(),
            v.shape(),
            a.shape()
        )));
    }
    let ninf = T::neg_infinity();
    let mut key_live = vec![false; m];
    let mut ea = Tensor2::zeros(nq, m);
    for i in 0..nq {
        let row = a.row(i);
        let amax = row.iter().copied().fold(ninf, T::max);
        if amax == ninf || !amax.is_finite() {
            return Err(Error::EmptyAttention(i));
        }
        let out = ea.row_mut(i);
        for j in 0..m {
            if row[j] != ninf {
                key_live[j] = true;
                out[j] = (row[j] - amax).exp();
            }
        }
    }
    let mut kmax = vec![ninf; d];
    for j in (0..m).filter(|&j| key_live[j]) {
        for (mx, &kv) in kmax.iter_mut().zip(k.row(j)) {
            *mx = mx.max(kv);
        }
    }
    let mut ek = Tensor2::zeros(m, d);
    let mut ekv = Tensor2::zeros(m, d);
    for j in (0..m).filter(|&j| key_live[j]) {
        let kr = k.row(j);
        let vr = v.row(j);
        for c in 0..d {
            let e = (kr[c] - kmax[c]).exp();
            *ek.at_mut(j, c) = e;
            *ekv.at_mut(j, c) = e * vr[c];
        }
    }
    let mut num = Tensor2::zeros(nq, d);
    let mut den = Tensor2::zeros(nq, d);
    matmul_into(&ea, &ekv, &mut num);
    matmul_into(&ea, &ek, &mut den);
    let mut sig_q = Tensor2::zeros(nq, d);
    let mut ratio = Tensor2::zeros(nq, d);
    let mut out = Tensor2::zeros(nq, d);
    for idx in 0..nq * d {
        let s = sigmoid(q.data[idx]);
        let r = num.data[idx] / den.data[idx];
        sig_q.data[idx] = s;
        ratio.data[idx] = r;
        out.data[idx] = s * r;
    }
    Ok((out, AafmCache { sig_q, ea, ek, v: v.clone(), ratio, den }))
}

pub struct AafmGrads<T> {
    pub dq: Tensor2<T>,
    pub dk: Tensor2<T>,
    pub dv: Tensor2<T>,
    /// Zero wherever `A` was `-inf`.
    pub da: Tensor2<T>,
}

pub fn aafm_backward<T: Real>(cache: &AafmCache<T>, dout: &Tensor2<T>) -> AafmGrads<T> {
    let (nq, d) = dout.shape();
    let m = cache.ek.rows;
    // dQ = dout ⊙ ratio ⊙ σ'(Q); G = dout ⊙ σ(Q) / den.
    let mut dq = Tensor2::zeros(nq, d);
    let mut g = Tensor2::zeros(nq, d);
    let mut gr = Tensor2::zeros(nq, d);
    for idx in 0..nq * d {
        let s = cache.sig_q.data[idx];
        dq.data[idx] = dout.data[idx] * cache.ratio.data[idx] * s * (T::one() - s);
        let gv = dout.data[idx] * s / cache.den.data[idx];
        g.data[idx] = gv;
        gr.data[idx] = gv * cache.ratio.data[idx];
    }
    // S1 = EAᵀ G, S2 = EAᵀ (G ⊙ ratio): m x d.
    let mut s1 = Tensor2::zeros(m, d);
    let mut s2 = Tensor2::zeros(m, d);
    cache.ea.add_tn_into(&g, &mut s1);
    cache.ea.add_tn_into(&gr, &mut s2);
    let mut dk = Tensor2::zeros(m, d);
    let mut dv = Tensor2::zeros(m, d);
    for idx in 0..m * d {
        let e = cache.ek.data[idx];
        dv.data[idx] = e * s1.data[idx];
        dk.data[idx] = e * (cache.v.data[idx] * s1.data[idx] - s2.data[idx]);
    }
    // dA_ij = EA_ij [ Σ_c G_ic EK_jc V_jc - Σ_c (G⊙ratio)_ic EK_jc ].
    let mut da = Tensor2::zeros(nq, m);
    let mut ekv_row = vec![T::zero(); d];
    for j in 0..m {
        let ek = cache.ek.row(j);
        let vr = cache.v.row(j);
        for c in 0..d {
            ekv_row[c] = ek[c] * vr[c];
        }
        for i in 0..nq {
            let w = cache.ea.at(i, j);
            if w == T::zero() {
                continue;
            }
            *da.at_mut(i, j) = w * (dot(g.row(i), &ekv_row) - dot(gr.row(i), ek));
        }
    }
    AafmGrads { dq, dk, dv, da }
}

/// `ξ · tanh(s)` clipping of compatibilities.
#[inline]
pub fn clip_tanh<T: Real>(s: T, xi: T) -> (T, T) {
    let t = s.tanh();
    (xi * t, t)
}

/// Accumulates `scale * x` into `acc`.
pub fn add_scaled<T: Real>(acc: &mut [T], scale: T, x: &[T]) {
    axpy(scale, x, acc);
}
