//! One attention layer of the local model:
//! `h = LN1(x + AAFM(xWq, xWk, xWv, A))`, `out = LN2(h + FF(h))`.

use super::ops::{
    aafm, aafm_backward, feed_forward, feed_forward_backward, layer_norm, layer_norm_backward, linear, linear_backward,
    AafmCache, FeedForwardCache, FeedForwardGrads, LayerNormCache,
};
use super::params::LayerParams;
use super::tensor::{Real, Tensor2};
use crate::error::{Error, Result};

pub struct LayerCache<T> {
    x: Tensor2<T>,
    att: AafmCache<T>,
    ln1: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
    ln2: LayerNormCache<T>,
}

pub fn layer_forward<T: Real>(
    x: &Tensor2<T>,
    w: &LayerParams<T>,
    bias: &Tensor2<T>,
) -> Result<(Tensor2<T>, LayerCache<T>)> {
    if x.cols != w.w_query.rows {
        return Err(Error::Shape(format!("layer input has {} columns, weights expect {}", x.cols, w.w_query.rows)));
    }
    let q = linear(x, &w.w_query, None);
    let k = linear(x, &w.w_key, None);
    let v = linear(x, &w.w_value, None);
    let (att_out, att) = aafm(&q, &k, &v, bias)?;
    let mut pre1 = x.clone();
    pre1.add_assign(&att_out);
    let (h, ln1) = layer_norm(&pre1, &w.ln1_gain, &w.ln1_bias);
    let (f, ff) = feed_forward(&h, &w.ff_w1, &w.ff_b1, &w.ff_w2, &w.ff_b2);
    let mut pre2 = h;
    pre2.add_assign(&f);
    let (out, ln2) = layer_norm(&pre2, &w.ln2_gain, &w.ln2_bias);
    Ok((out, LayerCache { x: x.clone(), att, ln1, ff, ln2 }))
}

/// Returns `(dx, dA)`; parameter gradients are accumulated into `g`.
pub fn layer_backward<T: Real>(
    cache: &LayerCache<T>,
    w: &LayerParams<T>,
    dout: &Tensor2<T>,
    g: &mut LayerParams<T>,
) -> (Tensor2<T>, Tensor2<T>) {
    let dpre2 = layer_norm_backward(&cache.ln2, &w.ln2_gain, dout, &mut g.ln2_gain, &mut g.ln2_bias);
    let dff_in = feed_forward_backward(
        &cache.ff,
        &w.ff_w1,
        &w.ff_w2,
        &dpre2,
        FeedForwardGrads { w1: &mut g.ff_w1, b1: &mut g.ff_b1, w2: &mut g.ff_w2, b2: &mut g.ff_b2 },
    );
    let mut dh = dpre2;
    dh.add_assign(&dff_in);
    let dpre1 = layer_norm_backward(&cache.ln1, &w.ln1_gain, &dh, &mut g.ln1_gain, &mut g.ln1_bias);
    let ag = aafm_backward(&cache.att, &dpre1);
    let mut dx = dpre1;
    dx.add_assign(&linear_backward(&cache.x, &w.w_query, &ag.dq, &mut g.w_query, None));
    dx.add_assign(&linear_backward(&cache.x, &w.w_key, &ag.dk, &mut g.w_key, None));
    dx.add_assign(&linear_backward(&cache.x, &w.w_value, &ag.dv, &mut g.w_value, None));
    (dx, ag.da)
}
