//! Learned dynamic search-space reduction.
//!
//! A single linear embedding, one attention-free aggregation of the feasible
//! nodes around the context vector, and a clipped compatibility head produce
//! a distribution `o` over the feasible set; the top-k nodes become the
//! candidate set handed to the local model. The distance-based D-SSR
//! baseline lives here too.
//!
//! Per-instance work (embeddings, keys, values) is done once in
//! [`ReductionTables::build`]; each step then costs `O(|feasible| * d)`.
//! Keys are exponentiated once with a per-column shift over *all* nodes;
//! the attention ratio is shift-invariant, and a step whose denominators
//! underflow under that global shift is redone with a feasible-local shift.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::instances::{Instance, ProblemKind};
use crate::neural::ops::{sigmoid, softmax};
use crate::neural::tensor::{axpy, dot, mat_vec_t, outer_add, vecmat, Real, Tensor2};
use crate::neural::{Params, ReductionParams};

const CHUNK: usize = 8192;

/// Node features of the reduction model: `(x, y)` or `(x, y, demand)`.
pub fn node_features<T: Real>(instance: &Instance) -> Tensor2<T> {
    let c = instance.unit_coords();
    match instance.kind {
        ProblemKind::Tsp => {
            let data = c.iter().flat_map(|p| [T::of(p[0]), T::of(p[1])]).collect();
            Tensor2 { rows: c.len(), cols: 2, data }
        }
        ProblemKind::Cvrp => {
            let dem = instance.unit_demands();
            let data = c.iter().zip(dem).flat_map(|(p, &q)| [T::of(p[0]), T::of(p[1]), T::of(q)]).collect();
            Tensor2 { rows: c.len(), cols: 3, data }
        }
    }
}

/// `H = S·W_e + b_e`, one row per node.
pub fn embed_all<T: Real>(params: &ReductionParams<T>, instance: &Instance) -> Tensor2<T> {
    crate::neural::ops::linear(&node_features::<T>(instance), &params.w_embed, Some(&params.b_embed))
}

/// Everything about an instance the scorer reuses across steps.
pub struct ReductionTables<T> {
    pub features: Tensor2<T>,
    pub h: Tensor2<T>,
    pub k: Tensor2<T>,
    pub v: Tensor2<T>,
    /// `exp(K - kshift)` and its product with `V`.
    ek: Tensor2<T>,
    ekv: Tensor2<T>,
    kshift: Vec<T>,
    /// `log2` of the problem size used by the adaptation bias.
    pub log2n: f64,
}

impl<T: Real> ReductionTables<T> {
    pub fn build(params: &ReductionParams<T>, instance: &Instance) -> Self {
        let features = node_features::<T>(instance);
        let h = crate::neural::ops::linear(&features, &params.w_embed, Some(&params.b_embed));
        let k = h.matmul(&params.w_key);
        let v = h.matmul(&params.w_value);
        let d = h.cols;
        let mut kshift = vec![T::neg_infinity(); d];
        for r in 0..k.rows {
            for (s, &x) in kshift.iter_mut().zip(k.row(r)) {
                *s = s.max(x);
            }
        }
        let mut ek = Tensor2::zeros(k.rows, d);
        let mut ekv = Tensor2::zeros(k.rows, d);
        for idx in 0..k.data.len() {
            let e = (k.data[idx] - kshift[idx % d]).exp();
            ek.data[idx] = e;
            ekv.data[idx] = e * v.data[idx];
        }
        Self { features, h, k, v, ek, ekv, kshift, log2n: (instance.len() as f64).log2() }
    }
}

/// Where the rollout currently stands, as seen by the context embedding.
#[derive(Debug, Clone, Copy)]
pub struct Context {
    pub first: usize,
    pub last: usize,
    /// Remaining capacity in unit-capacity terms (CVRP).
    pub q_remain: f64,
}

/// `W_first h_first + W_last h_last` (TSP) or `W_last [h_last, Q_remain]` (CVRP).
pub fn context_embedding<T: Real>(
    params: &ReductionParams<T>,
    h: &Tensor2<T>,
    kind: ProblemKind,
    ctx: Option<Context>,
) -> Result<Vec<T>> {
    let ctx = ctx.ok_or_else(|| Error::State("context needs at least one selected node".into()))?;
    match kind {
        ProblemKind::Tsp => {
            let mut c = vecmat(h.row(ctx.first), &params.w_first);
            let l = vecmat(h.row(ctx.last), &params.w_last);
            axpy(T::one(), &l, &mut c);
            Ok(c)
        }
        ProblemKind::Cvrp => Ok(vecmat(&cvrp_context_input(h, ctx), &params.w_last)),
    }
}

fn cvrp_context_input<T: Real>(h: &Tensor2<T>, ctx: Context) -> Vec<T> {
    let mut z = h.row(ctx.last).to_vec();
    z.push(T::of(ctx.q_remain));
    z
}

/// Intermediates kept for the backward pass of one scoring step.
pub struct ScoreCache<T> {
    ctx: Context,
    feasible: Vec<usize>,
    bias_unit: Vec<T>,
    /// `exp(a_j - max a)`.
    w: Vec<T>,
    kshift: Vec<T>,
    den: Vec<T>,
    ratio: Vec<T>,
    context: Vec<T>,
    hhat: Vec<T>,
    tanh: Vec<T>,
}

/// Output of the scorer over one feasible set (same order as the input).
pub struct Scored<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub log_z: T,
    pub cache: Option<ScoreCache<T>>,
}

struct Accum<T> {
    amax: T,
    num: Vec<T>,
    den: Vec<T>,
}

impl<T: Real> Accum<T> {
    fn new(d: usize) -> Self {
        Self { amax: T::neg_infinity(), num: vec![T::zero(); d], den: vec![T::zero(); d] }
    }

    #[inline]
    fn push(&mut self, a: T, ek: &[T], ekv: &[T]) {
        if a > self.amax {
            if self.amax != T::neg_infinity() {
                let f = (self.amax - a).exp();
                self.num.iter_mut().for_each(|x| *x = *x * f);
                self.den.iter_mut().for_each(|x| *x = *x * f);
            }
            self.amax = a;
        }
        let w = (a - self.amax).exp();
        axpy(w, ekv, &mut self.num);
        axpy(w, ek, &mut self.den);
    }

    fn merge(mut self, other: Self) -> Self {
        if other.amax == T::neg_infinity() {
            return self;
        }
        if self.amax == T::neg_infinity() {
            return other;
        }
        let m = self.amax.max(other.amax);
        let (fa, fb) = ((self.amax - m).exp(), (other.amax - m).exp());
        for c in 0..self.num.len() {
            self.num[c] = self.num[c] * fa + other.num[c] * fb;
            self.den[c] = self.den[c] * fa + other.den[c] * fb;
        }
        self.amax = m;
        self
    }
}

/// `-log2(N) * d(last, j)` for every feasible `j` (the bias before `α`).
fn bias_units<T: Real>(instance: &Instance, last: usize, feasible: &[usize], log2n: f64) -> Vec<T> {
    feasible.iter().map(|&j| T::of(-log2n * instance.unit_dist(last, j))).collect()
}

/// Scores every feasible node; `probs` is `o`, `logits` are the clipped
/// compatibilities `u`.
pub fn score_feasible<T: Real>(
    params: &Params<T>,
    tables: &ReductionTables<T>,
    instance: &Instance,
    ctx: Context,
    feasible: &[usize],
    keep_cache: bool,
) -> Result<Scored<T>> {
    if feasible.is_empty() {
        return Err(Error::EmptyFeasible);
    }
    let rp = &params.reduction;
    let cfg = &params.config;
    let d = tables.h.cols;
    let context = context_embedding(rp, &tables.h, cfg.kind, Some(ctx))?;
    let alpha = if cfg.reduction_bias { rp.alpha.scalar() } else { T::zero() };
    let bias_unit = bias_units::<T>(instance, ctx.last, feasible, tables.log2n);

    let accumulate = |ids: &[usize], units: &[T], ek: &dyn Fn(usize) -> Vec<T>| -> Accum<T> {
        let mut acc = Accum::new(d);
        for (&j, &bu) in ids.iter().zip(units) {
            let e = ek(j);
            let ev: Vec<T> = e.iter().zip(tables.v.row(j)).map(|(&a, &b)| a * b).collect();
            acc.push(alpha * bu, &e, &ev);
        }
        acc
    };

    let fast = |ids: &[usize], units: &[T]| -> Accum<T> {
        let mut acc = Accum::new(d);
        for (&j, &bu) in ids.iter().zip(units) {
            acc.push(alpha * bu, tables.ek.row(j), tables.ekv.row(j));
        }
        acc
    };
    let mut acc = if feasible.len() <= CHUNK {
        fast(feasible, &bias_unit)
    } else {
        let parts: Vec<Accum<T>> = feasible
            .par_chunks(CHUNK)
            .zip(bias_unit.par_chunks(CHUNK))
            .map(|(ids, units)| fast(ids, units))
            .collect();
        parts.into_iter().fold(Accum::new(d), Accum::merge)
    };
    let mut kshift = tables.kshift.clone();
    if acc.den.iter().any(|x| !(x.is_normal() && *x > T::zero())) {
        for s in kshift.iter_mut() {
            *s = T::neg_infinity();
        }
        for &j in feasible {
            for (s, &x) in kshift.iter_mut().zip(tables.k.row(j)) {
                *s = s.max(x);
            }
        }
        let ks = kshift.clone();
        let ek = move |j: usize| -> Vec<T> { tables.k.row(j).iter().zip(&ks).map(|(&x, &s)| (x - s).exp()).collect() };
        acc = accumulate(feasible, &bias_unit, &ek);
    }

    let sig: Vec<T> = context.iter().map(|&c| sigmoid(c)).collect();
    let ratio: Vec<T> = acc.num.iter().zip(&acc.den).map(|(&n, &q)| n / q).collect();
    let hhat: Vec<T> = sig.iter().zip(&ratio).map(|(&s, &r)| s * r).collect();
    let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
    let xi = T::of(cfg.xi);
    let score = |(j, bu): (&usize, &T)| -> (T, T) {
        let s = dot(&hhat, tables.h.row(*j)) * inv_sqrt_d + alpha * *bu;
        let t = s.tanh();
        (xi * t, t)
    };
    let pairs: Vec<(T, T)> = if feasible.len() <= CHUNK {
        feasible.iter().zip(&bias_unit).map(score).collect()
    } else {
        feasible.par_iter().zip(bias_unit.par_iter()).map(score).collect()
    };
    let (logits, tanh): (Vec<T>, Vec<T>) = pairs.into_iter().unzip();
    let (probs, log_z) = softmax(&logits);

    let cache = keep_cache.then(|| {
        let w = bias_unit.iter().map(|&bu| (alpha * bu - acc.amax).exp()).collect();
        ScoreCache {
            ctx,
            feasible: feasible.to_vec(),
            bias_unit,
            w,
            kshift,
            den: acc.den.clone(),
            ratio,
            context,
            hhat,
            tanh,
        }
    });
    Ok(Scored { logits, probs, log_z, cache })
}

/// Per-instance gradient buffers for the node-level tables; folded into the
/// parameter gradients by [`ReductionGrad::finish`].
pub struct ReductionGrad<T> {
    dh: Tensor2<T>,
    dk: Tensor2<T>,
    dv: Tensor2<T>,
}

impl<T: Real> ReductionGrad<T> {
    pub fn new(n: usize, d: usize) -> Self {
        Self { dh: Tensor2::zeros(n, d), dk: Tensor2::zeros(n, d), dv: Tensor2::zeros(n, d) }
    }

    /// Backpropagates `g · log o(feasible[target])` through one step.
    pub fn step(
        &mut self,
        params: &Params<T>,
        tables: &ReductionTables<T>,
        cache: &ScoreCache<T>,
        probs: &[T],
        target: usize,
        g: T,
        grads: &mut Params<T>,
    ) {
        let rp = &params.reduction;
        let cfg = &params.config;
        let gr = &mut grads.reduction;
        let d = tables.h.cols;
        let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
        let xi = T::of(cfg.xi);
        let m = cache.feasible.len();

        let mut da = vec![T::zero(); m];
        let mut dhhat = vec![T::zero(); d];
        for (pos, &j) in cache.feasible.iter().enumerate() {
            let indicator = if pos == target { T::one() } else { T::zero() };
            let du = g * (indicator - probs[pos]);
            let t = cache.tanh[pos];
            let ds = du * xi * (T::one() - t * t);
            if ds == T::zero() {
                continue;
            }
            da[pos] = ds;
            axpy(ds * inv_sqrt_d, tables.h.row(j), &mut dhhat);
            axpy(ds * inv_sqrt_d, &cache.hhat, self.dh.row_mut(j));
        }

        let mut dctx = vec![T::zero(); d];
        let mut gcol = vec![T::zero(); d];
        for c in 0..d {
            let s = sigmoid(cache.context[c]);
            dctx[c] = dhhat[c] * cache.ratio[c] * s * (T::one() - s);
            gcol[c] = dhhat[c] * s / cache.den[c];
        }
        let mut ek = vec![T::zero(); d];
        for (pos, &j) in cache.feasible.iter().enumerate() {
            let w = cache.w[pos];
            if w == T::zero() {
                continue;
            }
            let kr = tables.k.row(j);
            let vr = tables.v.row(j);
            for c in 0..d {
                ek[c] = (kr[c] - cache.kshift[c]).exp();
            }
            let mut dlogit_sum = T::zero();
            let dv = self.dv.row_mut(j);
            for c in 0..d {
                let base = w * ek[c] * gcol[c];
                dv[c] = dv[c] + base;
                let dl = base * (vr[c] - cache.ratio[c]);
                dlogit_sum = dlogit_sum + dl;
                gcol_dk(&mut self.dk, j, c, dl);
            }
            da[pos] = da[pos] + dlogit_sum;
        }
        if cfg.reduction_bias {
            let dalpha: T = da.iter().zip(&cache.bias_unit).map(|(&a, &b)| a * b).sum();
            gr.alpha.data[0] = gr.alpha.data[0] + dalpha;
        }

        let ctx = cache.ctx;
        match cfg.kind {
            ProblemKind::Tsp => {
                outer_add(tables.h.row(ctx.first), &dctx, &mut gr.w_first);
                outer_add(tables.h.row(ctx.last), &dctx, &mut gr.w_last);
                let df = mat_vec_t(&rp.w_first, &dctx);
                axpy(T::one(), &df, self.dh.row_mut(ctx.first));
                let dl = mat_vec_t(&rp.w_last, &dctx);
                axpy(T::one(), &dl, self.dh.row_mut(ctx.last));
            }
            ProblemKind::Cvrp => {
                let z = cvrp_context_input(&tables.h, ctx);
                outer_add(&z, &dctx, &mut gr.w_last);
                let dz = mat_vec_t(&rp.w_last, &dctx);
                axpy(T::one(), &dz[..d], self.dh.row_mut(ctx.last));
            }
        }
    }

    /// Pushes the accumulated node-table gradients into the parameters.
    pub fn finish(mut self, params: &Params<T>, tables: &ReductionTables<T>, grads: &mut Params<T>) {
        let rp = &params.reduction;
        let gr = &mut grads.reduction;
        tables.h.add_tn_into(&self.dk, &mut gr.w_key);
        tables.h.add_tn_into(&self.dv, &mut gr.w_value);
        self.dh.add_assign(&self.dk.matmul_nt(&rp.w_key));
        self.dh.add_assign(&self.dv.matmul_nt(&rp.w_value));
        tables.features.add_tn_into(&self.dh, &mut gr.w_embed);
        self.dh.add_colsum_into(&mut gr.b_embed);
    }
}

#[inline]
fn gcol_dk<T: Real>(dk: &mut Tensor2<T>, j: usize, c: usize, v: T) {
    let x = dk.at_mut(j, c);
    *x = *x + v;
}

/// The reduced candidate set of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<T> {
    pub indices: Vec<usize>,
    /// Potential scores of `indices` (empty for D-SSR).
    pub scores: Vec<T>,
    /// `(node, log o(node))` drawn from the full distribution in training.
    pub sampled: Option<(usize, T)>,
}

/// Positions of the `k` largest scores, ties to the lower node index.
pub fn top_k_positions<T: Real>(scores: &[T], ids: &[usize], k: usize) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| scores[b].partial_cmp(&scores[a]).unwrap().then(ids[a].cmp(&ids[b]));
    if k < pos.len() {
        pos.select_nth_unstable_by(k - 1, cmp);
        pos.truncate(k);
    }
    pos.sort_unstable_by(cmp);
    pos
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    /// Top-k only.
    Greedy,
    /// Top-k plus a sample `τ` from the full distribution.
    Train,
}

/// Top-k of `probs` (aligned with `feasible`) and, in training mode, one
/// sample with its log-probability.
pub fn select_candidates<T: Real, R: Rng>(
    feasible: &[usize],
    probs: &[T],
    logits: &[T],
    log_z: T,
    k: usize,
    mode: SelectMode,
    rng: &mut R,
) -> CandidateSet<T> {
    let pos = top_k_positions(probs, feasible, k.max(1));
    let sampled = (mode == SelectMode::Train).then(|| {
        let p = sample_index(probs, rng);
        (feasible[p], logits[p] - log_z)
    });
    CandidateSet {
        indices: pos.iter().map(|&p| feasible[p]).collect(),
        scores: pos.iter().map(|&p| probs[p]).collect(),
        sampled,
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<T: Real, R: Rng>(probs: &[T], rng: &mut R) -> usize {
    let u = T::of(rng.gen::<f64>());
    let mut acc = T::zero();
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > T::zero() {
            last_positive = i;
            acc = acc + p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// D-SSR: the `k` feasible nodes nearest to `last`, ties to the lower index.
pub fn dssr_candidates<T: Real>(instance: &Instance, last: usize, feasible: &[usize], k: usize) -> CandidateSet<T> {
    let neg: Vec<f64> = feasible.iter().map(|&j| -instance.unit_dist(last, j)).collect();
    let pos = top_k_positions(&neg, feasible, k.max(1));
    CandidateSet { indices: pos.iter().map(|&p| feasible[p]).collect(), scores: Vec::new(), sampled: None }
}

/// Checks every candidate-set invariant; returns a description of the first
/// violation.
pub fn check_candidates<T: Real>(
    feasible: &[usize],
    probs: &[T],
    cs: &CandidateSet<T>,
    k: usize,
) -> std::result::Result<(), String> {
    if cs.indices.len() != k.min(feasible.len()) {
        return Err(format!("size {} != min({k}, {})", cs.indices.len(), feasible.len()));
    }
    if let Some(x) = cs.indices.iter().find(|i| !feasible.contains(i)) {
        return Err(format!("candidate {x} not feasible"));
    }
    let mut uniq = cs.indices.clone();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() != cs.indices.len() {
        return Err("duplicate candidate".into());
    }
    if probs.is_empty() {
        return Ok(());
    }
    let total: f64 = probs.iter().map(|p| p.f64()).sum();
    if (total - 1.0).abs() > 1e-6 || probs.iter().any(|p| p.f64() < 0.0) {
        return Err(format!("scores sum to {total}"));
    }
    let expected: Vec<usize> = top_k_positions(probs, feasible, k).into_iter().map(|p| feasible[p]).collect();
    if expected != cs.indices {
        return Err(format!("not the top-{k}: {:?} vs {:?}", cs.indices, expected));
    }
    if let Some((s, lp)) = cs.sampled {
        let p = feasible.iter().position(|&f| f == s).ok_or("sample not feasible")?;
        if (lp.f64() - probs[p].f64().ln()).abs() > 1e-4 {
            return Err("sample log-probability mismatch".into());
        }
    }
    Ok(())
}
