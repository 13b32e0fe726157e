//! Local construction policy: picks the next node from the reduced
//! candidate set.
//!
//! The sub-graph `[first, last, candidates..]` is normalised to the unit box
//! spanned by the candidates, embedded, passed through `M` attention-free
//! layers with a scale-distance bias, and scored by a clipped compatibility
//! head against `h_first + h_last`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::instances::{Instance, ProblemKind};
use crate::neural::layer::{layer_backward, layer_forward, LayerCache};
use crate::neural::ops::softmax;
use crate::neural::tensor::{axpy, dot, mat_vec_t, outer_add, vecmat, Real, Tensor2};
use crate::neural::Params;

/// A candidate neighbourhood in normalised coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SubGraph {
    pub kind: ProblemKind,
    pub first: usize,
    pub last: usize,
    pub candidates: Vec<usize>,
    /// `[first, last, candidates..]`, all inside `[0, 1]²`.
    pub norm_coords: Vec<[f64; 2]>,
    /// Demand over remaining capacity, one per candidate (CVRP; zeros for TSP).
    pub norm_demands: Vec<f64>,
    pub q_remain: f64,
    /// Scale factor `1 / max(Δx, Δy)`; 0 for a degenerate box.
    pub r: f64,
}

impl SubGraph {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Maps `cands` to the unit box (aspect preserved) and transforms `ends`
/// with the same map, clamped into the box. Returns `(r, images of ends,
/// images of cands)`.
pub fn normalize_points(cands: &[[f64; 2]], ends: &[[f64; 2]]) -> (f64, Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in cands {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let r = if span > 0.0 { 1.0 / span } else { 0.0 };
    let map = |p: &[f64; 2]| [(p[0] - lo[0]) * r, (p[1] - lo[1]) * r];
    let ends = ends.iter().map(|p| map(p).map(|v| v.clamp(0.0, 1.0))).collect();
    let cands = cands.iter().map(|p| map(p).map(|v| v.clamp(0.0, 1.0))).collect();
    (r, ends, cands)
}

pub fn normalize_subgraph(
    instance: &Instance,
    first: usize,
    last: usize,
    candidates: &[usize],
    q_remain: f64,
) -> Result<SubGraph> {
    if candidates.is_empty() {
        return Err(Error::State("local model needs at least one candidate".into()));
    }
    let c = instance.unit_coords();
    let pts: Vec<[f64; 2]> = candidates.iter().map(|&i| c[i]).collect();
    let (r, ends, cands) = normalize_points(&pts, &[c[first], c[last]]);
    let mut norm_coords = ends;
    norm_coords.extend(cands);
    let norm_demands = match instance.kind {
        ProblemKind::Tsp => vec![0.0; candidates.len()],
        ProblemKind::Cvrp => {
            let dem = instance.unit_demands();
            candidates.iter().map(|&i| if q_remain > 0.0 { dem[i] / q_remain } else { 0.0 }).collect()
        }
    };
    Ok(SubGraph {
        kind: instance.kind,
        first,
        last,
        candidates: candidates.to_vec(),
        norm_coords,
        norm_demands,
        q_remain,
        r,
    })
}

/// Padding plan for a batch: every sub-graph is widened to `width`
/// candidate rows; `masks[b][i]` is false for padded rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub width: usize,
    pub masks: Vec<Vec<bool>>,
}

pub fn pad_batch(subgraphs: &[SubGraph]) -> Result<PaddedBatch> {
    let width = subgraphs.iter().map(SubGraph::len).max().ok_or_else(|| Error::Batch("empty batch".into()))?;
    let masks = subgraphs.iter().map(|s| (0..width).map(|i| i < s.len()).collect()).collect();
    Ok(PaddedBatch { width, masks })
}

/// Forward intermediates of one sub-graph.
pub struct LocalCache<T> {
    /// Normalised coordinates, padded rows zero.
    coords: Tensor2<T>,
    /// `coords·W_embed + b_embed`.
    base: Tensor2<T>,
    layers: Vec<LayerCache<T>>,
    out: Tensor2<T>,
    /// Pairwise `-log2|N_t| · d_ij` between live rows.
    dist_unit: Tensor2<T>,
    head_unit: Vec<T>,
    hhat: Vec<T>,
    tanh: Vec<T>,
    live: usize,
    demands: Vec<T>,
    q_remain: T,
}

/// Output of the local model over one (possibly padded) sub-graph.
pub struct LocalOut<T> {
    /// Clipped compatibilities; `-inf` on padded rows.
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub log_z: T,
    pub cache: Option<LocalCache<T>>,
}

/// `H̃⁽⁰⁾` for a sub-graph padded to `width` candidates. Also returns the
/// normalised coordinate matrix and the shared base embedding.
pub fn embed_subgraph<T: Real>(
    params: &Params<T>,
    sub: &SubGraph,
    width: usize,
) -> (Tensor2<T>, Tensor2<T>, Tensor2<T>) {
    let lp = &params.local;
    let rows = 2 + width;
    let mut coords = Tensor2::zeros(rows, 2);
    for (i, p) in sub.norm_coords.iter().enumerate() {
        coords.row_mut(i).copy_from_slice(&[T::of(p[0]), T::of(p[1])]);
    }
    let base = crate::neural::ops::linear(&coords, &lp.w_embed, Some(&lp.b_embed));
    let mut x = base.clone();
    x.row_mut(0).copy_from_slice(&vecmat(base.row(0), &lp.w_first));
    x.row_mut(1).copy_from_slice(&vecmat(base.row(1), &lp.w_last));
    if sub.kind == ProblemKind::Cvrp {
        let q = T::of(sub.q_remain);
        axpy(q, &lp.w_load.data, x.row_mut(0));
        axpy(q, &lp.w_load.data, x.row_mut(1));
        for (i, &dm) in sub.norm_demands.iter().enumerate() {
            axpy(T::of(dm), &lp.w_demand.data, x.row_mut(2 + i));
        }
    }
    (x, coords, base)
}

fn norm_dist<T: Real>(a: &[T], b: &[T]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Runs the local model on `sub` padded to `width` candidate rows.
pub fn forward<T: Real>(params: &Params<T>, sub: &SubGraph, width: usize, keep_cache: bool) -> Result<LocalOut<T>> {
    let m = sub.len();
    if m == 0 {
        return Err(Error::State("local model needs at least one candidate".into()));
    }
    if width < m {
        return Err(Error::Batch(format!("pad width {width} below candidate count {m}")));
    }
    let cfg = &params.config;
    let lp = &params.local;
    let rows = 2 + width;
    let live = 2 + m;
    let (x0, coords, base) = embed_subgraph(params, sub, width);

    let scale = T::of(-(m as f64).log2());
    let alpha = if cfg.local_bias { lp.alpha.scalar() } else { T::zero() };
    let mut dist_unit = Tensor2::zeros(rows, rows);
    for i in 0..live {
        for j in 0..live {
            *dist_unit.at_mut(i, j) = scale * norm_dist(coords.row(i), coords.row(j));
        }
    }
    let mut bias = Tensor2::filled(rows, rows, T::neg_infinity());
    for i in 0..rows {
        for j in 0..live {
            *bias.at_mut(i, j) = if i < live { alpha * dist_unit.at(i, j) } else { T::zero() };
        }
    }

    let mut x = x0;
    let mut caches = Vec::with_capacity(lp.layers.len());
    for layer in &lp.layers {
        let (next, cache) = layer_forward(&x, layer, &bias)?;
        if keep_cache {
            caches.push(cache);
        }
        x = next;
    }

    let d = x.cols;
    let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
    let xi = T::of(cfg.xi);
    let mut hhat = x.row(0).to_vec();
    axpy(T::one(), x.row(1), &mut hhat);
    let head_unit: Vec<T> = (0..m).map(|i| dist_unit.at(1, 2 + i)).collect();
    let mut logits = vec![T::neg_infinity(); width];
    let mut tanh = vec![T::zero(); m];
    for i in 0..m {
        let s = dot(&hhat, x.row(2 + i)) * inv_sqrt_d + alpha * head_unit[i];
        tanh[i] = s.tanh();
        logits[i] = xi * tanh[i];
    }
    let (probs, log_z) = softmax(&logits);
    if !log_z.is_finite() {
        return Err(Error::NanGuard("local logits".into()));
    }
    let cache = keep_cache.then(|| LocalCache {
        coords,
        base,
        layers: caches,
        out: x,
        dist_unit,
        head_unit,
        hhat,
        tanh,
        live,
        demands: sub.norm_demands.iter().map(|&v| T::of(v)).collect(),
        q_remain: T::of(sub.q_remain),
    });
    Ok(LocalOut { logits, probs, log_z, cache })
}

/// Forward pass over a batch, padded to the largest candidate set.
pub fn forward_batch<T: Real>(params: &Params<T>, subs: &[SubGraph], keep_cache: bool) -> Result<Vec<LocalOut<T>>> {
    let plan = pad_batch(subs)?;
    subs.par_iter().map(|s| forward(params, s, plan.width, keep_cache)).collect()
}

/// Greedy (argmax, lowest position on ties) or sampled choice over the
/// live candidates. Returns `(position, log p)`.
pub fn choose_next<T: Real, R: Rng>(out: &LocalOut<T>, live: usize, greedy: bool, rng: &mut R) -> Result<(usize, T)> {
    if live == 0 {
        return Err(Error::State("no candidates to choose from".into()));
    }
    let pos = if greedy {
        let mut best = 0;
        for i in 1..live {
            if out.probs[i] > out.probs[best] {
                best = i;
            }
        }
        best
    } else {
        crate::reduction::sample_index(&out.probs[..live], rng)
    };
    Ok((pos, out.logits[pos] - out.log_z))
}

/// Backpropagates `g · log p(position)` into `grads`.
pub fn backward<T: Real>(params: &Params<T>, cache: &LocalCache<T>, probs: &[T], position: usize, g: T, grads: &mut Params<T>) {
    let m = cache.live - 2;
    let dlogits: Vec<T> = (0..m)
        .map(|i| {
            let ind = if i == position { T::one() } else { T::zero() };
            g * (ind - probs[i])
        })
        .collect();
    backward_logits(params, cache, &dlogits, grads);
}

/// Backward pass given `dL/du` for each live candidate.
pub fn backward_logits<T: Real>(params: &Params<T>, cache: &LocalCache<T>, dlogits: &[T], grads: &mut Params<T>) {
    let cfg = &params.config;
    let lp = &params.local;
    let (rows, d) = cache.out.shape();
    let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
    let xi = T::of(cfg.xi);
    let mut dalpha = T::zero();

    let mut dx = Tensor2::zeros(rows, d);
    let mut dhhat = vec![T::zero(); d];
    for (i, &du) in dlogits.iter().enumerate() {
        let t = cache.tanh[i];
        let ds = du * xi * (T::one() - t * t);
        axpy(ds * inv_sqrt_d, cache.out.row(2 + i), &mut dhhat);
        axpy(ds * inv_sqrt_d, &cache.hhat, dx.row_mut(2 + i));
        dalpha = dalpha + ds * cache.head_unit[i];
    }
    axpy(T::one(), &dhhat, dx.row_mut(0));
    axpy(T::one(), &dhhat, dx.row_mut(1));

    let gl = &mut grads.local;
    for (li, layer) in lp.layers.iter().enumerate().rev() {
        let (dprev, da) = layer_backward(&cache.layers[li], layer, &dx, &mut gl.layers[li]);
        for i in 0..cache.live {
            for j in 0..cache.live {
                dalpha = dalpha + da.at(i, j) * cache.dist_unit.at(i, j);
            }
        }
        dx = dprev;
    }
    if cfg.local_bias {
        gl.alpha.data[0] = gl.alpha.data[0] + dalpha;
    }

    if cfg.kind == ProblemKind::Cvrp {
        axpy(cache.q_remain, dx.row(0), &mut gl.w_load.data);
        axpy(cache.q_remain, dx.row(1), &mut gl.w_load.data);
        for (i, &dm) in cache.demands.iter().enumerate() {
            axpy(dm, dx.row(2 + i), &mut gl.w_demand.data);
        }
    }
    let mut dbase = dx;
    outer_add(cache.base.row(0), dbase.row(0), &mut gl.w_first);
    outer_add(cache.base.row(1), dbase.row(1), &mut gl.w_last);
    let d0 = mat_vec_t(&lp.w_first, dbase.row(0));
    let d1 = mat_vec_t(&lp.w_last, dbase.row(1));
    dbase.row_mut(0).copy_from_slice(&d0);
    dbase.row_mut(1).copy_from_slice(&d1);
    for r in cache.live..rows {
        dbase.row_mut(r).iter_mut().for_each(|v| *v = T::zero());
    }
    cache.coords.add_tn_into(&dbase, &mut gl.w_embed);
    dbase.add_colsum_into(&mut gl.b_embed);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::generate_uniform;
    use crate::neural::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: ProblemKind) -> Params<f64> {
        Params::init(ModelConfig { d: 8, d_ff: 16, layers: 2, ..ModelConfig::full(kind) }, 11)
    }

    #[test]
    fn normalisation_arithmetic() {
        let (r, _, img) = normalize_points(&[[2.0, 2.0], [4.0, 6.0]], &[]);
        assert_eq!(r, 0.25);
        assert_eq!(img, vec![[0.0, 0.0], [0.5, 1.0]]);
    }

    #[test]
    fn far_endpoint_clamped() {
        let (_, ends, _) = normalize_points(&[[0.0, 0.0], [1.0, 1.0]], &[[5.0, -3.0]]);
        assert_eq!(ends[0], [1.0, 0.0]);
    }

    #[test]
    fn degenerate_box_maps_to_origin() {
        let (r, ends, img) = normalize_points(&[[0.3, 0.3], [0.3, 0.3]], &[[0.9, 0.1]]);
        assert_eq!(r, 0.0);
        assert_eq!(img, vec![[0.0, 0.0]; 2]);
        assert_eq!(ends[0], [0.0, 0.0]);
    }

    #[test]
    fn head_bias_value() {
        // α = 1, |N_t| = 16, d = 0.25  =>  -1
        assert_eq!(-(16f64).log2() * 0.25, -1.0);
    }

    #[test]
    fn single_candidate_is_certain() {
        let p = small(ProblemKind::Tsp);
        let inst = generate_uniform(ProblemKind::Tsp, 5, None, 1).unwrap();
        let sub = normalize_subgraph(&inst, 0, 2, &[4], 1.0).unwrap();
        let out = forward(&p, &sub, 1, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pos, lp) = choose_next(&out, 1, true, &mut rng).unwrap();
        assert_eq!((pos, lp), (0, 0.0));
        assert_eq!(out.probs, vec![1.0]);
    }

    #[test]
    fn cvrp_demand_over_unit_capacity() {
        let inst = Instance::cvrp("c", vec![[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]], vec![0.0, 0.3, 0.2], 1.0).unwrap();
        let sub = normalize_subgraph(&inst, 0, 0, &[1, 2], 1.0).unwrap();
        assert!((sub.norm_demands[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn padding_is_inert() {
        let p = small(ProblemKind::Cvrp);
        let inst = generate_uniform(ProblemKind::Cvrp, 12, Some(50.0), 4).unwrap();
        let a = normalize_subgraph(&inst, 0, 3, &[1, 5, 7], 0.7).unwrap();
        let b = normalize_subgraph(&inst, 0, 2, &[4, 6, 8, 9, 10], 0.7).unwrap();
        let plan = pad_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(plan.width, 5);
        assert_eq!(plan.masks[0], vec![true, true, true, false, false]);
        let batched = forward_batch(&p, &[a.clone(), b], false).unwrap();
        let single = forward(&p, &a, 3, false).unwrap();
        assert_eq!(batched[0].probs[3..], [0.0, 0.0]);
        for i in 0..3 {
            assert!((batched[0].probs[i] - single.probs[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_candidates_rejected() {
        let inst = generate_uniform(ProblemKind::Tsp, 5, None, 1).unwrap();
        assert!(matches!(normalize_subgraph(&inst, 0, 0, &[], 1.0), Err(Error::State(_))));
    }
}
