//! Exact and heuristic reference solvers, solution-quality metrics, and the
//! pruning-impact experiment.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::instances::{Instance, ProblemKind, Tour};
use crate::neural::Real;
use crate::reduction::{dssr_candidates, score_feasible, select_candidates, Context, ReductionTables, SelectMode};
use crate::rollout::{feasible_set, init_state, PolicyBundle, ReducerKind, Solution, StartRule, DEPOT};

/// Largest instance the bitmask DP accepts (about 40 MB of tables).
pub const HELD_KARP_MAX: usize = 18;

/// Optimal closed tour over `n` nodes under `dist`; `None` entries are
/// forbidden edges. Returns `None` when no Hamiltonian cycle exists.
pub fn held_karp_with(n: usize, dist: impl Fn(usize, usize) -> Option<f64>) -> Result<Option<(Vec<usize>, f64)>> {
    if n > HELD_KARP_MAX {
        return Err(Error::SizeGuard { n, limit: HELD_KARP_MAX });
    }
    match n {
        0 => return Ok(Some((Vec::new(), 0.0))),
        1 => return Ok(Some((vec![0], 0.0))),
        2 => {
            return Ok(match (dist(0, 1), dist(1, 0)) {
                (Some(a), Some(b)) => Some((vec![0, 1], a + b)),
                _ => None,
            })
        }
        _ => {}
    }
    // Node 0 is fixed as the start; masks range over nodes 1..n.
    let m = n - 1;
    let full = 1usize << m;
    let mut cost = vec![f64::INFINITY; full * m];
    let mut parent = vec![u8::MAX; full * m];
    for j in 0..m {
        if let Some(d) = dist(0, j + 1) {
            cost[(1 << j) * m + j] = d;
        }
    }
    for mask in 1..full {
        for j in 0..m {
            let c = cost[mask * m + j];
            if mask & (1 << j) == 0 || !c.is_finite() {
                continue;
            }
            for nx in 0..m {
                if mask & (1 << nx) != 0 {
                    continue;
                }
                if let Some(d) = dist(j + 1, nx + 1) {
                    let nm = mask | (1 << nx);
                    let v = c + d;
                    if v < cost[nm * m + nx] {
                        cost[nm * m + nx] = v;
                        parent[nm * m + nx] = j as u8;
                    }
                }
            }
        }
    }
    let last_mask = full - 1;
    let mut best = (f64::INFINITY, usize::MAX);
    for j in 0..m {
        if let Some(d) = dist(j + 1, 0) {
            let v = cost[last_mask * m + j] + d;
            if v < best.0 {
                best = (v, j);
            }
        }
    }
    if !best.0.is_finite() {
        return Ok(None);
    }
    let mut order = Vec::with_capacity(n);
    let (mut mask, mut j) = (last_mask, best.1);
    loop {
        order.push(j + 1);
        let p = parent[mask * m + j];
        mask &= !(1 << j);
        if p == u8::MAX {
            break;
        }
        j = p as usize;
    }
    order.push(0);
    order.reverse();
    Ok(Some((order, best.0)))
}

/// Provably optimal TSP tour and its length (instance distance mode).
pub fn held_karp(instance: &Instance) -> Result<(Tour, f64)> {
    if instance.kind != ProblemKind::Tsp {
        return Err(Error::InvalidInstance("held_karp needs a TSP instance".into()));
    }
    let mode = instance.default_distance_mode();
    let (order, len) = held_karp_with(instance.len(), |a, b| Some(instance.raw_dist(a, b, mode)))?
        .ok_or_else(|| Error::Internal("complete graph without a tour".into()))?;
    Ok((Tour::new(order), len))
}

/// Nearest-neighbour construction (ties to the lower index). CVRP returns
/// to the depot whenever no unvisited customer fits.
pub fn nearest_neighbor(instance: &Instance, start: usize) -> Result<Solution> {
    let n = instance.len();
    let mode = instance.default_distance_mode();
    let mut visited = vec![false; n];
    let (s, mut q) = match instance.kind {
        ProblemKind::Tsp if start < n => (start, 0.0),
        ProblemKind::Tsp => return Err(Error::State(format!("start node {start} out of range"))),
        ProblemKind::Cvrp => (DEPOT, instance.capacity),
    };
    visited[s] = true;
    let mut seq = vec![s];
    let mut cur = s;
    let mut left = n - 1;
    while left > 0 {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if visited[j] || (instance.kind == ProblemKind::Cvrp && instance.demands[j] > q + 1e-9) {
                continue;
            }
            let d = instance.raw_dist(cur, j, mode);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        match best {
            Some((_, j)) => {
                visited[j] = true;
                seq.push(j);
                cur = j;
                left -= 1;
                if instance.kind == ProblemKind::Cvrp {
                    q -= instance.demands[j];
                }
            }
            None if instance.kind == ProblemKind::Cvrp && cur != DEPOT => {
                seq.push(DEPOT);
                cur = DEPOT;
                q = instance.capacity;
            }
            None => return Err(Error::Internal("nearest neighbour found no admissible node".into())),
        }
    }
    if instance.kind == ProblemKind::Cvrp {
        seq.push(DEPOT);
    }
    Solution::from_sequence(instance, &seq, seq.len() - 1, 0, None)
}

pub fn optimality_gap(objective: f64, reference: f64) -> Result<f64> {
    if !(reference > 0.0) || !reference.is_finite() {
        return Err(Error::InvalidReference(reference));
    }
    Ok(100.0 * (objective - reference) / reference)
}

/// `100 · hits / steps`.
pub fn ratio_percent(hits: usize, steps: usize) -> f64 {
    if steps == 0 {
        return 100.0;
    }
    100.0 * hits as f64 / steps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub hits: usize,
    pub steps: usize,
    pub percent: f64,
}

/// Walks the reference solution and counts the steps whose true successor
/// is in the policy's candidate set for the state induced by the reference
/// prefix. The closing step back to the start has a single admissible
/// node and always counts as a hit; a TSP-n walk therefore has n steps.
pub fn optimality_ratio<T: Real>(
    instance: &Instance,
    graph: &SparseGraph,
    reference: &[usize],
    bundle: &PolicyBundle<T>,
) -> Result<RatioReport> {
    let seq: Vec<usize> = match instance.kind {
        ProblemKind::Tsp => {
            Tour::new(reference.to_vec()).validate(instance.len())?;
            reference.to_vec()
        }
        ProblemKind::Cvrp => crate::instances::RoutePlan::from_sequence(reference).to_sequence(),
    };
    let tables = (bundle.reducer == ReducerKind::Learned).then(|| ReductionTables::build(&bundle.params.reduction, instance));
    let mut st = init_state(instance, StartRule::Fixed(seq[0]))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (mut hits, mut steps) = (0, 0);
    for &next in &seq[1..] {
        let feas = feasible_set(&st, graph, instance);
        let mut cands = if feas.nodes.is_empty() {
            Vec::new()
        } else {
            match bundle.reducer {
                ReducerKind::Dssr => dssr_candidates::<T>(instance, st.last, &feas.nodes, bundle.k).indices,
                ReducerKind::Learned => {
                    let ctx = Context { first: st.first, last: st.last, q_remain: st.q_remain };
                    let s = score_feasible(bundle.params, tables.as_ref().unwrap(), instance, ctx, &feas.nodes, false)?;
                    select_candidates(&feas.nodes, &s.probs, &s.logits, s.log_z, bundle.k, SelectMode::Greedy, &mut rng).indices
                }
            }
        };
        if feas.depot {
            cands.push(DEPOT);
        }
        steps += 1;
        if cands.contains(&next) {
            hits += 1;
        }
        st.advance(instance, next);
    }
    if instance.kind == ProblemKind::Tsp {
        steps += 1;
        hits += 1;
    }
    Ok(RatioReport { hits, steps, percent: ratio_percent(hits, steps) })
}

use rand::SeedableRng;

/// Symmetrised k-nearest edge set: `(i, j)` survives when either endpoint
/// ranks the other among its `k` nearest (ties to the lower index).
pub fn knn_edges(instance: &Instance, k: usize) -> Vec<Vec<bool>> {
    let n = instance.len();
    let mut keep = vec![vec![false; n]; n];
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (instance.unit_dist(i, j), j)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            keep[i][j] = true;
            keep[j][i] = true;
        }
    }
    keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedRow {
    pub instance: String,
    pub k: usize,
    pub optimum: f64,
    /// Optimum over the pruned edge set; `None` when it has no tour.
    pub restricted: Option<f64>,
    pub gap_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedSummary {
    pub k: usize,
    /// Mean gap over instances with a feasible pruned tour.
    pub mean_gap_pct: f64,
    pub max_gap_pct: f64,
    pub infeasible: usize,
}

/// Exact optimum on the full graph versus on k-nearest pruned graphs.
pub fn pruned_oracle_experiment(instances: &[Instance], k_values: &[usize]) -> Result<(Vec<PrunedRow>, Vec<PrunedSummary>)> {
    let per: Vec<Vec<PrunedRow>> = instances
        .par_iter()
        .map(|inst| -> Result<Vec<PrunedRow>> {
            let (_, opt) = held_karp(inst)?;
            let mode = inst.default_distance_mode();
            k_values
                .iter()
                .map(|&k| {
                    let keep = knn_edges(inst, k);
                    let r = held_karp_with(inst.len(), |a, b| keep[a][b].then(|| inst.raw_dist(a, b, mode)))?;
                    let restricted = r.map(|x| x.1);
                    let gap_pct = restricted.map(|v| optimality_gap(v, opt)).transpose()?.map(|g| g.max(0.0));
                    Ok(PrunedRow { instance: inst.name.clone(), k, optimum: opt, restricted, gap_pct })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<PrunedRow> = per.into_iter().flatten().collect();
    let summary = k_values
        .iter()
        .map(|&k| {
            let gaps: Vec<f64> = rows.iter().filter(|r| r.k == k).filter_map(|r| r.gap_pct).collect();
            let infeasible = rows.iter().filter(|r| r.k == k && r.restricted.is_none()).count();
            PrunedSummary {
                k,
                mean_gap_pct: if gaps.is_empty() { f64::NAN } else { gaps.iter().sum::<f64>() / gaps.len() as f64 },
                max_gap_pct: gaps.iter().copied().fold(0.0, f64::max),
                infeasible,
            }
        })
        .collect();
    Ok((rows, summary))
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub instance: String,
    pub method: String,
    pub k: Option<usize>,
    pub objective: f64,
    pub reference_objective: Option<f64>,
    pub gap_pct: Option<f64>,
    pub optimality_ratio: Option<f64>,
    pub fallback_events: usize,
    /// Only filled when timings are requested, so reports stay reproducible.
    pub wall_ms: Option<f64>,
}

impl SolveReport {
    pub fn new(instance: &str, method: &str, objective: f64, reference: Option<f64>) -> Result<Self> {
        Ok(Self {
            instance: instance.to_string(),
            method: method.to_string(),
            k: None,
            objective,
            reference_objective: reference,
            gap_pct: reference.map(|r| optimality_gap(objective, r)).transpose()?,
            optimality_ratio: None,
            fallback_events: 0,
            wall_ms: None,
        })
    }
}

pub fn write_reports_csv(w: impl Write, rows: &[SolveReport]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Internal(format!("csv: {e}")))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_reports_json(w: impl Write, rows: &[SolveReport]) -> Result<()> {
    serde_json::to_writer_pretty(w, rows)?;
    Ok(())
}

/// Mean of a column, skipping missing values.
pub fn mean_of(rows: &[SolveReport], method: &str, f: impl Fn(&SolveReport) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method).filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_uniform, tour_length};

    #[test]
    fn square_and_triangle() {
        let sq = Instance::tsp("sq", vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (t, len) = held_karp(&sq).unwrap();
        assert!((len - 4.0).abs() < 1e-12);
        assert!((tour_length(&sq, &t).unwrap() - 4.0).abs() < 1e-12);
        let tri = Instance::tsp("tri", vec![[0.0, 0.0], [0.3, 0.0], [0.0, 0.4]]).unwrap();
        assert!((held_karp(&tri).unwrap().1 - 1.2).abs() < 1e-12);
    }

    #[test]
    fn size_guard() {
        let inst = generate_uniform(ProblemKind::Tsp, 19, None, 1).unwrap();
        assert!(matches!(held_karp(&inst), Err(Error::SizeGuard { n: 19, .. })));
    }

    #[test]
    fn nn_collinear() {
        let inst = Instance::tsp("line", vec![[0.0, 0.0], [0.1, 0.0], [0.3, 0.0]]).unwrap();
        let s = nearest_neighbor(&inst, 0).unwrap();
        assert_eq!(s.order, Some(vec![0, 1, 2]));
        assert!((s.objective - 0.6).abs() < 1e-12);
    }

    #[test]
    fn gaps() {
        assert_eq!(optimality_gap(23.12, 23.12).unwrap(), 0.0);
        assert!((optimality_gap(2.0, 1.0).unwrap() - 100.0).abs() < 1e-12);
        assert!(matches!(optimality_gap(1.0, 0.0), Err(Error::InvalidReference(_))));
    }

    #[test]
    fn forbidden_edges_can_make_tours_impossible() {
        // A star: node 0 connected to all, leaves not connected to each other.
        let r = held_karp_with(4, |a, b| (a == 0 || b == 0).then_some(1.0)).unwrap();
        assert!(r.is_none());
    }
}
