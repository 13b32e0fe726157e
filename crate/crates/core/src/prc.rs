//! Parallel local reconstruction: cut the solution into disjoint segments,
//! rebuild each segment's interior greedily with the local policy between
//! its two fixed endpoints, keep a rebuild only if it is strictly shorter.
//!
//! Segments of one iteration share at most their endpoints, which never
//! move, so they are repaired independently and merged by position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{DistanceMode, Instance, ProblemKind, RoutePlan, Tour};
use crate::local::{self, normalize_subgraph};
use crate::neural::{Params, Real};
use crate::reduction::{score_feasible, top_k_positions, Context, ReductionTables};
use crate::rollout::DEPOT;
use crate::training::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrcConfig {
    pub iterations: usize,
    /// Longest segment (in nodes, endpoints included); clamped to the
    /// tour or route length.
    pub max_destroy_len: usize,
    /// Candidate-set size used while rebuilding.
    pub k: usize,
    pub seed: u64,
}

impl Default for PrcConfig {
    fn default() -> Self {
        Self { iterations: 100, max_destroy_len: 1000, k: 20, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrcOutcome {
    /// Improved visit sequence (CVRP: depot-delimited).
    pub sequence: Vec<usize>,
    pub objective: f64,
    /// Objective before the first and after every iteration.
    pub history: Vec<f64>,
    pub accepted: usize,
}

struct Ctx<'a, T> {
    instance: &'a Instance,
    params: &'a Params<T>,
    tables: ReductionTables<T>,
    k: usize,
    mode: DistanceMode,
}

impl<'a, T: Real> Ctx<'a, T> {
    fn path_len(&self, p: &[usize]) -> f64 {
        p.windows(2).map(|w| self.instance.raw_dist(w[0], w[1], self.mode)).sum()
    }

    /// Greedy rebuild of `path[1..len-1]` from `path[0]` towards the fixed
    /// end `path[len-1]`; `q` is the remaining capacity at `path[0]`.
    fn rebuild(&self, path: &[usize], mut q: f64) -> Result<Vec<usize>> {
        let end = *path.last().unwrap();
        let mut remaining: Vec<usize> = path[1..path.len() - 1].to_vec();
        remaining.sort_unstable();
        let mut cur = path[0];
        let mut out = vec![cur];
        let dem = self.instance.unit_demands();
        let cvrp = self.instance.kind == ProblemKind::Cvrp;
        while !remaining.is_empty() {
            let cands: Vec<usize> = if remaining.len() <= self.k {
                remaining.clone()
            } else {
                let ctx = Context { first: end, last: cur, q_remain: q };
                let s = score_feasible(self.params, &self.tables, self.instance, ctx, &remaining, false)?;
                top_k_positions(&s.probs, &remaining, self.k).into_iter().map(|p| remaining[p]).collect()
            };
            let next = if cands.len() == 1 {
                cands[0]
            } else {
                let sub = normalize_subgraph(self.instance, end, cur, &cands, q)?;
                let o = local::forward(self.params, &sub, sub.len(), false)?;
                let mut best = 0;
                for i in 1..cands.len() {
                    if o.probs[i] > o.probs[best] {
                        best = i;
                    }
                }
                cands[best]
            };
            remaining.retain(|&v| v != next);
            if cvrp {
                q = (q - dem[next]).max(0.0);
            }
            out.push(next);
            cur = next;
        }
        out.push(end);
        Ok(out)
    }

    /// Splits `path` at random into segments sharing endpoints, rebuilds
    /// them in parallel, and returns the improved path plus acceptances.
    fn improve_path(&self, path: &[usize], loads: &[f64], rng: &mut ChaCha8Rng, max_len: usize) -> Result<(Vec<usize>, usize)> {
        let last = path.len() - 1;
        let mut cuts = vec![0];
        while *cuts.last().unwrap() < last {
            let len = rng.gen_range(2..=max_len.max(2));
            cuts.push((cuts.last().unwrap() + len - 1).min(last));
        }
        let results: Vec<Option<Vec<usize>>> = cuts
            .par_windows(2)
            .map(|w| -> Result<Option<Vec<usize>>> {
                let seg = &path[w[0]..=w[1]];
                if seg.len() < 4 {
                    return Ok(None);
                }
                let new = self.rebuild(seg, 1.0 - loads[w[0]])?;
                Ok((self.path_len(&new) < self.path_len(seg)).then_some(new))
            })
            .collect::<Result<_>>()?;
        let mut out = path.to_vec();
        let mut accepted = 0;
        for (w, r) in cuts.windows(2).zip(results) {
            if let Some(new) = r {
                out[w[0]..=w[1]].copy_from_slice(&new);
                accepted += 1;
            }
        }
        Ok((out, accepted))
    }
}

fn objective(instance: &Instance, seq: &[usize], mode: DistanceMode) -> Result<f64> {
    match instance.kind {
        ProblemKind::Tsp => crate::instances::tour_length_with(instance, &Tour::new(seq.to_vec()), mode),
        ProblemKind::Cvrp => {
            let (c, rep) = crate::instances::route_cost_with(instance, &RoutePlan::from_sequence(seq), mode);
            if rep.is_feasible() {
                Ok(c)
            } else {
                Err(Error::InvalidSolution(format!("{:?}", rep.violations)))
            }
        }
    }
}

/// Runs `config.iterations` rounds of destroy-and-repair on `sequence`.
pub fn improve<T: Real>(instance: &Instance, sequence: &[usize], params: &Params<T>, config: &PrcConfig) -> Result<PrcOutcome> {
    let mode = instance.default_distance_mode();
    let start_obj = objective(instance, sequence, mode).map_err(|e| Error::InvalidSolution(e.to_string()))?;
    if params.config.kind != instance.kind {
        return Err(Error::State("model and instance are for different problems".into()));
    }
    if config.max_destroy_len < 2 {
        return Err(Error::State(format!("max_destroy_len must be at least 2, got {}", config.max_destroy_len)));
    }
    let mut history = vec![start_obj];
    let mut current = match instance.kind {
        ProblemKind::Tsp => sequence.to_vec(),
        ProblemKind::Cvrp => RoutePlan::from_sequence(sequence).to_sequence(),
    };
    if config.iterations == 0 {
        return Ok(PrcOutcome { sequence: sequence.to_vec(), objective: start_obj, history, accepted: 0 });
    }
    let ctx = Ctx {
        instance,
        params,
        tables: ReductionTables::build(&params.reduction, instance),
        k: config.k.max(1),
        mode,
    };
    let dem = instance.unit_demands();
    let mut accepted = 0;
    let mut obj = start_obj;
    for it in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[it as u64]));
        let next = match instance.kind {
            ProblemKind::Tsp => {
                let n = current.len();
                let off = rng.gen_range(0..n);
                let mut cyc: Vec<usize> = (0..=n).map(|i| current[(off + i) % n]).collect();
                let zeros = vec![0.0; cyc.len()];
                let (path, acc) = ctx.improve_path(&cyc, &zeros, &mut rng, config.max_destroy_len.min(n + 1))?;
                accepted += acc;
                cyc = path;
                cyc.pop();
                cyc
            }
            ProblemKind::Cvrp => {
                let plan = RoutePlan::from_sequence(&current);
                let mut seq = vec![DEPOT];
                for route in &plan.routes {
                    let mut path = vec![DEPOT];
                    path.extend_from_slice(route);
                    path.push(DEPOT);
                    let mut loads = vec![0.0; path.len()];
                    for i in 1..path.len() {
                        loads[i] = loads[i - 1] + dem[path[i]];
                    }
                    let (p, acc) = ctx.improve_path(&path, &loads, &mut rng, config.max_destroy_len.min(path.len()))?;
                    accepted += acc;
                    seq.extend_from_slice(&p[1..]);
                }
                seq
            }
        };
        let new_obj = objective(instance, &next, mode).map_err(|e| Error::Internal(format!("repair broke feasibility: {e}")))?;
        if new_obj <= obj {
            current = next;
            obj = new_obj;
        }
        history.push(obj);
    }
    Ok(PrcOutcome { sequence: current, objective: obj, history, accepted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::generate_uniform;
    use crate::neural::ModelConfig;

    #[test]
    fn zero_iterations_is_identity() {
        let inst = generate_uniform(ProblemKind::Tsp, 12, None, 2).unwrap();
        let p = Params::<f64>::init(ModelConfig { d: 8, d_ff: 16, layers: 1, ..ModelConfig::full(ProblemKind::Tsp) }, 1);
        let seq: Vec<usize> = (0..12).collect();
        let out = improve(&inst, &seq, &p, &PrcConfig { iterations: 0, ..Default::default() }).unwrap();
        assert_eq!(out.sequence, seq);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn rejects_infeasible_input() {
        let inst = generate_uniform(ProblemKind::Tsp, 5, None, 2).unwrap();
        let p = Params::<f64>::init(ModelConfig { d: 8, d_ff: 16, layers: 1, ..ModelConfig::full(ProblemKind::Tsp) }, 1);
        let r = improve(&inst, &[0, 1, 1, 2, 3], &p, &PrcConfig::default());
        assert!(matches!(r, Err(Error::InvalidSolution(_))));
    }

    #[test]
    fn monotone_and_feasible_cvrp() {
        let inst = generate_uniform(ProblemKind::Cvrp, 30, Some(40.0), 3).unwrap();
        let p = Params::<f64>::init(ModelConfig { d: 8, d_ff: 16, layers: 1, ..ModelConfig::full(ProblemKind::Cvrp) }, 1);
        // One customer per route: every rebuild is trivial but must stay feasible.
        let mut seq = vec![0];
        let mut order: Vec<usize> = (1..=30).collect();
        order.reverse();
        for chunk in order.chunks(4) {
            seq.extend_from_slice(chunk);
            seq.push(0);
        }
        let out = improve(&inst, &seq, &p, &PrcConfig { iterations: 5, max_destroy_len: 6, k: 3, seed: 4 }).unwrap();
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
        let (_, rep) = crate::instances::route_cost(&inst, &RoutePlan::from_sequence(&out.sequence));
        assert!(rep.is_feasible());
    }
}
