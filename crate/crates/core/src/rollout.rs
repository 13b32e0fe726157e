//! Solution construction: feasibility masking, single steps and complete
//! rollouts, batched in lockstep so the local model sees padded batches.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::instances::{route_cost_with, tour_length_with, Instance, ProblemKind, RoutePlan, Tour};
use crate::local::{self, LocalCache, SubGraph};
use crate::neural::{Params, Real};
use crate::reduction::{
    check_candidates, dssr_candidates, score_feasible, select_candidates, CandidateSet, Context,
    ReductionGrad, ReductionTables, ScoreCache, SelectMode,
};

pub const DEPOT: usize = 0;
const CAPACITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
    /// Sampling that keeps everything the policy gradient needs.
    Train,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "sample" => Ok(Self::Sample),
            "train" => Ok(Self::Train),
            _ => Err(Error::State(format!("unknown decode mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReducerKind {
    /// The learned scorer keeps its top-k.
    Learned,
    /// The k nearest feasible nodes.
    Dssr,
}

impl std::str::FromStr for ReducerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" | "l2r" => Ok(Self::Learned),
            "dssr" | "d-ssr" => Ok(Self::Dssr),
            _ => Err(Error::State(format!("unknown reducer `{s}`"))),
        }
    }
}

/// Parameters plus the knobs that decide how they are used.
#[derive(Clone, Copy)]
pub struct PolicyBundle<'a, T> {
    pub params: &'a Params<T>,
    pub reducer: ReducerKind,
    pub k: usize,
    /// Check candidate-set invariants and keep a per-step trace.
    pub instrument: bool,
}

impl<'a, T: Real> PolicyBundle<'a, T> {
    pub fn new(params: &'a Params<T>, k: usize) -> Self {
        Self { params, reducer: ReducerKind::Learned, k, instrument: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartRule {
    Fixed(usize),
    /// Uniform start drawn from a seeded generator (TSP training).
    Random(u64),
}

/// Mutable construction state of one instance.
#[derive(Debug, Clone)]
pub struct RolloutState {
    pub kind: ProblemKind,
    pub visited: Vec<bool>,
    /// Unvisited customers, unordered; `slot[i]` is `i`'s position.
    open: Vec<usize>,
    slot: Vec<usize>,
    pub partial: Vec<usize>,
    pub first: usize,
    pub last: usize,
    pub q_remain: f64,
    pub step: usize,
    pub fallback_events: usize,
    /// `(log p(π_t), log o(τ_t))` per step in training mode.
    pub logs: Vec<(f64, Option<f64>)>,
}

impl RolloutState {
    pub fn is_done(&self) -> bool {
        match self.kind {
            ProblemKind::Tsp => self.open.is_empty(),
            ProblemKind::Cvrp => self.open.is_empty() && self.last == DEPOT,
        }
    }

    pub fn unvisited(&self) -> &[usize] {
        &self.open
    }

    /// Appends `v`; for CVRP a depot visit closes the route and refills.
    pub fn advance(&mut self, instance: &Instance, v: usize) {
        if self.kind == ProblemKind::Cvrp {
            if v == DEPOT {
                self.q_remain = 1.0;
                self.partial.push(DEPOT);
                self.last = DEPOT;
                self.step += 1;
                return;
            }
            self.q_remain = (self.q_remain - instance.unit_demands()[v]).max(0.0);
        }
        self.visit(v);
    }

    fn visit(&mut self, v: usize) {
        if !self.visited[v] {
            self.visited[v] = true;
            let at = self.slot[v];
            let moved = *self.open.last().unwrap();
            self.open.swap_remove(at);
            if moved != v {
                self.slot[moved] = at;
            }
        }
        self.partial.push(v);
        self.last = v;
        self.step += 1;
    }
}

pub fn init_state(instance: &Instance, start: StartRule) -> Result<RolloutState> {
    let n = instance.len();
    if n == 0 {
        return Err(Error::InvalidInstance("empty instance".into()));
    }
    let s = match (instance.kind, start) {
        (ProblemKind::Cvrp, _) => DEPOT,
        (ProblemKind::Tsp, StartRule::Fixed(i)) if i < n => i,
        (ProblemKind::Tsp, StartRule::Fixed(i)) => return Err(Error::State(format!("start node {i} out of range"))),
        (ProblemKind::Tsp, StartRule::Random(seed)) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..n),
    };
    let mut visited = vec![false; n];
    visited[s] = true;
    let open: Vec<usize> = (0..n).filter(|&i| i != s).collect();
    let mut slot = vec![usize::MAX; n];
    for (p, &i) in open.iter().enumerate() {
        slot[i] = p;
    }
    Ok(RolloutState {
        kind: instance.kind,
        visited,
        open,
        slot,
        partial: vec![s],
        first: s,
        last: s,
        q_remain: 1.0,
        step: 0,
        fallback_events: 0,
        logs: Vec::new(),
    })
}

/// Nodes the reduction model may score this step.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasible {
    /// Customers (CVRP) or cities (TSP); never the depot.
    pub nodes: Vec<usize>,
    /// The depot is admissible (CVRP, last is not the depot).
    pub depot: bool,
    /// The pruned graph stranded the walker and all open nodes were used.
    pub fallback: bool,
}

pub fn feasible_set(state: &RolloutState, graph: &SparseGraph, instance: &Instance) -> Feasible {
    let fits = |j: usize| match state.kind {
        ProblemKind::Tsp => true,
        ProblemKind::Cvrp => instance.unit_demands()[j] <= state.q_remain + CAPACITY_TOL,
    };
    let mut nodes: Vec<usize> = state.open.iter().copied().filter(|&j| fits(j) && graph.contains(state.last, j)).collect();
    let mut fallback = false;
    if nodes.is_empty() {
        nodes = state.open.iter().copied().filter(|&j| fits(j)).collect();
        fallback = !nodes.is_empty();
    }
    let depot = state.kind == ProblemKind::Cvrp && state.last != DEPOT;
    Feasible { nodes, depot, fallback }
}

/// Per-step trace for instrumented rollouts (one JSON line each).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub feasible_count: usize,
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub sampled: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
}

/// What the policy gradient needs from one step.
pub struct StepRecord<T> {
    pub reduction: Option<(ScoreCache<T>, Vec<T>, usize)>,
    pub local: Option<(LocalCache<T>, Vec<T>, usize)>,
}

/// Trajectory-level training data.
pub struct TrainRecord<T> {
    pub tables: ReductionTables<T>,
    pub steps: Vec<StepRecord<T>>,
}

/// One finished rollout.
pub struct Trajectory<T> {
    /// Visit sequence; CVRP sequences start and end at the depot.
    pub sequence: Vec<usize>,
    /// Objective over unit coordinates (training reward is its negative).
    pub unit_objective: f64,
    pub sum_log_p: f64,
    pub sum_log_o: f64,
    pub steps: usize,
    pub fallback_events: usize,
    pub trace: Vec<StepTrace>,
    /// Every step's candidate set, reduction sample and choice.
    pub decisions: Vec<Decision>,
    pub train: Option<TrainRecord<T>>,
}

/// The discrete outcome of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub candidates: Vec<usize>,
    pub tau: Option<usize>,
    pub chosen: usize,
}

impl<T: Real> Trajectory<T> {
    pub fn reward(&self) -> f64 {
        -self.unit_objective
    }

    /// Accumulates `g · ∇(Σ log o + Σ log p)` into `grads`. `log o` terms
    /// are included only when `with_reduction`, `log p` only when `with_local`.
    pub fn backward(&self, params: &Params<T>, g: T, with_reduction: bool, with_local: bool, grads: &mut Params<T>) -> Result<()> {
        let rec = self.train.as_ref().ok_or_else(|| Error::State("trajectory was not recorded for training".into()))?;
        let mut rg = ReductionGrad::new(rec.tables.h.rows, rec.tables.h.cols);
        for s in &rec.steps {
            if with_reduction {
                if let Some((cache, probs, target)) = &s.reduction {
                    rg.step(params, &rec.tables, cache, probs, *target, g, grads);
                }
            }
            if with_local {
                if let Some((cache, probs, pos)) = &s.local {
                    local::backward(params, cache, probs, *pos, g, grads);
                }
            }
        }
        if with_reduction {
            rg.finish(params, &rec.tables, grads);
        }
        Ok(())
    }
}

struct Worker<'a, T> {
    instance: &'a Instance,
    graph: &'a SparseGraph,
    state: RolloutState,
    rng: ChaCha8Rng,
    tables: Option<ReductionTables<T>>,
    records: Vec<StepRecord<T>>,
    trace: Vec<StepTrace>,
    decisions: Vec<Decision>,
    sum_log_p: f64,
    sum_log_o: f64,
}

/// Candidate set of the current step, before the local model runs.
struct Prepared<T> {
    candidates: Vec<usize>,
    sub: Option<SubGraph>,
    reduction: Option<(ScoreCache<T>, Vec<T>, usize)>,
    log_o: Option<f64>,
    tau: Option<usize>,
}

impl<'a, T: Real> Worker<'a, T> {
    fn prepare(&mut self, bundle: &PolicyBundle<T>, mode: DecodeMode) -> Result<Prepared<T>> {
        let feas = feasible_set(&self.state, self.graph, self.instance);
        if feas.fallback {
            self.state.fallback_events += 1;
        }
        let st = &self.state;
        let mut reduction = None;
        let mut log_o = None;
        let mut tau = None;
        let mut cs: CandidateSet<T> = CandidateSet { indices: Vec::new(), scores: Vec::new(), sampled: None };
        let mut trace_probs = Vec::new();
        if !feas.nodes.is_empty() {
            cs = match bundle.reducer {
                ReducerKind::Dssr => dssr_candidates(self.instance, st.last, &feas.nodes, bundle.k),
                ReducerKind::Learned => {
                    let tables = self.tables.as_ref().expect("tables built for the learned reducer");
                    let ctx = Context { first: st.first, last: st.last, q_remain: st.q_remain };
                    let keep = mode == DecodeMode::Train;
                    let scored = score_feasible(bundle.params, tables, self.instance, ctx, &feas.nodes, keep)?;
                    let sel = if keep { SelectMode::Train } else { SelectMode::Greedy };
                    let cs = select_candidates(&feas.nodes, &scored.probs, &scored.logits, scored.log_z, bundle.k, sel, &mut self.rng);
                    if let (Some(cache), Some((tau_node, lo))) = (scored.cache, cs.sampled) {
                        let target = feas.nodes.iter().position(|&j| j == tau_node).unwrap();
                        self.sum_log_o += lo.f64();
                        log_o = Some(lo.f64());
                        tau = Some(tau_node);
                        reduction = Some((cache, scored.probs.clone(), target));
                    }
                    if bundle.instrument {
                        trace_probs = scored.probs;
                    }
                    cs
                }
            };
        }
        if bundle.instrument {
            let violation = if feas.nodes.is_empty() {
                None
            } else {
                check_candidates(&feas.nodes, &trace_probs, &cs, bundle.k).err()
            };
            self.trace.push(StepTrace {
                t: st.step,
                feasible_count: feas.nodes.len(),
                candidates: cs.indices.clone(),
                scores: cs.scores.iter().map(|s| s.f64()).collect(),
                sampled: cs.sampled.map(|s| s.0),
                violation,
            });
        }
        let mut candidates = cs.indices;
        if feas.depot {
            candidates.push(DEPOT);
        }
        if candidates.is_empty() {
            return Err(Error::Internal(format!("no admissible node at step {}", st.step)));
        }
        let sub = if candidates.len() > 1 {
            let first = if st.kind == ProblemKind::Cvrp { DEPOT } else { st.first };
            Some(local::normalize_subgraph(self.instance, first, st.last, &candidates, st.q_remain)?)
        } else {
            None
        };
        Ok(Prepared { candidates, sub, reduction, log_o, tau })
    }

    fn apply(&mut self, prep: Prepared<T>, out: Option<local::LocalOut<T>>, mode: DecodeMode) -> Result<()> {
        let (pos, log_p, local_rec) = match out {
            None => (0, 0.0, None),
            Some(mut out) => {
                let live = prep.candidates.len();
                let (pos, lp) = local::choose_next(&out, live, mode == DecodeMode::Greedy, &mut self.rng)?;
                let rec = out.cache.take().map(|c| (c, out.probs[..live].to_vec(), pos));
                (pos, lp.f64(), rec)
            }
        };
        let v = prep.candidates[pos];
        self.decisions.push(Decision { candidates: prep.candidates.clone(), tau: prep.tau, chosen: v });
        let st = &mut self.state;
        if mode == DecodeMode::Train {
            st.logs.push((log_p, prep.log_o));
            self.records.push(StepRecord { reduction: prep.reduction, local: local_rec });
        }
        self.sum_log_p += log_p;
        st.advance(self.instance, v);
        Ok(())
    }
}

/// Seeds per instance for [`construct`]: start rule and sampling stream.
#[derive(Debug, Clone, Copy)]
pub struct RolloutSeed {
    pub start: StartRule,
    pub rng: u64,
}

impl RolloutSeed {
    pub fn greedy() -> Self {
        Self { start: StartRule::Fixed(0), rng: 0 }
    }
}

/// Builds solutions for a batch of same-kind instances in lockstep; every
/// step's local-model calls form one padded batch.
pub fn construct<T: Real>(
    instances: &[Instance],
    graphs: &[SparseGraph],
    bundle: &PolicyBundle<T>,
    mode: DecodeMode,
    seeds: &[RolloutSeed],
) -> Result<Vec<Trajectory<T>>> {
    if instances.len() != graphs.len() || instances.len() != seeds.len() {
        return Err(Error::Batch("instances, graphs and seeds differ in length".into()));
    }
    if let Some(first) = instances.first() {
        if instances.iter().any(|i| i.kind != first.kind) {
            return Err(Error::Batch("mixed problem kinds in one batch".into()));
        }
        if first.kind != bundle.params.config.kind {
            return Err(Error::Batch("model and instances are for different problems".into()));
        }
    }
    let mut workers: Vec<Worker<T>> = instances
        .par_iter()
        .zip(graphs)
        .zip(seeds)
        .map(|((inst, g), s)| -> Result<Worker<T>> {
            if g.len() != inst.len() {
                return Err(Error::Batch("graph does not match instance".into()));
            }
            let tables = (bundle.reducer == ReducerKind::Learned).then(|| ReductionTables::build(&bundle.params.reduction, inst));
            Ok(Worker {
                instance: inst,
                graph: g,
                state: init_state(inst, s.start)?,
                rng: ChaCha8Rng::seed_from_u64(s.rng),
                tables,
                records: Vec::new(),
                trace: Vec::new(),
                decisions: Vec::new(),
                sum_log_p: 0.0,
                sum_log_o: 0.0,
            })
        })
        .collect::<Result<_>>()?;

    let limit = instances.iter().map(|i| 2 * i.len() + 2).max().unwrap_or(0);
    for _ in 0..limit {
        let active: Vec<usize> = (0..workers.len()).filter(|&i| !workers[i].state.is_done()).collect();
        if active.is_empty() {
            break;
        }
        let mut preps: Vec<(usize, Prepared<T>)> = workers
            .par_iter_mut()
            .enumerate()
            .filter(|(_, w)| !w.state.is_done())
            .map(|(i, w)| w.prepare(bundle, mode).map(|p| (i, p)))
            .collect::<Result<_>>()?;
        let subs: Vec<SubGraph> = preps.iter().filter_map(|(_, p)| p.sub.clone()).collect();
        let mut outs = if subs.is_empty() {
            Vec::new()
        } else {
            local::forward_batch(bundle.params, &subs, mode == DecodeMode::Train)?
        }
        .into_iter();
        let mut assigned: Vec<(usize, Prepared<T>, Option<local::LocalOut<T>>)> = Vec::with_capacity(preps.len());
        for (i, p) in preps.drain(..) {
            let o = if p.sub.is_some() { outs.next() } else { None };
            assigned.push((i, p, o));
        }
        let mut by_worker: Vec<Option<(Prepared<T>, Option<local::LocalOut<T>>)>> = (0..workers.len()).map(|_| None).collect();
        for (i, p, o) in assigned {
            by_worker[i] = Some((p, o));
        }
        workers
            .par_iter_mut()
            .zip(by_worker.into_par_iter())
            .filter_map(|(w, job)| job.map(|j| (w, j)))
            .map(|(w, (p, o))| w.apply(p, o, mode))
            .collect::<Result<()>>()?;
    }

    workers
        .into_iter()
        .map(|w| {
            if !w.state.is_done() {
                return Err(Error::Internal(format!("rollout on `{}` did not terminate", w.instance.name)));
            }
            let seq = w.state.partial.clone();
            check_sequence(w.instance, &seq)?;
            let unit_objective = match w.instance.kind {
                ProblemKind::Tsp => crate::instances::unit_tour_length(w.instance, &seq),
                ProblemKind::Cvrp => crate::instances::unit_route_cost(w.instance, &seq),
            };
            let train = (mode == DecodeMode::Train).then(|| TrainRecord { tables: w.tables.expect("learned reducer"), steps: w.records });
            Ok(Trajectory {
                steps: w.state.step,
                fallback_events: w.state.fallback_events,
                sequence: seq,
                unit_objective,
                sum_log_p: w.sum_log_p,
                sum_log_o: w.sum_log_o,
                trace: w.trace,
                decisions: w.decisions,
                train,
            })
        })
        .collect()
}

/// Asserts a finished visit sequence is a valid solution.
fn check_sequence(instance: &Instance, seq: &[usize]) -> Result<()> {
    match instance.kind {
        ProblemKind::Tsp => Tour::new(seq.to_vec())
            .validate(instance.len())
            .map_err(|e| Error::Internal(format!("constructed tour is invalid: {e}"))),
        ProblemKind::Cvrp => {
            let plan = RoutePlan::from_sequence(seq);
            let (_, report) = route_cost_with(instance, &plan, instance.default_distance_mode());
            if report.is_feasible() {
                Ok(())
            } else {
                Err(Error::Internal(format!("constructed plan is infeasible: {:?}", report.violations)))
            }
        }
    }
}

/// Solution file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub instance: String,
    pub kind: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routes: Option<Vec<Vec<usize>>>,
    pub objective: f64,
    pub steps: usize,
    pub fallback_events: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

impl Solution {
    pub fn from_sequence(instance: &Instance, seq: &[usize], steps: usize, fallback_events: usize, wall_ms: Option<f64>) -> Result<Self> {
        let mode = instance.default_distance_mode();
        let (order, routes, objective) = match instance.kind {
            ProblemKind::Tsp => {
                let tour = Tour::new(seq.to_vec());
                let obj = tour_length_with(instance, &tour, mode)?;
                (Some(tour.order), None, obj)
            }
            ProblemKind::Cvrp => {
                let plan = RoutePlan::from_sequence(seq);
                let (obj, report) = route_cost_with(instance, &plan, mode);
                if !report.is_feasible() {
                    return Err(Error::InvalidSolution(format!("{:?}", report.violations)));
                }
                (None, Some(plan.routes), obj)
            }
        };
        Ok(Self { instance: instance.name.clone(), kind: instance.kind, order, routes, objective, steps, fallback_events, wall_ms })
    }

    /// The visit sequence (CVRP: depot-delimited).
    pub fn sequence(&self) -> Result<Vec<usize>> {
        match (self.kind, &self.order, &self.routes) {
            (ProblemKind::Tsp, Some(o), _) => Ok(o.clone()),
            (ProblemKind::Cvrp, _, Some(r)) => Ok(RoutePlan { routes: r.clone() }.to_sequence()),
            _ => Err(Error::InvalidSolution("solution lacks order/routes for its kind".into())),
        }
    }

    /// Re-checks feasibility and objective against `instance`.
    pub fn validate(&self, instance: &Instance) -> Result<()> {
        if instance.kind != self.kind {
            return Err(Error::InvalidSolution("problem kind mismatch".into()));
        }
        let seq = self.sequence()?;
        check_sequence(instance, &seq).map_err(|e| Error::InvalidSolution(e.to_string()))
    }
}

/// One greedy rollout (evaluation start rule), timed.
pub fn solve<T: Real>(instance: &Instance, graph: &SparseGraph, bundle: &PolicyBundle<T>) -> Result<Solution> {
    let t0 = Instant::now();
    let traj = construct(std::slice::from_ref(instance), std::slice::from_ref(graph), bundle, DecodeMode::Greedy, &[RolloutSeed::greedy()])?
        .pop()
        .unwrap();
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    Solution::from_sequence(instance, &traj.sequence, traj.steps, traj.fallback_events, Some(ms))
}

/// Greedy unit objectives for a batch (evaluation start rule).
pub fn greedy_objectives<T: Real>(instances: &[Instance], graphs: &[SparseGraph], bundle: &PolicyBundle<T>) -> Result<Vec<f64>> {
    let seeds = vec![RolloutSeed::greedy(); instances.len()];
    Ok(construct(instances, graphs, bundle, DecodeMode::Greedy, &seeds)?.into_iter().map(|t| t.unit_objective).collect())
}

/// `(Σ log o(τ_t), Σ log p(π_t))` of a recorded trajectory re-evaluated
/// under `params`, holding every discrete decision fixed. This is the
/// function whose gradient [`Trajectory::backward`] computes.
pub fn replay_log_probs<T: Real>(
    params: &Params<T>,
    instance: &Instance,
    graph: &SparseGraph,
    start: usize,
    decisions: &[Decision],
) -> Result<(f64, f64)> {
    let tables = ReductionTables::build(&params.reduction, instance);
    let mut st = init_state(instance, StartRule::Fixed(start))?;
    let (mut lo, mut lp) = (0.0, 0.0);
    for dec in decisions {
        let feas = feasible_set(&st, graph, instance);
        if let Some(tau) = dec.tau {
            let ctx = Context { first: st.first, last: st.last, q_remain: st.q_remain };
            let s = score_feasible(params, &tables, instance, ctx, &feas.nodes, false)?;
            let p = feas.nodes.iter().position(|&j| j == tau).ok_or_else(|| Error::State("replayed τ not feasible".into()))?;
            lo += (s.logits[p] - s.log_z).f64();
        }
        let pos = dec.candidates.iter().position(|&c| c == dec.chosen).unwrap();
        if dec.candidates.len() > 1 {
            let first = if st.kind == ProblemKind::Cvrp { DEPOT } else { st.first };
            let sub = local::normalize_subgraph(instance, first, st.last, &dec.candidates, st.q_remain)?;
            let out = local::forward(params, &sub, sub.len(), false)?;
            lp += (out.logits[pos] - out.log_z).f64();
        }
        st.advance(instance, dec.chosen);
    }
    Ok((lo, lp))
}
