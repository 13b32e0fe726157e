//! Joint REINFORCE training of the reduction and local policies.
//!
//! Every batch: fresh random instances, static pruning, one sampled rollout
//! of the learner (keeping what the backward pass needs), a baseline value
//! per instance, and one Adam step on
//! `-(1/B) Σ (R - b)(Σ log o(τ) + Σ log p(π))`. The first epoch uses an
//! exponential moving baseline; afterwards the baseline is the greedy
//! rollout of a frozen copy of the parameters, replaced at epoch ends when
//! a one-sided paired t-test says the learner is better.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::graph::{build_sparse_graph, SparseGraph};
use crate::instances::{generate_uniform, Instance, ProblemKind, DEFAULT_CAPACITY};
use crate::neural::{checkpoint, Adam, AdamConfig, ModelConfig, Params, Real};
use crate::rollout::{construct, replay_log_probs, DecodeMode, PolicyBundle, RolloutSeed, StartRule, Trajectory};

/// Trajectories whose gradients are summed together before merging.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: ProblemKind,
    /// Cities (TSP) or customers (CVRP) per training instance.
    pub n: usize,
    /// Vehicle capacity of training instances (CVRP).
    pub capacity: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub k: usize,
    pub gamma: f64,
    pub lr: f64,
    pub lr_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub beta_exp: f64,
    pub ttest_alpha: f64,
    pub eval_pool_size: usize,
    /// Fixed validation instances whose mean greedy objective is logged.
    pub val_size: usize,
    pub seed: u64,
    pub d: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub xi: f64,
    pub reduction_bias: bool,
    pub local_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(ProblemKind::Tsp)
    }
}

impl TrainConfig {
    /// Full-scale settings (100-node instances, 100 epochs of 2,500 batches).
    pub fn full(kind: ProblemKind) -> Self {
        let m = ModelConfig::full(kind);
        Self {
            kind,
            n: 100,
            capacity: DEFAULT_CAPACITY,
            epochs: 100,
            batches_per_epoch: 2500,
            batch_size: if kind == ProblemKind::Tsp { 180 } else { 60 },
            k: if kind == ProblemKind::Tsp { 20 } else { 50 },
            gamma: 0.1,
            lr: 1e-4,
            lr_decay: 0.98,
            clip_norm: 1.0,
            beta_exp: 0.8,
            ttest_alpha: 0.05,
            eval_pool_size: 10_000,
            val_size: 1000,
            seed: 1,
            d: m.d,
            d_ff: m.d_ff,
            layers: m.layers,
            xi: m.xi,
            reduction_bias: true,
            local_bias: true,
        }
    }

    /// Desk-scale settings used by CI.
    pub fn desk(kind: ProblemKind) -> Self {
        let m = ModelConfig::desk(kind);
        Self {
            n: 20,
            capacity: 30.0,
            epochs: 2,
            batches_per_epoch: 200,
            batch_size: 64,
            k: 10,
            lr: 1e-3,
            eval_pool_size: 512,
            val_size: 256,
            d: m.d,
            d_ff: m.d_ff,
            layers: m.layers,
            ..Self::full(kind)
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            d: self.d,
            d_ff: self.d_ff,
            layers: self.layers,
            xi: self.xi,
            reduction_bias: self.reduction_bias,
            local_bias: self.local_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::State(format!("invalid training config: {m}")));
        if self.n < 2 {
            return bad(format!("n = {}", self.n));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.k == 0 {
            return bad("batch size, batches per epoch and k must be positive".into());
        }
        if self.d == 0 || self.d_ff == 0 || self.layers == 0 {
            return bad("model widths and depth must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidGamma(self.gamma));
        }
        if !(self.ttest_alpha > 0.0 && self.ttest_alpha < 1.0) {
            return bad(format!("ttest_alpha = {}", self.ttest_alpha));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.clip_norm >= 0.0) {
            return bad("lr, lr_decay must be positive and clip_norm non-negative".into());
        }
        if !(self.beta_exp > 0.0 && self.beta_exp < 1.0) {
            return bad(format!("beta_exp = {}", self.beta_exp));
        }
        if self.eval_pool_size < 2 || self.val_size == 0 {
            return bad("eval pool needs at least 2 instances and validation at least 1".into());
        }
        if self.kind == ProblemKind::Cvrp && self.capacity <= crate::instances::DEMAND_HIGH as f64 {
            return bad(format!("capacity {} too small", self.capacity));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `e` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch.saturating_sub(1) as i32)
    }

    fn capacity(&self) -> Option<f64> {
        (self.kind == ProblemKind::Cvrp).then_some(self.capacity)
    }
}

/// SplitMix64 finaliser; derives independent seeds from `(seed, tags)`.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Uniform instances and their pruned graphs.
pub fn make_instances(cfg: &TrainConfig, count: usize, tag: &[u64]) -> Result<(Vec<Instance>, Vec<SparseGraph>)> {
    let insts: Vec<Instance> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut t = tag.to_vec();
            t.push(i as u64);
            generate_uniform(cfg.kind, cfg.n, cfg.capacity(), derive_seed(cfg.seed, &t))
        })
        .collect::<Result<_>>()?;
    let graphs = insts.par_iter().map(|i| build_sparse_graph(i, cfg.gamma)).collect::<Result<_>>()?;
    Ok((insts, graphs))
}

/// Policy-gradient estimate `∇ -(1/B) Σ (R_i - b_i)(log o + log p)` and
/// the corresponding loss value.
pub fn reinforce_gradients<T: Real>(
    params: &Params<T>,
    trajectories: &[Trajectory<T>],
    baselines: &[f64],
) -> Result<(Params<T>, f64)> {
    if trajectories.len() != baselines.len() || trajectories.is_empty() {
        return Err(Error::Batch(format!("{} trajectories but {} baselines", trajectories.len(), baselines.len())));
    }
    let b = trajectories.len() as f64;
    let weights: Vec<f64> = trajectories.iter().zip(baselines).map(|(t, &bl)| -(t.reward() - bl) / b).collect();
    let loss: f64 = trajectories.iter().zip(&weights).map(|(t, w)| w * (t.sum_log_o + t.sum_log_p)).sum();
    let partial: Vec<Params<T>> = trajectories
        .par_chunks(GRAD_CHUNK)
        .zip(weights.par_chunks(GRAD_CHUNK))
        .map(|(ts, ws)| -> Result<Params<T>> {
            let mut g = params.zeros_like();
            for (t, &w) in ts.iter().zip(ws) {
                if w != 0.0 {
                    t.backward(params, T::of(w), true, true, &mut g)?;
                }
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    for g in &partial {
        grads.add_assign(g);
    }
    Ok((grads, loss))
}

/// First-epoch moving baseline `b <- β b + (1 - β) mean(R)`, started at the
/// first batch mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpBaseline {
    pub beta: f64,
    pub value: Option<f64>,
}

impl ExpBaseline {
    pub fn new(beta: f64) -> Self {
        Self { beta, value: None }
    }

    pub fn update(&mut self, batch_mean: f64) -> f64 {
        let v = match self.value {
            None => batch_mean,
            Some(b) => self.beta * b + (1.0 - self.beta) * batch_mean,
        };
        self.value = Some(v);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// One-sided paired t-test of `H1: mean(baseline - learner) > 0` on
/// objectives (lower is better).
pub fn paired_ttest(learner: &[f64], baseline: &[f64]) -> Result<TTest> {
    if learner.len() != baseline.len() || learner.len() < 2 {
        return Err(Error::Batch("paired t-test needs two equal samples of size >= 2".into()));
    }
    let diffs: Vec<f64> = baseline.iter().zip(learner).map(|(b, l)| b - l).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = diffs.len() - 1;
    let sd = var.sqrt();
    let scale = mean.abs().max(1.0);
    if sd <= 1e-12 * scale {
        let (t, p) = if mean > 1e-12 * scale {
            (f64::INFINITY, 0.0)
        } else if mean < -1e-12 * scale {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 1.0)
        };
        return Ok(TTest { t, p, df });
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(TTest { t, p: dist.sf(t), df })
}

/// Per-epoch metrics line. Contains no wall-clock values so that two runs
/// with the same seed produce identical logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean sampled training reward (absent for epoch 0).
    pub mean_reward: Option<f64>,
    pub mean_loss: Option<f64>,
    pub mean_grad_norm: Option<f64>,
    pub max_grad_norm: Option<f64>,
    /// Mean greedy objective on the fixed validation set.
    pub val_objective: f64,
    pub baseline_updated: bool,
    pub ttest: Option<TTest>,
    pub fallback_events: usize,
}

pub struct TrainOutcome {
    pub params: Params<f32>,
    pub metrics: Vec<EpochMetrics>,
}

fn greedy_mean(params: &Params<f32>, k: usize, insts: &[Instance], graphs: &[SparseGraph]) -> Result<Vec<f64>> {
    crate::rollout::greedy_objectives(insts, graphs, &PolicyBundle::new(params, k))
}

/// Joint training of both policies. `on_epoch` sees every metrics line
/// (epoch 0 is the untrained model) with the current parameters. When a
/// non-finite loss or gradient appears, the parameters are written to
/// `diagnostic` (if given) and training aborts.
pub fn train(
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Params<f32>) -> Result<()>,
    diagnostic: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = cfg.model();
    let mut params = Params::<f32>::init(model, cfg.seed);
    let mut baseline_params = params.clone();
    let clip = (cfg.clip_norm > 0.0).then_some(cfg.clip_norm);
    let mut adam = Adam::new(&params, AdamConfig { lr: cfg.lr, clip_norm: clip, ..AdamConfig::default() });
    let mut exp_baseline = ExpBaseline::new(cfg.beta_exp);

    let (val_insts, val_graphs) = make_instances(cfg, cfg.val_size, &[u64::MAX, 0])?;
    let mut pool_generation = 0u64;
    let (mut pool_insts, mut pool_graphs) = make_instances(cfg, cfg.eval_pool_size, &[u64::MAX - 1, 0])?;
    let mut baseline_pool = greedy_mean(&baseline_params, cfg.k, &pool_insts, &pool_graphs)?;

    let val0 = mean(&greedy_mean(&params, cfg.k, &val_insts, &val_graphs)?);
    let mut metrics = vec![EpochMetrics {
        epoch: 0,
        lr: cfg.lr_at(1),
        mean_reward: None,
        mean_loss: None,
        mean_grad_norm: None,
        max_grad_norm: None,
        val_objective: val0,
        baseline_updated: false,
        ttest: None,
        fallback_events: 0,
    }];
    on_epoch(&metrics[0], &params)?;

    let abort = |params: &Params<f32>, epoch: usize, batch: usize| -> Error {
        if let Some(p) = diagnostic {
            let _ = checkpoint::save(p, params, cfg.k, cfg.gamma, serde_json::json!({"aborted_at": [epoch, batch]}));
        }
        Error::NonFiniteLoss { epoch, batch }
    };

    for epoch in 1..=cfg.epochs {
        adam.set_lr(cfg.lr_at(epoch));
        let (mut reward_sum, mut loss_sum, mut norm_sum, mut norm_max) = (0.0, 0.0, 0.0, 0.0f64);
        let mut fallbacks = 0;
        for batch in 0..cfg.batches_per_epoch {
            let tag = [epoch as u64, batch as u64];
            let (insts, graphs) = make_instances(cfg, cfg.batch_size, &tag)?;
            let seeds: Vec<RolloutSeed> = (0..cfg.batch_size)
                .map(|i| {
                    let s = derive_seed(cfg.seed, &[epoch as u64, batch as u64, i as u64, 1]);
                    let start = ChaCha8Rng::seed_from_u64(s).gen_range(0..insts[i].len());
                    RolloutSeed { start: StartRule::Fixed(start), rng: derive_seed(s, &[2]) }
                })
                .collect();
            let bundle = PolicyBundle::new(&params, cfg.k);
            let trajs = construct(&insts, &graphs, &bundle, DecodeMode::Train, &seeds)?;
            let rewards: Vec<f64> = trajs.iter().map(Trajectory::reward).collect();
            let batch_mean = mean(&rewards);
            let baselines: Vec<f64> = if epoch == 1 {
                vec![exp_baseline.update(batch_mean); rewards.len()]
            } else {
                let greedy_seeds: Vec<RolloutSeed> = seeds.iter().map(|s| RolloutSeed { start: s.start, rng: 0 }).collect();
                let bb = PolicyBundle::new(&baseline_params, cfg.k);
                construct(&insts, &graphs, &bb, DecodeMode::Greedy, &greedy_seeds)?.iter().map(Trajectory::reward).collect()
            };
            let (mut grads, loss) = reinforce_gradients(&params, &trajs, &baselines)?;
            if !loss.is_finite() || !batch_mean.is_finite() {
                return Err(abort(&params, epoch, batch));
            }
            let stats = match adam.step(&mut params, &mut grads) {
                Ok(s) => s,
                Err(Error::NanGuard(_)) => return Err(abort(&params, epoch, batch)),
                Err(e) => return Err(e),
            };
            reward_sum += batch_mean;
            loss_sum += loss;
            norm_sum += stats.grad_norm;
            norm_max = norm_max.max(stats.grad_norm);
            fallbacks += trajs.iter().map(|t| t.fallback_events).sum::<usize>();
        }

        let learner_pool = greedy_mean(&params, cfg.k, &pool_insts, &pool_graphs)?;
        let tt = paired_ttest(&learner_pool, &baseline_pool)?;
        let updated = tt.p < cfg.ttest_alpha;
        if updated {
            baseline_params = params.clone();
            pool_generation += 1;
            (pool_insts, pool_graphs) = make_instances(cfg, cfg.eval_pool_size, &[u64::MAX - 1, pool_generation])?;
            baseline_pool = greedy_mean(&baseline_params, cfg.k, &pool_insts, &pool_graphs)?;
        }
        let nb = cfg.batches_per_epoch as f64;
        let m = EpochMetrics {
            epoch,
            lr: cfg.lr_at(epoch),
            mean_reward: Some(reward_sum / nb),
            mean_loss: Some(loss_sum / nb),
            mean_grad_norm: Some(norm_sum / nb),
            max_grad_norm: Some(norm_max),
            val_objective: mean(&greedy_mean(&params, cfg.k, &val_insts, &val_graphs)?),
            baseline_updated: updated,
            ttest: Some(tt),
            fallback_events: fallbacks,
        };
        on_epoch(&m, &params)?;
        metrics.push(m);
    }
    Ok(TrainOutcome { params, metrics })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Outcome of a finite-difference check of the policy gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` (2-norm).
    pub worst_rel: f64,
    pub worst_tensor: String,
    /// Components whose central difference changed when the step shrank
    /// (a ReLU kink within the step); those use the smaller step.
    pub kinks: usize,
    pub components: usize,
}

/// Checks `∇(Σ log o + Σ log p)` of one sampled trajectory in f64 against
/// central differences of the replayed log-probabilities.
pub fn gradient_check(model: ModelConfig, n: usize, k: usize, seed: u64, with_reduction: bool, with_local: bool) -> Result<GradCheckReport> {
    const H: f64 = 1e-6;
    let params = Params::<f64>::init(model, seed);
    let cap = (model.kind == ProblemKind::Cvrp).then_some((n as f64 * 5.0 / 3.0).max(10.0));
    let inst = generate_uniform(model.kind, n, cap, derive_seed(seed, &[3]))?;
    let graph = build_sparse_graph(&inst, 0.1)?;
    let bundle = PolicyBundle::new(&params, k);
    let start = (seed as usize) % inst.len();
    let seeds = [RolloutSeed { start: StartRule::Fixed(start), rng: seed }];
    let traj = construct(std::slice::from_ref(&inst), std::slice::from_ref(&graph), &bundle, DecodeMode::Train, &seeds)?
        .pop()
        .unwrap();
    let start = traj.sequence[0];
    let mut grads = params.zeros_like();
    traj.backward(&params, 1.0, with_reduction, with_local, &mut grads)?;
    let objective = |p: &Params<f64>| -> Result<f64> {
        let (lo, lp) = replay_log_probs(p, &inst, &graph, start, &traj.decisions)?;
        Ok(if with_reduction { lo } else { 0.0 } + if with_local { lp } else { 0.0 })
    };
    let f0 = objective(&params)?;

    let mut report = GradCheckReport { worst_rel: 0.0, worst_tensor: String::new(), kinks: 0, components: 0 };
    let named: Vec<(String, Vec<f64>)> = grads.named().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    let mut probe = params.clone();
    for (ti, (name, analytic)) in named.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.named()[ti].1.data[i];
            let mut central = |h: f64| -> Result<(f64, f64, f64)> {
                probe.named_mut()[ti].1.data[i] = orig + h;
                let up = objective(&probe)?;
                probe.named_mut()[ti].1.data[i] = orig - h;
                let down = objective(&probe)?;
                probe.named_mut()[ti].1.data[i] = orig;
                Ok(((up - down) / (2.0 * h), (up - f0) / h, (f0 - down) / h))
            };
            let (c, right, left) = central(H)?;
            *slot = c;
            // One-sided slopes that disagree beyond curvature hint at a ReLU
            // switching inside the step; shrink it until estimates settle.
            if (right - left).abs() > 1e-6 * right.abs().max(left.abs()).max(1.0) {
                let agree = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()) + 1e-6;
                let (c2, _, _) = central(H / 10.0)?;
                if !agree(c, c2) {
                    report.kinks += 1;
                    let (c3, _, _) = central(H / 100.0)?;
                    *slot = if agree(c2, c3) { c2 } else { c3 };
                }
            }
        }
        report.components += analytic.len();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = norm(analytic).max(norm(&numeric));
        let rel = if scale < 1e-9 { 0.0 } else { diff / scale };
        if rel > report.worst_rel {
            report.worst_rel = rel;
            report.worst_tensor = name.clone();
        }
    }
    Ok(report)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_exact() {
        let c = TrainConfig::desk(ProblemKind::Tsp);
        assert_eq!(c.lr_at(1), c.lr);
        assert_eq!(c.lr_at(3), c.lr * 0.98 * 0.98);
    }

    #[test]
    fn exp_baseline_fixed_point() {
        let mut b = ExpBaseline::new(0.8);
        assert_eq!(b.update(-3.0), -3.0);
        for _ in 0..200 {
            b.update(-5.0);
        }
        assert!((b.value.unwrap() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn ttest_degenerate_cases() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(paired_ttest(&x, &x).unwrap().p, 1.0);
        let better = [0.5, 1.5, 2.5];
        assert_eq!(paired_ttest(&better, &x).unwrap().p, 0.0);
        assert_eq!(paired_ttest(&x, &better).unwrap().p, 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::desk(ProblemKind::Tsp);
        c.validate().unwrap();
        c.ttest_alpha = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(ProblemKind::Tsp);
        c.gamma = 1.0;
        assert!(matches!(c.validate(), Err(Error::InvalidGamma(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }
}
