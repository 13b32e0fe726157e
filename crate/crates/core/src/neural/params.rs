use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor2};
use crate::instances::ProblemKind;

/// Architecture of both policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ProblemKind,
    /// Embedding width.
    pub d: usize,
    /// Hidden width of the feed-forward sub-layers.
    pub d_ff: usize,
    /// Attention layers in the local model.
    pub layers: usize,
    /// Logit clipping range `ξ`.
    pub xi: f64,
    /// Adaptation bias in the reduction scorer.
    pub reduction_bias: bool,
    /// Adaptation bias in the local model (layers and head).
    pub local_bias: bool,
}

impl ModelConfig {
    /// Full-size architecture: d = 128, d_ff = 512, 6 layers, ξ = 10.
    pub fn full(kind: ProblemKind) -> Self {
        Self { kind, d: 128, d_ff: 512, layers: 6, xi: 10.0, reduction_bias: true, local_bias: true }
    }

    /// Desk-scale architecture used for CI training: d = 64, 3 layers.
    pub fn desk(kind: ProblemKind) -> Self {
        Self { d: 64, d_ff: 256, layers: 3, ..Self::full(kind) }
    }

    /// Node feature width of the reduction embedding.
    pub fn reduction_inputs(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => 2,
            ProblemKind::Cvrp => 3,
        }
    }

    /// Input width of `W_last` in the reduction context.
    pub fn context_inputs(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => self.d,
            ProblemKind::Cvrp => self.d + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionParams<T> {
    pub w_embed: Tensor2<T>,
    pub b_embed: Tensor2<T>,
    pub w_first: Tensor2<T>,
    pub w_last: Tensor2<T>,
    pub w_key: Tensor2<T>,
    pub w_value: Tensor2<T>,
    pub alpha: Tensor2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub w_query: Tensor2<T>,
    pub w_key: Tensor2<T>,
    pub w_value: Tensor2<T>,
    pub ln1_gain: Tensor2<T>,
    pub ln1_bias: Tensor2<T>,
    pub ff_w1: Tensor2<T>,
    pub ff_b1: Tensor2<T>,
    pub ff_w2: Tensor2<T>,
    pub ff_b2: Tensor2<T>,
    pub ln2_gain: Tensor2<T>,
    pub ln2_bias: Tensor2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalParams<T> {
    pub w_embed: Tensor2<T>,
    pub b_embed: Tensor2<T>,
    /// Applied to the first node's embedding.
    pub w_first: Tensor2<T>,
    /// Applied to the last node's embedding.
    pub w_last: Tensor2<T>,
    pub w_demand: Tensor2<T>,
    pub w_load: Tensor2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub alpha: Tensor2<T>,
}

/// All learnable weights of both policies.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub reduction: ReductionParams<T>,
    pub local: LocalParams<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<T: Real>(&mut self, rows: usize, cols: usize, fan_in: usize) -> Tensor2<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| T::of(self.rng.gen_range(-bound..=bound))).collect();
        Tensor2 { rows, cols, data }
    }
}

impl<T: Real> Params<T> {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` weights, unit LN gains, zero LN
    /// biases and both adaptation scalars at 1.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut r = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let d = config.d;
        let dx = config.reduction_inputs();
        let reduction = ReductionParams {
            w_embed: r.uniform(dx, d, dx),
            b_embed: r.uniform(1, d, dx),
            w_first: r.uniform(d, d, d),
            w_last: r.uniform(config.context_inputs(), d, config.context_inputs()),
            w_key: r.uniform(d, d, d),
            w_value: r.uniform(d, d, d),
            alpha: Tensor2::filled(1, 1, T::one()),
        };
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_query: r.uniform(d, d, d),
                w_key: r.uniform(d, d, d),
                w_value: r.uniform(d, d, d),
                ln1_gain: Tensor2::filled(1, d, T::one()),
                ln1_bias: Tensor2::zeros(1, d),
                ff_w1: r.uniform(d, config.d_ff, d),
                ff_b1: r.uniform(1, config.d_ff, d),
                ff_w2: r.uniform(config.d_ff, d, config.d_ff),
                ff_b2: r.uniform(1, d, config.d_ff),
                ln2_gain: Tensor2::filled(1, d, T::one()),
                ln2_bias: Tensor2::zeros(1, d),
            })
            .collect();
        let local = LocalParams {
            w_embed: r.uniform(2, d, 2),
            b_embed: r.uniform(1, d, 2),
            w_first: r.uniform(d, d, d),
            w_last: r.uniform(d, d, d),
            w_demand: r.uniform(1, d, 1),
            w_load: r.uniform(1, d, 1),
            layers,
            alpha: Tensor2::filled(1, 1, T::one()),
        };
        Self { config, reduction, local }
    }

    /// Same shapes, every entry zero (a gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill_zero());
        z
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let mut out = Params::<U>::init(self.config, 0);
        let src = self.named();
        for ((_, dst), (_, s)) in out.named_mut().into_iter().zip(src) {
            *dst = s.cast();
        }
        out
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor2<T>)> {
        let r = &self.reduction;
        let mut v: Vec<(String, &Tensor2<T>)> = vec![
            ("reduction.w_embed".into(), &r.w_embed),
            ("reduction.b_embed".into(), &r.b_embed),
            ("reduction.w_first".into(), &r.w_first),
            ("reduction.w_last".into(), &r.w_last),
            ("reduction.w_key".into(), &r.w_key),
            ("reduction.w_value".into(), &r.w_value),
            ("reduction.alpha".into(), &r.alpha),
        ];
        let l = &self.local;
        v.extend([
            ("local.w_embed".into(), &l.w_embed),
            ("local.b_embed".into(), &l.b_embed),
            ("local.w_first".into(), &l.w_first),
            ("local.w_last".into(), &l.w_last),
            ("local.w_demand".into(), &l.w_demand),
            ("local.w_load".into(), &l.w_load),
        ]);
        for (i, layer) in l.layers.iter().enumerate() {
            v.extend([
                (format!("local.layer{i}.w_query"), &layer.w_query),
                (format!("local.layer{i}.w_key"), &layer.w_key),
                (format!("local.layer{i}.w_value"), &layer.w_value),
                (format!("local.layer{i}.ln1_gain"), &layer.ln1_gain),
                (format!("local.layer{i}.ln1_bias"), &layer.ln1_bias),
                (format!("local.layer{i}.ff_w1"), &layer.ff_w1),
                (format!("local.layer{i}.ff_b1"), &layer.ff_b1),
                (format!("local.layer{i}.ff_w2"), &layer.ff_w2),
                (format!("local.layer{i}.ff_b2"), &layer.ff_b2),
                (format!("local.layer{i}.ln2_gain"), &layer.ln2_gain),
                (format!("local.layer{i}.ln2_bias"), &layer.ln2_bias),
            ]);
        }
        v.push(("local.alpha".into(), &l.alpha));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor2<T>)> {
        let r = &mut self.reduction;
        let mut v: Vec<(String, &mut Tensor2<T>)> = vec![
            ("reduction.w_embed".into(), &mut r.w_embed),
            ("reduction.b_embed".into(), &mut r.b_embed),
            ("reduction.w_first".into(), &mut r.w_first),
            ("reduction.w_last".into(), &mut r.w_last),
            ("reduction.w_key".into(), &mut r.w_key),
            ("reduction.w_value".into(), &mut r.w_value),
            ("reduction.alpha".into(), &mut r.alpha),
        ];
        let l = &mut self.local;
        v.extend([
            ("local.w_embed".into(), &mut l.w_embed),
            ("local.b_embed".into(), &mut l.b_embed),
            ("local.w_first".into(), &mut l.w_first),
            ("local.w_last".into(), &mut l.w_last),
            ("local.w_demand".into(), &mut l.w_demand),
            ("local.w_load".into(), &mut l.w_load),
        ]);
        for (i, layer) in l.layers.iter_mut().enumerate() {
            v.extend([
                (format!("local.layer{i}.w_query"), &mut layer.w_query),
                (format!("local.layer{i}.w_key"), &mut layer.w_key),
                (format!("local.layer{i}.w_value"), &mut layer.w_value),
                (format!("local.layer{i}.ln1_gain"), &mut layer.ln1_gain),
                (format!("local.layer{i}.ln1_bias"), &mut layer.ln1_bias),
                (format!("local.layer{i}.ff_w1"), &mut layer.ff_w1),
                (format!("local.layer{i}.ff_b1"), &mut layer.ff_b1),
                (format!("local.layer{i}.ff_w2"), &mut layer.ff_w2),
                (format!("local.layer{i}.ff_b2"), &mut layer.ff_b2),
                (format!("local.layer{i}.ln2_gain"), &mut layer.ln2_gain),
                (format!("local.layer{i}.ln2_bias"), &mut layer.ln2_bias),
            ]);
        }
        v.push(("local.alpha".into(), &mut l.alpha));
        v
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor2<T>)) {
        for (name, t) in self.named_mut() {
            f(&name, t);
        }
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.for_each_mut(|_, t| t.scale(s));
    }

    pub fn global_norm(&self) -> T {
        self.named().iter().map(|(_, t)| t.sum_sq()).sum::<T>().sqrt()
    }

    /// Flattened copy of all values, in [`Params::named`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.named().into_iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }
}
