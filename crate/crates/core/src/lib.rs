//! Learned search-space reduction for constructive routing.
//!
//! The pipeline has three stages: a one-time static pruning of the complete
//! graph ([`graph`]), a lightweight learned scorer that keeps the top-k
//! feasible nodes at every construction step ([`reduction`]), and a deeper
//! attention-free policy that picks the next node from that candidate set
//! ([`local`]). Both policies are trained jointly with REINFORCE
//! ([`training`]) and a destroy-and-repair loop ([`prc`]) can refine the
//! constructed solutions afterwards. [`evaluation`] holds exact oracles and
//! the metrics used to judge all of it.

pub mod error;
pub mod evaluation;
pub mod graph;
pub mod instances;
pub mod local;
pub mod neural;
pub mod prc;
pub mod reduction;
pub mod rollout;
pub mod training;

pub use error::{Error, Result};
pub use graph::SparseGraph;
pub use instances::{Instance, ProblemKind, RoutePlan, Tour};
pub use neural::{ModelConfig, Params, Real};
pub use rollout::{DecodeMode, PolicyBundle, ReducerKind, Solution};
