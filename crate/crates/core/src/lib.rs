//! Trait-prediction toolkit: answer schema and metrics, verifiable rewards,
//! retrieval and metabolic-simulation tools, a tool-calling rollout
//! environment, group-relative policy optimization on a toy policy, and
//! trajectory distillation.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (f32 or f64); the
//! aliases below fix the precision used by the data-facing code.

pub mod distill;
pub mod embedstore;
pub mod env;
pub mod gem;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod scalar;
pub mod schema;

pub type Real = f64;
pub type Policy = policy::ToyPolicy<Real>;
pub type Policy32 = policy::ToyPolicy<f32>;
pub type LpProblem = gem::lp::LpProblem<Real>;
pub type LpSolution = gem::lp::LpSolution<Real>;
pub type LossOutput = grpo::LossOutput<Real>;
pub type TrainOutcome = grpo::train::TrainOutcome<Real>;
