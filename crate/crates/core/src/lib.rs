//! Stealthy attack synthesis and minimax mitigation for control-affine
//! stochastic systems, by path-integral Monte Carlo.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_loop;
pub mod error;
pub mod kl_attack;
pub mod linalg;
pub mod minimax;
pub mod scenarios;
pub mod sde;
pub mod stealth;
pub mod validation;
pub mod weights;

pub use closed_loop::ClosedLoopRecord;
pub use error::{Error, Result};
pub use kl_attack::{AttackConfig, AttackRecord, BiasEstimate};
pub use minimax::{GainCertificate, GameConfig, GameMode, SaddlePointEstimate};
pub use scenarios::{CruiseScenario, Scenario, UnicycleScenario};
pub use stealth::{DetectionPoint, DetectorSpec};
pub use sde::{
    em_step, rollout_batch, ControlAffineDynamics, CostModel, Measure, Policy, Record,
    RolloutOptions, Sampling, SeedSpec, TimeGrid, TrajectoryEnsemble,
};
