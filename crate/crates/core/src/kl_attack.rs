//! Worst-case stealthy attack: KL-regularized bias synthesis by path integrals.
//!
//! The attacker maximizes `E[∫ c dt] − λ·D(P‖Q)` against a known, fixed
//! controller. The value and the optimal bias are exponentially tilted
//! averages over unbiased (`Q`) rollouts:
//!
//! ```text
//! V(x, t)   = λ log E_Q[exp(S / λ)]
//! θ*(x, t)  = 𝓗 · E_Q[exp(S / λ) h dw_t] / (dt · E_Q[exp(S / λ)]),   𝓗 = hᵀ (h hᵀ)⁺
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{run_receding, ClosedLoopRecord, Decision, DOMAIN_ROLLOUT};
use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, pinv};
use crate::sde::{
    rollout_batch, ControlAffineDynamics, CostModel, Policy, Record, RolloutOptions,
    Sampling, SeedSpec, TimeGrid, TrajectoryEnsemble, ZeroPolicy,
};
use crate::weights::{tilt, weighted_first_increment};

/// Pseudo-inverse cutoff relative to the largest singular value of `h hᵀ`.
pub const PINV_REL_TOL: f64 = 1e-10;

/// Below this ESS an estimate is flagged as degenerate.
pub const MIN_HEALTHY_ESS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub lambda: f64,
    pub rollouts_per_decision: usize,
    pub replan_every: usize,
    #[serde(default)]
    pub sampling: Sampling,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.rollouts_per_decision < 2 {
            return Err(Error::invalid("at least two rollouts per decision are needed"));
        }
        if self.replan_every == 0 {
            return Err(Error::invalid("replan_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasEstimate {
    /// θ̂* per unit time.
    pub theta: Vec<f64>,
    pub value: f64,
    pub effective_sample_size: f64,
    /// ESS below [`MIN_HEALTHY_ESS`].
    pub degenerate: bool,
    /// Numerical rank of `h hᵀ` at the query point.
    pub noise_rank: usize,
}

pub type AttackRecord = ClosedLoopRecord;

fn check_q(ens: &TrajectoryEnsemble) -> Result<()> {
    if !ens.measure.is_unbiased() {
        return Err(Error::invalid(format!(
            "attack estimators need an unbiased ensemble, got {:?}",
            ens.measure
        )));
    }
    if ens.len() < 2 {
        return Err(Error::invalid("at least two trajectories are needed"));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// `λ log (1/N) Σ exp(S_i / λ)`
pub fn estimate_value(ens: &TrajectoryEnsemble, lambda: f64) -> Result<f64> {
    check_q(ens)?;
    check_lambda(lambda)?;
    Ok(lambda * tilt(&ens.path_costs, 1.0 / lambda)?.log_mean)
}

/// `𝓗 = hᵀ (h hᵀ)⁺` and the rank of `h hᵀ`.
pub fn noise_projector(h: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let hht = h * h.transpose();
    let (p, rank) = pinv(&hht, PINV_REL_TOL);
    (h.transpose() * p, rank)
}

pub fn estimate_bias<D: ControlAffineDynamics + ?Sized>(
    ens: &TrajectoryEnsemble,
    lambda: f64,
    dynamics: &D,
    x: &[f64],
    t: f64,
) -> Result<BiasEstimate> {
    check_q(ens)?;
    check_lambda(lambda)?;
    let (w, tl) = weighted_first_increment(ens, 1.0 / lambda)?;
    let h = dynamics.noise_gain(t, x);
    let (proj, noise_rank) = noise_projector(&h);
    let hw = &h * nalgebra::DVector::from_vec(w);
    let theta = (&proj * hw).iter().copied().collect::<Vec<_>>();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationDiverged { trajectory: None, step: None, t });
    }
    Ok(BiasEstimate {
        theta,
        value: lambda * tl.log_mean,
        effective_sample_size: tl.ess,
        degenerate: tl.ess < MIN_HEALTHY_ESS,
        noise_rank,
    })
}

/// `½ Σ_k ‖θ_k‖² dt` for a `K × m` history.
pub fn kl_cost(bias_history: &[f64], noise_dim: usize, dt: f64) -> f64 {
    if noise_dim == 0 {
        return 0.0;
    }
    let sq: Vec<f64> = bias_history
        .chunks(noise_dim)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>())
        .collect();
    0.5 * pairwise_sum(&sq) * dt
}

/// Mean KL cost over a batch of realizations.
pub fn mean_kl_cost(records: &[AttackRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let v: Vec<f64> = records.iter().map(|r| r.kl_cost).collect();
    pairwise_sum(&v) / records.len() as f64
}

/// One attacked closed-loop realization. Every `replan_every` steps a fresh
/// `Q` ensemble is drawn from the current state under the fixed controller
/// and θ̂* is held until the next replan.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_attack<D, C, U>(
    dynamics: &D,
    cost: &C,
    grid: &TimeGrid,
    x0: &[f64],
    fixed_control: &U,
    config: &AttackConfig,
    seed: &SeedSpec,
) -> Result<AttackRecord>
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
    U: Policy + ?Sized,
{
    config.validate()?;
    let m = dynamics.noise_dim();
    let zero = ZeroPolicy(m);
    let options = RolloutOptions { sampling: config.sampling, record: Record::Summary };
    run_receding(
        dynamics,
        cost,
        grid,
        x0,
        fixed_control,
        config.replan_every,
        seed,
        |k, x| {
            let tail = grid.tail(k);
            let ens = rollout_batch(
                dynamics,
                cost,
                &tail,
                x,
                fixed_control,
                &zero,
                config.rollouts_per_decision,
                &seed.derive(DOMAIN_ROLLOUT, k as u64),
                options,
            )
            .map_err(|e| locate(e, k))?;
            let est = estimate_bias(&ens, config.lambda, dynamics, x, tail.t0)?;
            Ok(Decision { control: None, bias: est.theta, ess: Some(est.effective_sample_size) })
        },
    )
}

/// Rollout divergence inside a decision is reported at the decision step.
fn locate(e: Error, k: usize) -> Error {
    match e {
        Error::IntegrationDiverged { t, .. } => {
            Error::IntegrationDiverged { trajectory: None, step: Some(k), t }
        }
        other => other,
    }
}
