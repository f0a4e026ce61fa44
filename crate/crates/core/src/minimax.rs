//! Controller-side mitigation: gain certification and saddle-point policies
//! of the minimax KL game, estimated from uncontrolled (`Z`) rollouts.
//!
//! With `G = g R⁻¹ gᵀ` and `H = h hᵀ`, the structural assumptions are
//! `H = ξ G` for some `0 < ξ < λ` and `H = α (G − H / λ)` for some `α > 0`.
//! Then `α = γ = ξλ / (λ − ξ)` and
//!
//! ```text
//! V  = −α log E_Z[exp(−S / α)]
//! W  = E_Z[exp(−S / α) h dw_t] / (dt · E_Z[exp(−S / α)])
//! u* = R⁻¹ gᵀ (G − H / λ)⁺ W
//! θ* = −(1/λ) hᵀ (G − H / λ)⁺ W
//! ```

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closed_loop::{run_receding, ClosedLoopRecord, Decision, DOMAIN_ROLLOUT};
use crate::error::{Error, Result};
use crate::kl_attack::{MIN_HEALTHY_ESS, PINV_REL_TOL};
use crate::linalg::{frobenius_dot, max_abs, pinv};
use crate::sde::{
    rollout_batch, ControlAffineDynamics, CostModel, Measure, Record, RolloutOptions, Sampling,
    SeedSpec, TimeGrid, TrajectoryEnsemble, ZeroPolicy,
};
use crate::weights::{tilt, weighted_first_increment};

/// Residual gate relative to the largest `‖h hᵀ‖` over the sample points.
pub const RESIDUAL_REL_TOL: f64 = 1e-8;

/// Tolerance of the `α = γ` identity, relative to `max(1, γ)`.
pub const IDENTITY_TOL: f64 = 1e-9;

/// A `(t, x)` point at which the assumptions are checked.
pub type SamplePoint = (f64, Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCertificate {
    pub lambda: f64,
    pub xi: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub residual_xi: f64,
    pub residual_alpha: f64,
    pub valid: bool,
    /// Why the certificate is invalid; empty when valid.
    pub failures: Vec<String>,
}

impl GainCertificate {
    /// `key=value` lines.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "xi={}", self.xi);
        let _ = writeln!(s, "gamma={}", self.gamma);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "alpha_minus_gamma={}", self.alpha - self.gamma);
        let _ = writeln!(s, "residual_xi={}", self.residual_xi);
        let _ = writeln!(s, "residual_alpha={}", self.residual_alpha);
        let _ = writeln!(s, "valid={}", self.valid);
        for f in &self.failures {
            let _ = writeln!(s, "failure={f}");
        }
        s
    }

    pub fn require_valid(&self) -> Result<()> {
        if self.valid {
            return Ok(());
        }
        Err(Error::AssumptionViolated {
            assumption: "gain certificate",
            detail: self.failures.join("; "),
            worst_point: None,
            residual: self.residual_xi.max(self.residual_alpha),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddlePointEstimate {
    pub u_star: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub value: f64,
    pub effective_sample_size: f64,
    pub degenerate: bool,
    /// Numerical rank of `G − H / λ`.
    pub bracket_rank: usize,
}

fn control_inverse(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    r.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::invalid("control weight R is not positive definite"))
}

struct PointMatrices {
    t: f64,
    x: Vec<f64>,
    g_mat: DMatrix<f64>,
    h_mat: DMatrix<f64>,
}

fn point_matrices<D, C>(dynamics: &D, cost: &C, points: &[SamplePoint]) -> Result<Vec<PointMatrices>>
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
{
    if points.is_empty() {
        return Err(Error::invalid("no sample points"));
    }
    points
        .iter()
        .map(|(t, x)| {
            let g = dynamics.control_gain(*t, x);
            let h = dynamics.noise_gain(*t, x);
            let rinv = control_inverse(&cost.control_weight(*t, x))?;
            Ok(PointMatrices {
                t: *t,
                x: x.clone(),
                g_mat: &g * rinv * g.transpose(),
                h_mat: &h * h.transpose(),
            })
        })
        .collect()
}

/// Scalar least-squares fit `lhs_i ≈ c · rhs_i`. Returns `c`, the max-norm
/// residual, the index of the worst point and the residual tolerance.
fn scalar_fit(
    mats: &[PointMatrices],
    lhs: impl Fn(&PointMatrices) -> DMatrix<f64>,
    rhs: impl Fn(&PointMatrices) -> DMatrix<f64>,
) -> (f64, f64, usize, f64) {
    let (mut num, mut den) = (0.0, 0.0);
    for p in mats {
        let (a, b) = (lhs(p), rhs(p));
        num += frobenius_dot(&a, &b);
        den += frobenius_dot(&b, &b);
    }
    let c = if den > 0.0 { num / den } else { f64::NAN };
    let mut worst = (0.0, 0);
    let mut scale: f64 = 0.0;
    for (i, p) in mats.iter().enumerate() {
        let r = if c.is_finite() { max_abs(&(lhs(p) - rhs(p) * c)) } else { f64::INFINITY };
        if r > worst.0 || i == 0 {
            worst = (r, i);
        }
        scale = scale.max(max_abs(&p.h_mat));
    }
    (c, worst.0, worst.1, RESIDUAL_REL_TOL * scale.max(f64::MIN_POSITIVE))
}

fn violation(assumption: &'static str, detail: String, p: &PointMatrices, residual: f64) -> Error {
    Error::AssumptionViolated {
        assumption,
        detail,
        worst_point: Some((p.t, p.x.clone())),
        residual,
    }
}

/// Fits `h hᵀ = ξ g R⁻¹ gᵀ` over the sample points. Returns `(ξ, residual)`.
pub fn solve_xi<D, C>(dynamics: &D, cost: &C, points: &[SamplePoint], lambda: f64) -> Result<(f64, f64)>
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
{
    let mats = point_matrices(dynamics, cost, points)?;
    let (xi, res, worst, tol) = scalar_fit(&mats, |p| p.h_mat.clone(), |p| p.g_mat.clone());
    if !(res <= tol) {
        return Err(violation(
            "noise/control proportionality",
            format!("no scalar xi fits h h^T = xi g R^-1 g^T (residual {res:e} > {tol:e})"),
            &mats[worst],
            res,
        ));
    }
    if !(xi > 0.0 && xi < lambda) {
        return Err(violation(
            "noise/control proportionality",
            format!("xi = {xi} is outside (0, lambda = {lambda})"),
            &mats[worst],
            res,
        ));
    }
    Ok((xi, res))
}

/// `γ = ξλ / (λ − ξ)`
pub fn gamma_from_xi(xi: f64, lambda: f64) -> Result<f64> {
    if !(xi > 0.0 && xi < lambda && lambda.is_finite()) {
        return Err(Error::invalid(format!("need 0 < xi < lambda, got xi = {xi}, lambda = {lambda}")));
    }
    Ok(xi * lambda / (lambda - xi))
}

/// Fits `h hᵀ = α (g R⁻¹ gᵀ − h hᵀ / λ)`. Returns `(α, residual)`.
pub fn solve_alpha<D, C>(
    dynamics: &D,
    cost: &C,
    points: &[SamplePoint],
    lambda: f64,
) -> Result<(f64, f64)>
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
{
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let mats = point_matrices(dynamics, cost, points)?;
    let (alpha, res, worst, tol) =
        scalar_fit(&mats, |p| p.h_mat.clone(), |p| &p.g_mat - &p.h_mat / lambda);
    if !(res <= tol) {
        return Err(violation(
            "risk-sensitive proportionality",
            format!("no scalar alpha fits h h^T = alpha (g R^-1 g^T - h h^T / lambda) (residual {res:e} > {tol:e})"),
            &mats[worst],
            res,
        ));
    }
    if !(alpha > 0.0) {
        return Err(violation(
            "risk-sensitive proportionality",
            format!("alpha = {alpha} is not positive"),
            &mats[worst],
            res,
        ));
    }
    Ok((alpha, res))
}

/// Certifies `(ξ, γ, α)` at `lambda`. Never fails; problems are recorded in
/// the certificate.
pub fn certify<D, C>(dynamics: &D, cost: &C, points: &[SamplePoint], lambda: f64) -> GainCertificate
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
{
    certify_with(dynamics, cost, points, lambda, gamma_from_xi)
}

/// [`certify`] with a replaceable `γ(ξ, λ)`, used to check that the identity
/// test catches a wrong formula.
pub fn certify_with<D, C>(
    dynamics: &D,
    cost: &C,
    points: &[SamplePoint],
    lambda: f64,
    gamma_fn: impl Fn(f64, f64) -> Result<f64>,
) -> GainCertificate
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
{
    let mut cert = GainCertificate {
        lambda,
        xi: f64::NAN,
        gamma: f64::NAN,
        alpha: f64::NAN,
        residual_xi: f64::NAN,
        residual_alpha: f64::NAN,
        valid: false,
        failures: Vec::new(),
    };
    match solve_xi(dynamics, cost, points, lambda) {
        Ok((xi, r)) => {
            cert.xi = xi;
            cert.residual_xi = r;
            match gamma_fn(xi, lambda) {
                Ok(g) => cert.gamma = g,
                Err(e) => cert.failures.push(e.to_string()),
            }
        }
        Err(e) => {
            if let Error::AssumptionViolated { residual, .. } = &e {
                cert.residual_xi = *residual;
            }
            cert.failures.push(describe(&e));
        }
    }
    match solve_alpha(dynamics, cost, points, lambda) {
        Ok((a, r)) => {
            cert.alpha = a;
            cert.residual_alpha = r;
        }
        Err(e) => {
            if let Error::AssumptionViolated { residual, .. } = &e {
                cert.residual_alpha = *residual;
            }
            cert.failures.push(describe(&e));
        }
    }
    if cert.failures.is_empty() {
        let gap = (cert.alpha - cert.gamma).abs();
        let tol = IDENTITY_TOL * cert.gamma.abs().max(1.0);
        if !(gap <= tol) && cert.gamma.is_finite() {
            cert.failures.push(format!("alpha = {} differs from gamma = {} by {gap:e}", cert.alpha, cert.gamma));
        } else if !cert.gamma.is_finite() || !(cert.gamma > 0.0) {
            cert.failures.push(format!("gamma = {} is not positive", cert.gamma));
        }
    }
    cert.valid = cert.failures.is_empty();
    cert
}

fn describe(e: &Error) -> String {
    match e {
        Error::AssumptionViolated { detail, worst_point: Some((t, x)), .. } => {
            format!("{detail}; worst point t = {t}, x = {x:?}")
        }
        other => other.to_string(),
    }
}

fn check_z(ens: &TrajectoryEnsemble) -> Result<()> {
    if ens.measure != Measure::Z {
        return Err(Error::invalid(format!(
            "game estimators need an uncontrolled, unbiased ensemble, got {:?}",
            ens.measure
        )));
    }
    if ens.len() < 2 {
        return Err(Error::invalid("at least two trajectories are needed"));
    }
    Ok(())
}

/// `−α log (1/N) Σ exp(−S_i / α)`
pub fn estimate_game_value(ens: &TrajectoryEnsemble, alpha: f64) -> Result<f64> {
    check_z(ens)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(-alpha * tilt(&ens.path_costs, -1.0 / alpha)?.log_mean)
}

/// The risk-sensitive value at `γ`; the same estimator as the game value.
pub fn estimate_risk_sensitive_value(ens: &TrajectoryEnsemble, gamma: f64) -> Result<f64> {
    estimate_game_value(ens, gamma)
}

/// `u*` and `θ*` at `(t, x)` from one `Z` ensemble rooted there.
pub fn estimate_saddle_point<D, C>(
    ens: &TrajectoryEnsemble,
    cert: &GainCertificate,
    dynamics: &D,
    cost: &C,
    x: &[f64],
    t: f64,
) -> Result<SaddlePointEstimate>
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
{
    check_z(ens)?;
    cert.require_valid()?;
    let (w, tl) = weighted_first_increment(ens, -1.0 / cert.alpha)?;
    let g = dynamics.control_gain(t, x);
    let h = dynamics.noise_gain(t, x);
    let rinv = control_inverse(&cost.control_weight(t, x))?;
    let gain_u = &rinv * g.transpose();
    let bracket = &g * &gain_u - &h * h.transpose() / cert.lambda;
    let (bp, bracket_rank) = pinv(&bracket, PINV_REL_TOL);
    let hw = &bp * (&h * DVector::from_vec(w));
    let u_star: Vec<f64> = (&gain_u * &hw).iter().copied().collect();
    let theta_star: Vec<f64> = (h.transpose() * &hw * (-1.0 / cert.lambda)).iter().copied().collect();
    if u_star.iter().chain(&theta_star).any(|v| !v.is_finite()) {
        return Err(Error::IntegrationDiverged { trajectory: None, step: None, t });
    }
    Ok(SaddlePointEstimate {
        u_star,
        theta_star,
        value: -cert.alpha * tl.log_mean,
        effective_sample_size: tl.ess,
        degenerate: tl.ess < MIN_HEALTHY_ESS,
        bracket_rank,
    })
}

/// Which players apply their estimated policy; the other plays zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameMode {
    BothPlay,
    ControllerOnly,
    AttackerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub rollouts_per_decision: usize,
    pub replan_every: usize,
    #[serde(default)]
    pub sampling: Sampling,
}

/// One receding-horizon realization of the game. At each replan a `Z`
/// ensemble is drawn from the current state and `(u*, θ*)` are held until
/// the next replan.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop_game<D, C>(
    dynamics: &D,
    cost: &C,
    grid: &TimeGrid,
    x0: &[f64],
    cert: &GainCertificate,
    config: &GameConfig,
    seed: &SeedSpec,
    mode: GameMode,
) -> Result<ClosedLoopRecord>
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
{
    cert.require_valid()?;
    if config.rollouts_per_decision < 2 || config.replan_every == 0 {
        return Err(Error::invalid("need at least two rollouts and replan_every >= 1"));
    }
    let (l, m) = (dynamics.control_dim(), dynamics.noise_dim());
    let options = RolloutOptions { sampling: config.sampling, record: Record::Summary };
    run_receding(dynamics, cost, grid, x0, &ZeroPolicy(l), config.replan_every, seed, |k, x| {
        let tail = grid.tail(k);
        let ens = rollout_batch(
            dynamics,
            cost,
            &tail,
            x,
            &ZeroPolicy(l),
            &ZeroPolicy(m),
            config.rollouts_per_decision,
            &seed.derive(DOMAIN_ROLLOUT, k as u64),
            options,
        )?;
        let sp = estimate_saddle_point(&ens, cert, dynamics, cost, x, tail.t0)?;
        let (u, th) = match mode {
            GameMode::BothPlay => (sp.u_star, sp.theta_star),
            GameMode::ControllerOnly => (sp.u_star, vec![0.0; m]),
            GameMode::AttackerOnly => (vec![0.0; l], sp.theta_star),
        };
        Ok(Decision { control: Some(u), bias: th, ess: Some(sp.effective_sample_size) })
    })
}
