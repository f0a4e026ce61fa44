//! Self-checks against independent oracles: closed forms, a finite-difference
//! Feynman–Kac solve, gain identities and incomplete-gamma identities.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kl_attack::{estimate_bias, estimate_value};
use crate::minimax::{certify, certify_with, estimate_game_value, estimate_saddle_point, gamma_from_xi};
use crate::scenarios::{analytic_1d_suite, CruiseScenario, Scenario, UnicycleScenario};
use crate::sde::{
    rollout_batch, CostModel, RolloutOptions, ScalarLinearDynamics, SeedSpec, TimeGrid,
    TrajectoryEnsemble, ZeroPolicy,
};
use crate::stealth::regularized_gamma;

/// `dx = a x dt + h dw` with running cost `c₀ + c₁ x + c₂ x²` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diffusion1d {
    pub drift_coef: f64,
    pub noise_gain: f64,
    pub cost: [f64; 3],
    pub horizon: f64,
}

impl Diffusion1d {
    pub fn dynamics(&self) -> ScalarLinearDynamics {
        ScalarLinearDynamics { drift_coef: self.drift_coef, control_gain: 0.0, noise_gain: self.noise_gain }
    }

    fn ell(&self, x: f64) -> f64 {
        self.cost[0] + self.cost[1] * x + self.cost[2] * x * x
    }
}

impl CostModel for Diffusion1d {
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn state_cost(&self, _t: f64, x: &[f64]) -> f64 {
        self.ell(x[0])
    }
    fn control_weight(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }
}

/// The default Feynman–Kac test problem: an Ornstein–Uhlenbeck state with a
/// quadratic cost.
pub fn fk_problem() -> Diffusion1d {
    Diffusion1d { drift_coef: -1.0, noise_gain: 1.0, cost: [1.0, 0.0, 0.5], horizon: 1.0 }
}

/// `Φ(0, x) = E exp(κ ∫₀ᵀ ℓ(x_s) ds)` on a uniform grid.
#[derive(Debug, Clone)]
pub struct FkSolution {
    pub x_min: f64,
    pub dx: f64,
    pub phi: Vec<f64>,
}

impl FkSolution {
    /// Linear interpolation of `Φ`.
    pub fn phi_at(&self, x: f64) -> Result<f64> {
        let s = (x - self.x_min) / self.dx;
        if !(s >= 0.0 && s <= (self.phi.len() - 1) as f64) {
            return Err(Error::invalid(format!("x = {x} is outside the solved domain")));
        }
        let i = (s.floor() as usize).min(self.phi.len() - 2);
        let w = s - i as f64;
        Ok((1.0 - w) * self.phi[i] + w * self.phi[i + 1])
    }

    /// `λ log Φ` for `κ = 1/λ`.
    pub fn attack_value(&self, x: f64, lambda: f64) -> Result<f64> {
        Ok(lambda * self.phi_at(x)?.ln())
    }

    /// `−α log Φ` for `κ = −1/α`.
    pub fn game_value(&self, x: f64, alpha: f64) -> Result<f64> {
        Ok(-alpha * self.phi_at(x)?.ln())
    }
}

/// Explicit finite differences for the backward equation
/// `∂ₜΦ + a x ∂ₓΦ + ½h² ∂ₓₓΦ + κ ℓ Φ = 0`, `Φ(T) = 1`, on `[−x_max, x_max]`
/// with linear extrapolation at both ends.
pub fn solve_fk(p: &Diffusion1d, kappa: f64, x_max: f64, cells: usize) -> Result<FkSolution> {
    if cells < 4 || !(x_max > 0.0) || !(p.noise_gain > 0.0) || !(p.horizon > 0.0) {
        return Err(Error::invalid("finite-difference grid or problem is degenerate"));
    }
    let dx = 2.0 * x_max / cells as f64;
    let diff = 0.5 * p.noise_gain * p.noise_gain;
    let xs: Vec<f64> = (0..=cells).map(|i| -x_max + i as f64 * dx).collect();
    let max_drift = (p.drift_coef * x_max).abs();
    let max_pot = xs.iter().map(|&x| (kappa * p.ell(x)).abs()).fold(0.0, f64::max);
    let stable = 1.0 / (2.0 * diff / (dx * dx) + max_drift / dx + max_pot);
    let steps = (p.horizon / (0.5 * stable)).ceil() as usize;
    let dt = p.horizon / steps as f64;

    let mut phi = vec![1.0; cells + 1];
    let mut next = phi.clone();
    for _ in 0..steps {
        for i in 1..cells {
            let x = xs[i];
            let d1 = (phi[i + 1] - phi[i - 1]) / (2.0 * dx);
            let d2 = (phi[i + 1] - 2.0 * phi[i] + phi[i - 1]) / (dx * dx);
            next[i] = phi[i] + dt * (p.drift_coef * x * d1 + diff * d2 + kappa * p.ell(x) * phi[i]);
        }
        next[0] = 2.0 * next[1] - next[2];
        next[cells] = 2.0 * next[cells - 1] - next[cells - 2];
        std::mem::swap(&mut phi, &mut next);
    }
    if phi.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::IntegrationDiverged { trajectory: None, step: None, t: 0.0 });
    }
    Ok(FkSolution { x_min: -x_max, dx, phi })
}

/// `n` cell midpoints of `[lo, hi]`.
pub fn query_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    /// Absolute when `relative` is false.
    pub tolerance: f64,
    pub relative: bool,
    pub passed: bool,
}

impl Check {
    pub fn absolute(name: impl Into<String>, measured: f64, expected: f64, tolerance: f64) -> Self {
        let passed = (measured - expected).abs() <= tolerance;
        Self { name: name.into(), measured, expected, tolerance, relative: false, passed }
    }

    pub fn relative(name: impl Into<String>, measured: f64, expected: f64, tolerance: f64) -> Self {
        let passed = (measured - expected).abs() <= tolerance * expected.abs();
        Self { name: name.into(), measured, expected, tolerance, relative: true, passed }
    }

    fn flag(name: impl Into<String>, ok: bool) -> Self {
        let v = if ok { 1.0 } else { 0.0 };
        Self { name: name.into(), measured: v, expected: 1.0, tolerance: 0.0, relative: false, passed: ok }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One `PASS`/`FAIL` line per check.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let kind = if c.relative { "rel" } else { "abs" };
            let _ = writeln!(
                s,
                "{} {}: measured={} expected={} tol={}({kind})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.expected,
                c.tolerance
            );
        }
        s
    }
}

pub type GammaFn = fn(f64, f64) -> Result<f64>;

#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    /// Rollouts for the analytic benchmarks.
    pub rollouts: usize,
    pub dt: f64,
    /// Rollouts per Feynman–Kac query point.
    pub fk_rollouts: usize,
    pub fk_dt: f64,
    pub seed: SeedSpec,
    /// `γ(ξ, λ)` used by the identity checks.
    pub gamma_fn: GammaFn,
}

impl ValidationOptions {
    pub fn full(seed: SeedSpec) -> Self {
        Self { rollouts: 100_000, dt: 1e-3, fk_rollouts: 20_000, fk_dt: 2e-3, seed, gamma_fn: gamma_from_xi }
    }

    pub fn quick(seed: SeedSpec) -> Self {
        Self { rollouts: 20_000, dt: 1e-2, fk_rollouts: 5_000, fk_dt: 1e-2, ..Self::full(seed) }
    }
}

fn z_ensemble<C: CostModel>(
    dynamics: &ScalarLinearDynamics,
    cost: &C,
    x: f64,
    count: usize,
    dt: f64,
    seed: &SeedSpec,
) -> Result<TrajectoryEnsemble> {
    let grid = TimeGrid::new(0.0, cost.horizon(), dt)?;
    rollout_batch(dynamics, cost, &grid, &[x], &ZeroPolicy(1), &ZeroPolicy(1), count, seed, RolloutOptions::default())
}

/// Monte Carlo estimators on the analytic suite.
pub fn check_analytic(opts: &ValidationOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (i, b) in analytic_1d_suite().into_iter().enumerate() {
        let p = b.problem;
        let dynamics = p.dynamics();
        let ens = z_ensemble(&dynamics, &p, b.x, opts.rollouts, opts.dt, &opts.seed.derive(0xA0, i as u64))?;
        match (b.alpha, b.u) {
            (Some(alpha), Some(u)) => {
                let cert = certify(&dynamics, &p, &p.sample_points(), b.lambda);
                cert.require_valid()?;
                out.push(Check::relative(format!("{}: value", b.name), estimate_game_value(&ens, alpha)?, b.value, 0.02));
                let sp = estimate_saddle_point(&ens, &cert, &dynamics, &p, &[b.x], b.t)?;
                out.push(Check::relative(format!("{}: u*", b.name), sp.u_star[0], u, 0.05));
                out.push(Check::relative(format!("{}: theta*", b.name), sp.theta_star[0], b.theta, 0.05));
            }
            _ => {
                out.push(Check::relative(format!("{}: value", b.name), estimate_value(&ens, b.lambda)?, b.value, 0.02));
                let est = estimate_bias(&ens, b.lambda, &dynamics, &[b.x], b.t)?;
                if b.theta == 0.0 {
                    let se = 3.0 / (opts.rollouts as f64 * opts.dt).sqrt();
                    out.push(Check::absolute(format!("{}: theta*", b.name), est.theta[0], 0.0, se));
                } else {
                    out.push(Check::relative(format!("{}: theta*", b.name), est.theta[0], b.theta, 0.05));
                }
            }
        }
    }
    Ok(out)
}

/// Monte Carlo values against the finite-difference solution at ten points in
/// `[−1.5, 1.5]`, for the attack (`λ = 1`) and game (`α = 1`) signs.
pub fn check_feynman_kac(opts: &ValidationOptions) -> Result<Vec<Check>> {
    let p = fk_problem();
    let dynamics = p.dynamics();
    let (lambda, alpha) = (1.0, 1.0);
    let attack = solve_fk(&p, 1.0 / lambda, 6.0, 600)?;
    let game = solve_fk(&p, -1.0 / alpha, 6.0, 600)?;
    let mut out = Vec::new();
    for (i, x) in query_points(-1.5, 1.5, 10).into_iter().enumerate() {
        let ens = z_ensemble(&dynamics, &p, x, opts.fk_rollouts, opts.fk_dt, &opts.seed.derive(0xF0, i as u64))?;
        out.push(Check::relative(
            format!("feynman-kac attack value at x={x:.2}"),
            estimate_value(&ens, lambda)?,
            attack.attack_value(x, lambda)?,
            0.02,
        ));
        out.push(Check::relative(
            format!("feynman-kac game value at x={x:.2}"),
            estimate_game_value(&ens, alpha)?,
            game.game_value(x, alpha)?,
            0.02,
        ));
    }
    Ok(out)
}

/// Certified gains of both scenarios against their hand-derived values, and
/// the `α = γ` identity.
pub fn check_gains(gamma_fn: GammaFn) -> Vec<Check> {
    let mut out = Vec::new();
    let uni = UnicycleScenario::default();
    let cruise = CruiseScenario::default();
    // h hᵀ = σ² I on the actuated rows and g R⁻¹ gᵀ = I / r there.
    let cases = [
        ("unicycle", 0.1, uni.sigma * uni.sigma * uni.control_weight, certify_with(&uni.dynamics(), &uni.cost(), &uni.sample_points(), 0.1, gamma_fn)),
        ("cruise", 1.5, cruise.sigma * cruise.sigma * cruise.control_weight, certify_with(&cruise.dynamics(), &cruise.cost(), &cruise.sample_points(), 1.5, gamma_fn)),
    ];
    for (name, lambda, xi, cert) in cases {
        let gamma = xi * lambda / (lambda - xi);
        out.push(Check::absolute(format!("{name}: xi"), cert.xi, xi, 1e-9));
        out.push(Check::absolute(format!("{name}: gamma"), cert.gamma, gamma, 1e-9));
        out.push(Check::absolute(format!("{name}: alpha"), cert.alpha, gamma, 1e-9));
        out.push(Check::flag(format!("{name}: alpha = gamma certified"), cert.valid));
    }
    out
}

/// `P + Q = 1` and agreement with an independent implementation.
pub fn check_gamma_identities() -> Result<Vec<Check>> {
    let mut worst_sum: f64 = 0.0;
    let mut worst_ref: f64 = 0.0;
    for &a in &[0.5, 1.0, 2.5, 50.0, 150.0] {
        for &x in &[0.01, 0.5, 1.0, 3.0, 49.0, 140.0, 170.0] {
            let (p, q) = regularized_gamma(x, a)?;
            worst_sum = worst_sum.max((p + q - 1.0).abs());
            worst_ref = worst_ref.max((p - statrs::function::gamma::gamma_lr(a, x)).abs());
        }
    }
    Ok(vec![
        Check::absolute("incomplete gamma: max |P + Q - 1|", worst_sum, 0.0, 1e-12),
        Check::absolute("incomplete gamma: max |P - reference|", worst_ref, 0.0, 1e-10),
    ])
}

pub fn run_validation(opts: &ValidationOptions) -> Result<ValidationReport> {
    let mut checks = check_analytic(opts)?;
    checks.extend(check_feynman_kac(opts)?);
    checks.extend(check_gains(opts.gamma_fn));
    checks.extend(check_gamma_identities()?);
    Ok(ValidationReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fk_solver_matches_brownian_closed_form() {
        // a = 0, ℓ = x: Φ = exp(κ x T + κ² h² T³ / 6).
        let p = Diffusion1d { drift_coef: 0.0, noise_gain: 1.0, cost: [0.0, 1.0, 0.0], horizon: 1.0 };
        let sol = solve_fk(&p, 0.5, 8.0, 800).unwrap();
        for x in [-1.0, 0.0, 0.7] {
            let exact = 0.5 * x + 0.25 / 6.0;
            assert!((sol.phi_at(x).unwrap().ln() - exact).abs() < 2e-3, "x = {x}");
        }
    }

    #[test]
    fn fk_solver_matches_ou_mean_for_linear_cost() {
        // κ → 0: log Φ / κ → E ∫ x_s ds = x (1 − e^{−T}).
        let p = Diffusion1d { drift_coef: -1.0, noise_gain: 1.0, cost: [0.0, 1.0, 0.0], horizon: 1.0 };
        let kappa = 1e-6;
        let sol = solve_fk(&p, kappa, 6.0, 600).unwrap();
        for x in [-1.0, 0.5] {
            let v = sol.phi_at(x).unwrap().ln() / kappa;
            assert!((v - x * (1.0 - (-1.0f64).exp())).abs() < 1e-3);
        }
    }

    #[test]
    fn query_points_are_interior() {
        let q = query_points(-1.5, 1.5, 10);
        assert_eq!(q.len(), 10);
        assert!((q[0] + 1.35).abs() < 1e-12 && (q[9] - 1.35).abs() < 1e-12);
    }

    #[test]
    fn gain_checks_pass_and_catch_a_wrong_gamma() {
        let ok = check_gains(gamma_from_xi);
        assert!(ok.iter().all(|c| c.passed), "{ok:?}");
        let unicycle_gamma = ok.iter().find(|c| c.name == "unicycle: gamma").unwrap().expected;
        assert!((unicycle_gamma - 0.01 * 0.1 / 0.09).abs() < 1e-15);
        let bad = check_gains(|xi, lambda| Ok(xi * lambda / (lambda + xi)));
        assert!(bad.iter().any(|c| c.name == "unicycle: alpha = gamma certified" && !c.passed));
    }

    #[test]
    fn gamma_identities_hold() {
        assert!(check_gamma_identities().unwrap().iter().all(|c| c.passed));
    }

    #[test]
    fn report_lines() {
        let r = ValidationReport {
            checks: vec![Check::absolute("a", 1.0, 1.0, 0.0), Check::relative("b", 1.1, 1.0, 0.05)],
        };
        assert!(!r.passed());
        assert_eq!(r.failures().count(), 1);
        let t = r.to_text();
        assert!(t.starts_with("PASS a:") && t.contains("FAIL b:"));
    }
}
