use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::minimax::SamplePoint;
use crate::sde::{CostModel, ScalarLinearDynamics};

/// Scalar problem `dx = g u dt + h (θ dt + dw)` with running cost
/// `ℓ(x) = c₀ + a x + ½ r u²` on `[0, T]`.
///
/// Without control the state is Brownian, so `∫ₜᵀ x ds` is Gaussian with mean
/// `x τ` and variance `h² τ³ / 3` (`τ = T − t`), and both exponential values
/// are closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearCostProblem {
    pub offset: f64,
    pub slope: f64,
    pub control_gain: f64,
    pub noise_gain: f64,
    pub control_weight: f64,
    pub horizon: f64,
}

impl LinearCostProblem {
    pub fn dynamics(&self) -> ScalarLinearDynamics {
        ScalarLinearDynamics { drift_coef: 0.0, control_gain: self.control_gain, noise_gain: self.noise_gain }
    }

    fn tau(&self, t: f64) -> f64 {
        self.horizon - t
    }

    /// `λ log E exp(S / λ)`
    pub fn attack_value(&self, x: f64, t: f64, lambda: f64) -> f64 {
        let (tau, a, h) = (self.tau(t), self.slope, self.noise_gain);
        (self.offset + a * x) * tau + a * a * h * h * tau.powi(3) / (6.0 * lambda)
    }

    /// `(1/λ) h ∂ₓV`
    pub fn attack_bias(&self, t: f64, lambda: f64) -> f64 {
        self.noise_gain * self.value_gradient(t) / lambda
    }

    /// `−α log E exp(−S / α)`
    pub fn game_value(&self, x: f64, t: f64, alpha: f64) -> f64 {
        let (tau, a, h) = (self.tau(t), self.slope, self.noise_gain);
        (self.offset + a * x) * tau - a * a * h * h * tau.powi(3) / (6.0 * alpha)
    }

    /// `−r⁻¹ g ∂ₓV`
    pub fn game_control(&self, t: f64) -> f64 {
        -self.control_gain * self.value_gradient(t) / self.control_weight
    }

    /// `(1/λ) h ∂ₓV`; the gradient of either value is `a τ`.
    pub fn game_bias(&self, t: f64, lambda: f64) -> f64 {
        self.attack_bias(t, lambda)
    }

    pub fn value_gradient(&self, t: f64) -> f64 {
        self.slope * self.tau(t)
    }

    pub fn sample_points(&self) -> Vec<SamplePoint> {
        [-1.0, 0.0, 2.0].iter().map(|&x| (0.0, vec![x])).collect()
    }
}

impl CostModel for LinearCostProblem {
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn state_cost(&self, _t: f64, x: &[f64]) -> f64 {
        self.offset + self.slope * x[0]
    }
    fn control_weight(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.control_weight)
    }
}

/// A problem with its exact value and policies at one `(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticBenchmark {
    pub name: &'static str,
    pub problem: LinearCostProblem,
    pub lambda: f64,
    /// Set for game problems.
    pub alpha: Option<f64>,
    pub t: f64,
    pub x: f64,
    pub value: f64,
    pub theta: f64,
    /// Set for game problems.
    pub u: Option<f64>,
}

pub fn analytic_1d_suite() -> Vec<AnalyticBenchmark> {
    let constant = LinearCostProblem {
        offset: 0.7,
        slope: 0.0,
        control_gain: 0.0,
        noise_gain: 1.0,
        control_weight: 1.0,
        horizon: 1.0,
    };
    let attack = LinearCostProblem { offset: 0.0, slope: 1.0, ..constant };
    // g = h = 1, r = 1/2: h² = ξ g²/r with ξ = 1/2, so α = γ = 1 at λ = 1.
    let game = LinearCostProblem { control_gain: 1.0, control_weight: 0.5, ..attack };
    let (lambda, alpha, t, x) = (1.0, 1.0, 0.0, 0.0);
    vec![
        AnalyticBenchmark {
            name: "constant_cost",
            problem: constant,
            lambda,
            alpha: None,
            t,
            x,
            value: constant.attack_value(x, t, lambda),
            theta: constant.attack_bias(t, lambda),
            u: None,
        },
        AnalyticBenchmark {
            name: "linear_attack",
            problem: attack,
            lambda,
            alpha: None,
            t,
            x,
            value: attack.attack_value(x, t, lambda),
            theta: attack.attack_bias(t, lambda),
            u: None,
        },
        AnalyticBenchmark {
            name: "linear_game",
            problem: game,
            lambda,
            alpha: Some(alpha),
            t,
            x,
            value: game.game_value(x, t, alpha),
            theta: game.game_bias(t, lambda),
            u: Some(game.game_control(t)),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minimax::certify;

    #[test]
    fn suite_values() {
        let s = analytic_1d_suite();
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].value, s[0].theta), (0.7, 0.0));
        assert!((s[1].value - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(s[1].theta, 1.0);
        assert!((s[2].value + 1.0 / 6.0).abs() < 1e-15);
        assert_eq!((s[2].u, s[2].theta), (Some(-2.0), 1.0));
    }

    #[test]
    fn gaussian_moment_oracle() {
        // E exp(c ∫₀^τ w ds) = exp(c² τ³ / 6) for Brownian w.
        let p = LinearCostProblem { offset: 0.0, slope: 0.8, control_gain: 0.0, noise_gain: 1.5, control_weight: 1.0, horizon: 2.0 };
        let (lambda, tau) = (0.6, 1.5f64);
        let c = p.slope / lambda;
        let var = p.noise_gain * p.noise_gain * tau.powi(3) / 3.0;
        let oracle = 0.3 * p.slope * tau + lambda * (0.5 * c * c * var);
        assert!((p.attack_value(0.3, 0.5, lambda) - oracle).abs() < 1e-14);
    }

    #[test]
    fn bias_is_scaled_value_gradient() {
        let p = analytic_1d_suite()[1].problem;
        let eps = 1e-4;
        let fd = (p.attack_value(eps, 0.2, 1.3) - p.attack_value(-eps, 0.2, 1.3)) / (2.0 * eps);
        assert!((p.noise_gain * fd / 1.3 - p.attack_bias(0.2, 1.3)).abs() < 1e-9);
    }

    #[test]
    fn game_problem_is_certified_with_unit_alpha() {
        let b = &analytic_1d_suite()[2];
        let cert = certify(&b.problem.dynamics(), &b.problem, &b.problem.sample_points(), b.lambda);
        assert!(cert.valid, "{:?}", cert.failures);
        assert!((cert.xi - 0.5).abs() < 1e-12);
        assert!((cert.alpha - 1.0).abs() < 1e-12 && (cert.gamma - 1.0).abs() < 1e-12);
    }
}
