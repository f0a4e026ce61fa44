//! Exponential tilting of path costs.

use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, pairwise_sum_by};
use crate::sde::TrajectoryEnsemble;

/// `log Σ_i exp(a_i)`, shifted by the maximum.
pub fn log_sum_exp(a: &[f64]) -> f64 {
    let max = a.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    if !max.is_finite() {
        return max;
    }
    let terms: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    max + pairwise_sum(&terms).ln()
}

/// `log (1/N) Σ_i exp(a_i)`
pub fn log_mean_exp(a: &[f64]) -> f64 {
    log_sum_exp(a) - (a.len() as f64).ln()
}

/// Normalized weights `w_i ∝ exp(scale · S_i)`.
#[derive(Debug, Clone)]
pub struct Tilt {
    pub weights: Vec<f64>,
    /// `log (1/N) Σ exp(scale · S_i)`
    pub log_mean: f64,
    /// `1 / Σ w_i²`
    pub ess: f64,
}

pub fn tilt(costs: &[f64], scale: f64) -> Result<Tilt> {
    if costs.is_empty() {
        return Err(Error::invalid("no path costs"));
    }
    if !scale.is_finite() {
        return Err(Error::invalid(format!("tilt scale {scale} is not finite")));
    }
    let a: Vec<f64> = costs.iter().map(|s| scale * s).collect();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationDiverged { trajectory: None, step: None, t: f64::NAN });
    }
    let max = a.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let e: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let z = pairwise_sum(&e);
    let weights: Vec<f64> = e.iter().map(|v| v / z).collect();
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    Ok(Tilt {
        log_mean: max + z.ln() - (costs.len() as f64).ln(),
        ess: 1.0 / pairwise_sum(&sq),
        weights,
    })
}

/// Weighted average of first increments,
/// `W = Σ_i w_i dw_i / dt` with `w_i ∝ exp(scale · S_i)`.
pub fn weighted_first_increment(ens: &TrajectoryEnsemble, scale: f64) -> Result<(Vec<f64>, Tilt)> {
    let t = tilt(&ens.path_costs, scale)?;
    let m = ens.noise_dim;
    let dt = ens.grid.dt;
    let w = (0..m)
        .map(|j| {
            pairwise_sum_by(ens.len(), &|i| t.weights[i] * ens.first_increments[i * m + j]) / dt
        })
        .collect();
    Ok((w, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lse_handles_huge_values() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_mean_exp(&[5.0; 7]), 5.0);
    }

    #[test]
    fn equal_costs_give_full_ess() {
        let t = tilt(&[3.0; 10], 2.0).unwrap();
        assert!((t.ess - 10.0).abs() < 1e-12);
        assert!((t.log_mean - 6.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(costs in prop::collection::vec(-50.0..50.0f64, 1..64), scale in -5.0..5.0f64) {
            let t = tilt(&costs, scale).unwrap();
            let s: f64 = t.weights.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(t.weights.iter().all(|w| *w >= 0.0));
            prop_assert!(t.ess >= 1.0 - 1e-9 && t.ess <= costs.len() as f64 + 1e-9);
        }

        #[test]
        fn shift_moves_log_mean_only(costs in prop::collection::vec(-20.0..20.0f64, 1..32), c in -100.0..100.0f64) {
            let a = tilt(&costs, 0.7).unwrap();
            let shifted: Vec<f64> = costs.iter().map(|s| s + c).collect();
            let b = tilt(&shifted, 0.7).unwrap();
            prop_assert!((b.log_mean - a.log_mean - 0.7 * c).abs() < 1e-9);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
