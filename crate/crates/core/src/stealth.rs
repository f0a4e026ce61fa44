//! Detectability of attacks: KL bounds on the total detection error and the
//! Neyman–Pearson test on the diffusion coefficient.
//!
//! The detector observes `K` increments `y_k` of length `h = 1/K` and tests
//! `H0: y_k ~ N(0, h)` against `H1: y_k ~ N(0, σ² h)`. With
//! `c = K ln σ + ln τ` the likelihood-ratio test rejects `H0` when
//! `Σ (y_k / √h)² ≷ 2σ² c / (σ² − 1)`, and
//!
//! ```text
//! σ > 1:  α = Q(σ² c / (σ² − 1), K/2),   β = P(c / (σ² − 1), K/2)
//! σ < 1:  α = P(σ² c / (σ² − 1), K/2),   β = Q(c / (σ² − 1), K/2)
//! ```
//!
//! Arguments below zero are clamped to zero: the acceptance region of `H1`
//! is then the whole space, so `α = 1` and `β = 0`.

use std::fmt::Write as _;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::sde::SeedSpec;

pub fn pinsker_bound(kl: f64) -> Result<f64> {
    check_kl(kl)?;
    Ok(1.0 - (kl / 2.0).sqrt())
}

pub fn bh_bound(kl: f64) -> Result<f64> {
    check_kl(kl)?;
    Ok(0.5 * (-kl).exp())
}

fn check_kl(kl: f64) -> Result<()> {
    if !(kl >= 0.0) {
        return Err(Error::invalid(format!("KL divergence must be nonnegative, got {kl}")));
    }
    Ok(())
}

const GAMMA_EPS: f64 = 1e-15;
const GAMMA_MAX_ITER: usize = 100_000;

/// Regularized incomplete gamma functions `(P(x, a), Q(x, a))`.
pub fn regularized_gamma(x: f64, a: f64) -> Result<(f64, f64)> {
    if !(x >= 0.0) || !(a > 0.0) || !x.is_finite() || !a.is_finite() {
        return Err(Error::invalid(format!("regularized_gamma needs x >= 0, a > 0; got x = {x}, a = {a}")));
    }
    if x == 0.0 {
        return Ok((0.0, 1.0));
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let p = (gamma_series(x, a)? + log_prefactor).exp();
        Ok((p, 1.0 - p))
    } else {
        let q = (gamma_continued_fraction(x, a)? + log_prefactor).exp();
        Ok((1.0 - q, q))
    }
}

/// `ln Σ_n xⁿ / (a (a+1) … (a+n))`
fn gamma_series(x: f64, a: f64) -> Result<f64> {
    let mut term = 1.0 / a;
    let mut sum = term;
    for n in 1..GAMMA_MAX_ITER {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            return Ok(sum.ln());
        }
    }
    Err(Error::invalid(format!("incomplete gamma series did not converge (x = {x}, a = {a})")))
}

/// Modified Lentz evaluation of the continued fraction for `Γ(a, x) eˣ x⁻ᵃ`,
/// returned as a logarithm.
fn gamma_continued_fraction(x: f64, a: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            return Ok(h.ln());
        }
    }
    Err(Error::invalid(format!("incomplete gamma continued fraction did not converge (x = {x}, a = {a})")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorSpec {
    pub k: usize,
    pub sigma: f64,
    pub h_step: f64,
}

impl DetectorSpec {
    /// Unit horizon: `h = 1 / K`.
    pub fn new(k: usize, sigma: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("K must be positive"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if sigma == 1.0 {
            return Err(Error::invalid("sigma = 1 makes the hypotheses identical"));
        }
        Ok(Self { k, sigma, h_step: 1.0 / k as f64 })
    }

    fn c(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) || tau.is_nan() {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        Ok(self.k as f64 * self.sigma.ln() + tau.ln())
    }

    /// Threshold on `Σ (y_k / √h)²`.
    pub fn threshold(&self, tau: f64) -> Result<f64> {
        let s2 = self.sigma * self.sigma;
        Ok(2.0 * s2 * self.c(tau)? / (s2 - 1.0))
    }

    /// Whether the test declares `H1` for statistic `stat`.
    pub fn declares_h1(&self, tau: f64, stat: f64) -> Result<bool> {
        let thr = self.threshold(tau)?;
        Ok(if self.sigma > 1.0 { stat >= thr } else { stat <= thr })
    }
}

/// Type-I error of the test at threshold `tau`.
pub fn np_alpha(spec: &DetectorSpec, tau: f64) -> Result<f64> {
    let s2 = spec.sigma * spec.sigma;
    let arg = (s2 * spec.c(tau)? / (s2 - 1.0)).max(0.0);
    let (p, q) = regularized_gamma(arg, spec.k as f64 / 2.0)?;
    Ok(if spec.sigma > 1.0 { q } else { p })
}

/// Type-II error of the test at threshold `tau`.
pub fn np_beta(spec: &DetectorSpec, tau: f64) -> Result<f64> {
    let s2 = spec.sigma * spec.sigma;
    let arg = (spec.c(tau)? / (s2 - 1.0)).max(0.0);
    let (p, q) = regularized_gamma(arg, spec.k as f64 / 2.0)?;
    Ok(if spec.sigma > 1.0 { p } else { q })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionPoint {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn tradeoff_curve(spec: &DetectorSpec, taus: &[f64]) -> Result<Vec<DetectionPoint>> {
    taus.iter()
        .map(|&tau| Ok(DetectionPoint { tau, alpha: np_alpha(spec, tau)?, beta: np_beta(spec, tau)? }))
        .collect()
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_tau_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Columns `tau, alpha, beta`.
pub fn write_curve_csv<W: Write>(points: &[DetectionPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "tau,alpha,beta")?;
    for p in points {
        writeln!(w, "{},{},{}", p.tau, p.alpha, p.beta)?;
    }
    Ok(())
}

/// The threshold at which `spec` has type-I error `alpha`, by bisection on
/// `ln τ`. `alpha` must lie strictly inside `(0, 1)`.
pub fn tau_at_alpha(spec: &DetectorSpec, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    // α is nonincreasing in ln τ; grow a bracket around the target.
    let f = |lt: f64| np_alpha(spec, lt.exp()).map(|a| a - alpha);
    let base = -(spec.k as f64) * spec.sigma.ln();
    let (mut lo, mut hi) = (base - 1.0, base + 1.0);
    let mut step = 1.0;
    while f(lo)? < 0.0 {
        step *= 2.0;
        lo -= step;
        if step > 1e6 {
            return Err(Error::invalid("could not bracket alpha from below"));
        }
    }
    step = 1.0;
    while f(hi)? > 0.0 {
        step *= 2.0;
        hi += step;
        if step > 1e6 {
            return Err(Error::invalid("could not bracket alpha from above"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceCheck {
    /// Points of the reference curve compared; those with `α ∈ {0, 1}` are skipped.
    pub compared: usize,
    /// Largest `β_better − β_reference` at matched `α`; `≤ 0` means dominance.
    pub worst_gap: f64,
    /// `τ` of the reference point attaining `worst_gap`.
    pub worst_tau: f64,
}

impl DominanceCheck {
    pub fn dominates(&self, tol: f64) -> bool {
        self.worst_gap <= tol
    }
}

/// Compares two detectors at equal type-I error: for each reference point the
/// `better` detector is evaluated at the threshold giving the same `α`.
pub fn check_dominance(better: &DetectorSpec, reference: &DetectorSpec, taus: &[f64]) -> Result<DominanceCheck> {
    let mut out = DominanceCheck { compared: 0, worst_gap: f64::NEG_INFINITY, worst_tau: f64::NAN };
    for &tau in taus {
        let a = np_alpha(reference, tau)?;
        if !(a > 0.0 && a < 1.0) {
            continue;
        }
        let b_ref = np_beta(reference, tau)?;
        let b_better = np_beta(better, tau_at_alpha(better, a)?)?;
        out.compared += 1;
        if b_better - b_ref > out.worst_gap {
            out.worst_gap = b_better - b_ref;
            out.worst_tau = tau;
        }
    }
    Ok(out)
}

/// Smallest `α + β` over the grid.
pub fn min_total_error(spec: &DetectorSpec, taus: &[f64]) -> Result<f64> {
    Ok(tradeoff_curve(spec, taus)?.iter().map(|p| p.alpha + p.beta).fold(f64::INFINITY, f64::min))
}

/// `Σ (y_k / √h)²`
pub fn np_statistic(increments: &[f64], h_step: f64) -> f64 {
    increments.iter().map(|y| y * y).sum::<f64>() / h_step
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalTest {
    pub tau: f64,
    /// One decision per path; `true` declares `H1`.
    pub decisions: Vec<bool>,
    /// Fraction of `H1` decisions, i.e. the empirical `α` when the paths
    /// come from `H0`.
    pub reject_rate: f64,
}

/// Applies the test to recorded increment paths of length `K`.
pub fn empirical_np_test(paths: &[Vec<f64>], spec: &DetectorSpec, tau: f64) -> Result<EmpiricalTest> {
    let decisions = paths
        .iter()
        .map(|p| {
            if p.len() != spec.k {
                return Err(Error::invalid(format!("path has {} increments, expected {}", p.len(), spec.k)));
            }
            spec.declares_h1(tau, np_statistic(p, spec.h_step))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = decisions.iter().filter(|d| **d).count();
    let reject_rate = if decisions.is_empty() { 0.0 } else { n as f64 / decisions.len() as f64 };
    Ok(EmpiricalTest { tau, decisions, reject_rate })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalRates {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub trials: usize,
}

const MC_CHUNK: usize = 4096;

/// Statistics of `trials` simulated paths with increments `N(0, scale² h)`.
fn simulate_statistics(spec: &DetectorSpec, scale: f64, trials: usize, seed: &SeedSpec) -> Vec<f64> {
    let chunks = trials.div_ceil(MC_CHUNK);
    let sd = scale * spec.h_step.sqrt();
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed.stream(c as u64);
            let n = MC_CHUNK.min(trials - c * MC_CHUNK);
            let mut y = vec![0.0; spec.k];
            (0..n)
                .map(|_| {
                    for v in y.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = sd * z;
                    }
                    np_statistic(&y, spec.h_step)
                })
                .collect()
        })
        .collect();
    parts.concat()
}

/// Monte Carlo type-I and type-II error rates at each `tau`, from `trials`
/// paths under each hypothesis.
pub fn simulate_np_rates(spec: &DetectorSpec, taus: &[f64], trials: usize, seed: &SeedSpec) -> Result<Vec<EmpiricalRates>> {
    if trials == 0 {
        return Err(Error::invalid("need at least one trial"));
    }
    let h0 = simulate_statistics(spec, 1.0, trials, &seed.derive(0xD0, spec.k as u64));
    let h1 = simulate_statistics(spec, spec.sigma, trials, &seed.derive(0xD1, spec.k as u64));
    taus.iter()
        .map(|&tau| {
            let mut false_alarm = 0usize;
            for s in &h0 {
                false_alarm += usize::from(spec.declares_h1(tau, *s)?);
            }
            let mut missed = 0usize;
            for s in &h1 {
                missed += usize::from(!spec.declares_h1(tau, *s)?);
            }
            Ok(EmpiricalRates {
                tau,
                alpha: false_alarm as f64 / trials as f64,
                beta: missed as f64 / trials as f64,
                trials,
            })
        })
        .collect()
}

/// Lower bounds on `α + β` for any detector, implied by an attack's KL cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StealthReport {
    pub kl: f64,
    pub pinsker: f64,
    pub bretagnolle_huber: f64,
}

impl StealthReport {
    /// The tighter of the two bounds, clipped at zero.
    pub fn best_bound(&self) -> f64 {
        self.pinsker.max(self.bretagnolle_huber).max(0.0)
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kl={}", self.kl);
        let _ = writeln!(s, "pinsker_bound={}", self.pinsker);
        let _ = writeln!(s, "bh_bound={}", self.bretagnolle_huber);
        let _ = writeln!(s, "error_sum_lower_bound={}", self.best_bound());
        s
    }
}

pub fn kl_bound_report(kl: f64) -> Result<StealthReport> {
    Ok(StealthReport { kl, pinsker: pinsker_bound(kl)?, bretagnolle_huber: bh_bound(kl)? })
}
