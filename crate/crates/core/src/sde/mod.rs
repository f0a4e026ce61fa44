//! Euler–Maruyama simulation of control-affine SDEs and batched rollouts.

mod dump;
mod model;

pub use dump::{read_spe1, write_spe1, Spe1Dump};
pub use model::{
    ConstantPolicy, ControlAffineDynamics, CostModel, FnCost, FnDynamics, FnPolicy, Policy,
    ScalarLinearDynamics, WithFeedback, ZeroPolicy,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;

/// Uniform grid `t_k = t0 + k·dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Grid over `[t0, t_end]`. `(t_end - t0) / dt` must be an integer up to rounding.
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive and finite, got {dt}")));
        }
        if !(t_end > t0) {
            return Err(Error::invalid(format!("empty horizon [{t0}, {t_end}]")));
        }
        let ratio = (t_end - t0) / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 1.0 {
            return Err(Error::invalid(format!(
                "horizon {} is not a multiple of dt = {dt}",
                t_end - t0
            )));
        }
        Ok(Self { t0, dt, steps: steps as usize })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps)
    }

    /// The remaining grid starting at step `k`.
    pub fn tail(&self, k: usize) -> TimeGrid {
        let k = k.min(self.steps);
        TimeGrid { t0: self.time(k), dt: self.dt, steps: self.steps - k }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Master seed from which every random stream is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Independent stream number `index`. Same seed and index, same stream,
    /// whichever thread asks.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index);
        rng
    }

    /// A child seed for sub-computation `(domain, index)`.
    pub fn derive(&self, domain: u64, index: u64) -> SeedSpec {
        let a = splitmix64(self.master_seed ^ splitmix64(domain.wrapping_add(0x5EED)));
        SeedSpec { master_seed: splitmix64(a ^ splitmix64(index.wrapping_mul(0xA24B_AED4_963E_E407))) }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How Brownian increments are drawn across a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every trajectory has its own increments.
    Independent,
    /// Groups of four share one draw; the members flip the sign of the first
    /// increment and of the remaining increments independently.
    #[default]
    Antithetic,
}

impl Sampling {
    fn group_size(self) -> usize {
        match self {
            Sampling::Independent => 1,
            Sampling::Antithetic => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Record {
    /// Path costs, first increments and terminal states only.
    #[default]
    Summary,
    /// Also every state, increment, control and bias along each path.
    Full,
}

/// Which measure generated an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    /// Biased noise: the attacked system.
    P,
    /// Unbiased noise under a nonzero control.
    Q,
    /// Unbiased noise and zero control.
    Z,
}

impl Measure {
    /// Whether the noise was unbiased Brownian motion.
    pub fn is_unbiased(self) -> bool {
        matches!(self, Measure::Q | Measure::Z)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RolloutOptions {
    pub sampling: Sampling,
    pub record: Record,
}

/// Per-path data, trajectory-major. Step `k` of trajectory `i` lives at
/// `paths.states[(i * (K + 1) + k) * n ..][..n]`; the other arrays use `K` rows.
#[derive(Debug, Clone, Default)]
pub struct FullPaths {
    pub states: Vec<f64>,
    pub noise: Vec<f64>,
    pub controls: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
    pub grid: TimeGrid,
    pub measure: Measure,
    /// `S_i = Σ_k c(t_k, x_k, u_k) dt`
    pub path_costs: Vec<f64>,
    /// `dw_0` of each trajectory, `N × m` row-major.
    pub first_increments: Vec<f64>,
    /// `N × n` row-major.
    pub terminal_states: Vec<f64>,
    pub paths: Option<FullPaths>,
}

impl TrajectoryEnsemble {
    pub fn len(&self) -> usize {
        self.path_costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path_costs.is_empty()
    }

    pub fn first_increment(&self, i: usize) -> &[f64] {
        &self.first_increments[i * self.noise_dim..(i + 1) * self.noise_dim]
    }

    pub fn terminal_state(&self, i: usize) -> &[f64] {
        &self.terminal_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// State of trajectory `i` at step `k`; needs [`Record::Full`].
    pub fn state(&self, i: usize, k: usize) -> Option<&[f64]> {
        let p = self.paths.as_ref()?;
        let n = self.state_dim;
        let off = (i * (self.grid.steps + 1) + k) * n;
        p.states.get(off..off + n)
    }
}

/// Scratch buffers for [`em_step_into`].
#[derive(Debug, Clone)]
pub struct StepScratch {
    f: Vec<f64>,
    udt: Vec<f64>,
    v: Vec<f64>,
}

impl StepScratch {
    pub fn new(n: usize, l: usize, m: usize) -> Self {
        Self { f: vec![0.0; n], udt: vec![0.0; l], v: vec![0.0; m] }
    }
}

/// One Euler–Maruyama step
/// `x' = x + f dt + g u dt + h (θ dt + dw)` written into `out`.
///
/// Fails with `IntegrationDiverged` if `x'` is non-finite or outside the
/// model's domain.
#[allow(clippy::too_many_arguments)]
pub fn em_step_into<D: ControlAffineDynamics + ?Sized>(
    dynamics: &D,
    t: f64,
    x: &[f64],
    u: &[f64],
    theta: &[f64],
    dw: &[f64],
    dt: f64,
    scratch: &mut StepScratch,
    out: &mut [f64],
) -> Result<()> {
    dynamics.drift(t, x, &mut scratch.f);
    for ((o, xi), fi) in out.iter_mut().zip(x).zip(&scratch.f) {
        *o = xi + fi * dt;
    }
    if u.iter().any(|v| *v != 0.0) {
        for (a, b) in scratch.udt.iter_mut().zip(u) {
            *a = b * dt;
        }
        dynamics.add_control(t, x, &scratch.udt, out);
    }
    for ((v, th), w) in scratch.v.iter_mut().zip(theta).zip(dw) {
        *v = th * dt + w;
    }
    dynamics.add_noise(t, x, &scratch.v, out);
    let t_next = t + dt;
    if out.iter().any(|v| !v.is_finite()) || !dynamics.in_domain(t_next, out) {
        return Err(Error::IntegrationDiverged { trajectory: None, step: None, t: t_next });
    }
    Ok(())
}

/// Allocating wrapper around [`em_step_into`].
pub fn em_step<D: ControlAffineDynamics + ?Sized>(
    dynamics: &D,
    t: f64,
    x: &[f64],
    u: &[f64],
    theta: &[f64],
    dw: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    check_len("x", x.len(), dynamics.state_dim())?;
    check_len("u", u.len(), dynamics.control_dim())?;
    check_len("theta", theta.len(), dynamics.noise_dim())?;
    check_len("dw", dw.len(), dynamics.noise_dim())?;
    let mut scratch =
        StepScratch::new(dynamics.state_dim(), dynamics.control_dim(), dynamics.noise_dim());
    let mut out = vec![0.0; x.len()];
    em_step_into(dynamics, t, x, u, theta, dw, dt, &mut scratch, &mut out)?;
    Ok(out)
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::invalid(format!("{name} has length {got}, expected {want}")));
    }
    Ok(())
}

/// Left-Riemann path cost of a recorded trajectory: `Σ_k c(t_k, x_k, u_k) dt`.
/// `states` has `K + 1` rows of length `n`, `controls` has `K` rows.
pub fn path_cost<C: CostModel + ?Sized>(
    cost: &C,
    grid: &TimeGrid,
    states: &[f64],
    controls: &[f64],
) -> Result<f64> {
    let k = grid.steps;
    if k == 0 || !states.len().is_multiple_of(k + 1) || !controls.len().is_multiple_of(k) {
        return Err(Error::invalid("states/controls do not match the grid"));
    }
    let n = states.len() / (k + 1);
    let l = controls.len() / k;
    let terms: Vec<f64> = (0..k)
        .map(|j| cost.running_cost(grid.time(j), &states[j * n..(j + 1) * n], &controls[j * l..(j + 1) * l]))
        .collect();
    Ok(pairwise_sum(&terms) * grid.dt)
}

struct GroupOut {
    start: usize,
    costs: Vec<f64>,
    dw0: Vec<f64>,
    terminal: Vec<f64>,
    paths: Option<FullPaths>,
}

/// Simulates `count` trajectories from `x0` on `grid` under feedback control
/// `control` and noise bias `bias`.
///
/// Trajectory groups are seeded by index from `seed` and reduced in index
/// order, so the result does not depend on the number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn rollout_batch<D, C, U, B>(
    dynamics: &D,
    cost: &C,
    grid: &TimeGrid,
    x0: &[f64],
    control: &U,
    bias: &B,
    count: usize,
    seed: &SeedSpec,
    options: RolloutOptions,
) -> Result<TrajectoryEnsemble>
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
    U: Policy + ?Sized,
    B: Policy + ?Sized,
{
    let (n, l, m) = (dynamics.state_dim(), dynamics.control_dim(), dynamics.noise_dim());
    check_len("x0", x0.len(), n)?;
    check_len("control", control.dim(), l)?;
    check_len("bias", bias.dim(), m)?;
    if count == 0 {
        return Err(Error::invalid("rollout count must be positive"));
    }
    if grid.steps == 0 || !(grid.dt > 0.0) {
        return Err(Error::invalid("time grid has no steps"));
    }
    if x0.iter().any(|v| !v.is_finite()) || !dynamics.in_domain(grid.t0, x0) {
        return Err(Error::invalid("initial state is non-finite or outside the domain"));
    }

    let gsize = options.sampling.group_size();
    let groups = count.div_ceil(gsize);
    let full = options.record == Record::Full;
    let k_steps = grid.steps;
    let sqrt_dt = grid.dt.sqrt();

    let outs: Vec<Result<GroupOut>> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let start = g * gsize;
            let members = gsize.min(count - start);
            let mut rng = seed.stream(g as u64);
            let base: Vec<f64> = (0..k_steps * m)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * sqrt_dt
                })
                .collect();

            let mut out = GroupOut {
                start,
                costs: Vec::with_capacity(members),
                dw0: Vec::with_capacity(members * m),
                terminal: Vec::with_capacity(members * n),
                paths: full.then(FullPaths::default),
            };
            let mut x = x0.to_vec();
            let mut xn = vec![0.0; n];
            let mut u = vec![0.0; l];
            let mut th = vec![0.0; m];
            let mut dw = vec![0.0; m];
            let mut terms = vec![0.0; k_steps];
            let mut scratch = StepScratch::new(n, l, m);

            for v in 0..members {
                let s_first = if v & 1 == 1 { -1.0 } else { 1.0 };
                let s_rest = if v & 2 == 2 { -1.0 } else { 1.0 };
                x.copy_from_slice(x0);
                if let Some(p) = out.paths.as_mut() {
                    p.states.extend_from_slice(&x);
                }
                for k in 0..k_steps {
                    let t = grid.time(k);
                    control.eval(t, &x, &mut u);
                    bias.eval(t, &x, &mut th);
                    terms[k] = cost.running_cost(t, &x, &u);
                    let sign = if k == 0 { s_first } else { s_rest };
                    for (d, b) in dw.iter_mut().zip(&base[k * m..(k + 1) * m]) {
                        *d = sign * b;
                    }
                    if k == 0 {
                        out.dw0.extend_from_slice(&dw);
                    }
                    em_step_into(dynamics, t, &x, &u, &th, &dw, grid.dt, &mut scratch, &mut xn)
                        .map_err(|e| e.at(start + v, k))?;
                    std::mem::swap(&mut x, &mut xn);
                    if let Some(p) = out.paths.as_mut() {
                        p.states.extend_from_slice(&x);
                        p.noise.extend_from_slice(&dw);
                        p.controls.extend_from_slice(&u);
                        p.biases.extend_from_slice(&th);
                    }
                }
                let s = pairwise_sum(&terms) * grid.dt;
                if !s.is_finite() {
                    return Err(Error::IntegrationDiverged {
                        trajectory: Some(start + v),
                        step: Some(k_steps),
                        t: grid.end(),
                    });
                }
                out.costs.push(s);
                out.terminal.extend_from_slice(&x);
            }
            Ok(out)
        })
        .collect();

    let mut ens = TrajectoryEnsemble {
        state_dim: n,
        control_dim: l,
        noise_dim: m,
        grid: *grid,
        measure: if !bias.is_identically_zero() {
            Measure::P
        } else if control.is_identically_zero() {
            Measure::Z
        } else {
            Measure::Q
        },
        path_costs: Vec::with_capacity(count),
        first_increments: Vec::with_capacity(count * m),
        terminal_states: Vec::with_capacity(count * n),
        paths: full.then(FullPaths::default),
    };
    for o in outs {
        let o = o?;
        debug_assert_eq!(o.start, ens.path_costs.len());
        ens.path_costs.extend(o.costs);
        ens.first_increments.extend(o.dw0);
        ens.terminal_states.extend(o.terminal);
        if let (Some(dst), Some(src)) = (ens.paths.as_mut(), o.paths) {
            dst.states.extend(src.states);
            dst.noise.extend(src.noise);
            dst.controls.extend(src.controls);
            dst.biases.extend(src.biases);
        }
    }
    Ok(ens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn scalar() -> ScalarLinearDynamics {
        ScalarLinearDynamics { drift_coef: 0.0, control_gain: 1.0, noise_gain: 1.0 }
    }

    #[test]
    fn em_step_with_zero_noise_is_deterministic_euler() {
        let d = ScalarLinearDynamics { drift_coef: -1.0, control_gain: 2.0, noise_gain: 0.5 };
        let x = em_step(&d, 0.0, &[1.0], &[0.5], &[0.0], &[0.0], 0.1).unwrap();
        assert!((x[0] - (1.0 - 0.1 + 2.0 * 0.5 * 0.1)).abs() < 1e-15);
        let y = em_step(&d, 0.0, &[1.0], &[0.5], &[0.0], &[0.0], 0.1).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn em_step_bias_adds_h_theta_dt() {
        let d = ScalarLinearDynamics { drift_coef: 0.0, control_gain: 1.0, noise_gain: 0.5 };
        let x = em_step(&d, 0.0, &[0.0], &[0.0], &[2.0], &[0.3], 0.1).unwrap();
        assert!((x[0] - 0.5 * (0.2 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn em_step_reports_nan() {
        let d = scalar();
        let err = em_step(&d, 0.0, &[1.0], &[f64::NAN], &[0.0], &[0.0], 0.1).unwrap_err();
        assert!(matches!(err, Error::IntegrationDiverged { .. }));
    }

    #[test]
    fn grid_rejects_non_multiple() {
        assert!(TimeGrid::new(0.0, 1.0, 0.3).is_err());
        let g = TimeGrid::new(0.0, 5.0, 0.01).unwrap();
        assert_eq!(g.steps, 500);
        assert_eq!(g.tail(100).steps, 400);
        assert!((g.tail(100).t0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn path_cost_counts_left_endpoints_only() {
        let cost = FnCost::new(1.0, DMatrix::identity(1, 1), |_, x| x[0]);
        let grid = TimeGrid::new(0.0, 1.0, 0.25).unwrap();
        let states = [1.0, 2.0, 3.0, 4.0, 100.0];
        let controls = [0.0; 4];
        let s = path_cost(&cost, &grid, &states, &controls).unwrap();
        assert!((s - 2.5).abs() < 1e-15);
    }

    #[test]
    fn rollout_is_reproducible_and_tagged() {
        let d = scalar();
        let cost = FnCost::new(1.0, DMatrix::identity(1, 1), |_, x| x[0] * x[0]);
        let grid = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
        let seed = SeedSpec::new(3);
        let run = |b: &dyn Policy| {
            rollout_batch(&d, &cost, &grid, &[0.0], &ZeroPolicy(1), b, 37, &seed, Default::default())
                .unwrap()
        };
        let a = run(&ZeroPolicy(1));
        let b = run(&ZeroPolicy(1));
        assert_eq!(a.path_costs, b.path_costs);
        assert_eq!(a.measure, Measure::Z);
        assert_eq!(a.len(), 37);
        assert_eq!(run(&ConstantPolicy(vec![1.0])).measure, Measure::P);
    }

    #[test]
    fn antithetic_groups_flip_signs() {
        let d = scalar();
        let cost = FnCost::new(1.0, DMatrix::identity(1, 1), |_, _| 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 0.1).unwrap();
        let ens = rollout_batch(
            &d,
            &cost,
            &grid,
            &[0.0],
            &ZeroPolicy(1),
            &ZeroPolicy(1),
            4,
            &SeedSpec::new(9),
            RolloutOptions { sampling: Sampling::Antithetic, record: Record::Full },
        )
        .unwrap();
        let w = &ens.first_increments;
        assert_eq!(w[0], -w[1]);
        assert_eq!(w[2], -w[3]);
        assert_eq!(w[0], w[2]);
        // x_K = Σ dw; members 0 and 3 are exact mirror images
        let x = &ens.terminal_states;
        assert!((x[0] + x[3]).abs() < 1e-14);
        assert!((x[1] + x[2]).abs() < 1e-14);
    }

    #[test]
    fn full_record_matches_path_cost() {
        let d = ScalarLinearDynamics { drift_coef: -0.5, control_gain: 1.0, noise_gain: 0.3 };
        let cost = FnCost::new(1.0, DMatrix::identity(1, 1) * 2.0, |_, x| 1.0 + x[0] * x[0]);
        let grid = TimeGrid::new(0.0, 1.0, 0.05).unwrap();
        let u = FnPolicy::new(1, |_, x: &[f64], out: &mut [f64]| out[0] = -x[0]);
        let ens = rollout_batch(
            &d,
            &cost,
            &grid,
            &[0.7],
            &u,
            &ZeroPolicy(1),
            6,
            &SeedSpec::new(1),
            RolloutOptions { sampling: Sampling::Independent, record: Record::Full },
        )
        .unwrap();
        assert_eq!(ens.measure, Measure::Q);
        let p = ens.paths.as_ref().unwrap();
        let k = grid.steps;
        for i in 0..6 {
            let s = path_cost(
                &cost,
                &grid,
                &p.states[i * (k + 1)..(i + 1) * (k + 1)],
                &p.controls[i * k..(i + 1) * k],
            )
            .unwrap();
            assert!((s - ens.path_costs[i]).abs() < 1e-13);
            assert_eq!(ens.state(i, k).unwrap(), ens.terminal_state(i));
        }
    }

    #[test]
    fn divergence_carries_location() {
        let d = ScalarLinearDynamics { drift_coef: 1e200, control_gain: 1.0, noise_gain: 1.0 };
        let cost = FnCost::new(1.0, DMatrix::identity(1, 1), |_, _| 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 0.1).unwrap();
        let err = rollout_batch(
            &d,
            &cost,
            &grid,
            &[1.0],
            &ZeroPolicy(1),
            &ZeroPolicy(1),
            2,
            &SeedSpec::new(0),
            Default::default(),
        )
        .unwrap_err();
        match err {
            Error::IntegrationDiverged { trajectory: Some(0), step: Some(_), .. } => {}
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let s = SeedSpec::new(42);
        assert_ne!(s.derive(0, 0), s.derive(0, 1));
        assert_ne!(s.derive(0, 0), s.derive(1, 0));
        assert_eq!(s.derive(2, 5), s.derive(2, 5));
    }
}
