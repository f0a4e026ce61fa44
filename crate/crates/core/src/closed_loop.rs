//! Receding-horizon closed loops shared by the attack and game runners.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::sde::{em_step_into, ControlAffineDynamics, CostModel, Policy, SeedSpec, StepScratch, TimeGrid};

/// Seed domains, so that the evaluation noise and the per-decision rollout
/// noise never share a stream.
pub(crate) const DOMAIN_PLANT: u64 = 1;
pub(crate) const DOMAIN_ROLLOUT: u64 = 2;

/// One simulated realization of a closed loop.
#[derive(Debug, Clone)]
pub struct ClosedLoopRecord {
    pub grid: TimeGrid,
    pub state_dim: usize,
    pub control_dim: usize,
    pub noise_dim: usize,
    /// `(K + 1) × n`
    pub states: Vec<f64>,
    /// `K × ℓ`, the controls applied at each step.
    pub controls: Vec<f64>,
    /// `K × m`, the applied biases θ_k.
    pub bias_history: Vec<f64>,
    /// `K` running costs `c(t_k, x_k, u_k)`.
    pub running_costs: Vec<f64>,
    /// `½ Σ_k ‖θ_k‖² dt`
    pub kl_cost: f64,
    /// ESS of every replanning decision.
    pub decision_ess: Vec<f64>,
}

impl ClosedLoopRecord {
    pub fn steps(&self) -> usize {
        self.grid.steps
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.state_dim..(k + 1) * self.state_dim]
    }

    pub fn control(&self, k: usize) -> &[f64] {
        &self.controls[k * self.control_dim..(k + 1) * self.control_dim]
    }

    pub fn bias(&self, k: usize) -> &[f64] {
        &self.bias_history[k * self.noise_dim..(k + 1) * self.noise_dim]
    }

    pub fn min_ess(&self) -> Option<f64> {
        self.decision_ess.iter().copied().reduce(f64::min)
    }

    /// First grid index whose state satisfies `unsafe_at`.
    pub fn first_hit(&self, unsafe_at: impl Fn(&[f64]) -> bool) -> Option<usize> {
        (0..=self.steps()).find(|&k| unsafe_at(self.state(k)))
    }

    /// Columns `run_id, step, t, <state>, <u>, <theta>`; one row per grid
    /// point, with empty control and bias cells on the terminal row.
    pub fn write_trajectory_rows<W: Write>(
        &self,
        w: &mut W,
        run_id: usize,
    ) -> std::io::Result<()> {
        for k in 0..=self.steps() {
            write!(w, "{run_id},{k},{}", self.grid.time(k))?;
            for v in self.state(k) {
                write!(w, ",{v}")?;
            }
            if k < self.steps() {
                for v in self.control(k).iter().chain(self.bias(k)) {
                    write!(w, ",{v}")?;
                }
            } else {
                for _ in 0..self.control_dim + self.noise_dim {
                    write!(w, ",")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Columns `step, t, x0.., theta0.., running_kl`.
    pub fn write_attack_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "step,t")?;
        for i in 0..self.state_dim {
            write!(w, ",x{i}")?;
        }
        for j in 0..self.noise_dim {
            write!(w, ",theta{j}")?;
        }
        writeln!(w, ",running_kl")?;
        let mut kl = 0.0;
        for k in 0..=self.steps() {
            write!(w, "{k},{}", self.grid.time(k))?;
            for v in self.state(k) {
                write!(w, ",{v}")?;
            }
            if k < self.steps() {
                for v in self.bias(k) {
                    write!(w, ",{v}")?;
                }
            } else {
                for _ in 0..self.noise_dim {
                    write!(w, ",")?;
                }
            }
            writeln!(w, ",{kl}")?;
            if k < self.steps() {
                kl += 0.5 * self.bias(k).iter().map(|v| v * v).sum::<f64>() * self.grid.dt;
            }
        }
        Ok(())
    }

    /// Columns `step, t, x0.., u0.., theta0.., cumulative_cost, crashed`.
    pub fn write_game_csv<W: Write>(
        &self,
        mut w: W,
        unsafe_at: impl Fn(&[f64]) -> bool,
    ) -> std::io::Result<()> {
        write!(w, "step,t")?;
        for i in 0..self.state_dim {
            write!(w, ",x{i}")?;
        }
        for j in 0..self.control_dim {
            write!(w, ",u{j}")?;
        }
        for j in 0..self.noise_dim {
            write!(w, ",theta{j}")?;
        }
        writeln!(w, ",cumulative_cost,crashed")?;
        let mut acc = 0.0;
        let mut crashed = false;
        for k in 0..=self.steps() {
            crashed |= unsafe_at(self.state(k));
            write!(w, "{k},{}", self.grid.time(k))?;
            for v in self.state(k) {
                write!(w, ",{v}")?;
            }
            if k < self.steps() {
                for v in self.control(k).iter().chain(self.bias(k)) {
                    write!(w, ",{v}")?;
                }
            } else {
                for _ in 0..self.control_dim + self.noise_dim {
                    write!(w, ",")?;
                }
            }
            writeln!(w, ",{acc},{}", u8::from(crashed))?;
            if k < self.steps() {
                acc += self.running_costs[k] * self.grid.dt;
            }
        }
        Ok(())
    }
}

/// What a replanning step decides, held until the next replan.
pub(crate) struct Decision {
    /// `None` keeps the fixed feedback controller in charge.
    pub control: Option<Vec<f64>>,
    pub bias: Vec<f64>,
    pub ess: Option<f64>,
}

/// Runs one realization. `decide(k, x)` is called at every `replan_every`-th
/// step; its output is held (zero-order hold) in between.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_receding<D, C, U>(
    dynamics: &D,
    cost: &C,
    grid: &TimeGrid,
    x0: &[f64],
    fixed_control: &U,
    replan_every: usize,
    seed: &SeedSpec,
    mut decide: impl FnMut(usize, &[f64]) -> Result<Decision>,
) -> Result<ClosedLoopRecord>
where
    D: ControlAffineDynamics + ?Sized,
    C: CostModel + ?Sized,
    U: Policy + ?Sized,
{
    let (n, l, m) = (dynamics.state_dim(), dynamics.control_dim(), dynamics.noise_dim());
    let steps = grid.steps;
    let mut rec = ClosedLoopRecord {
        grid: *grid,
        state_dim: n,
        control_dim: l,
        noise_dim: m,
        states: Vec::with_capacity((steps + 1) * n),
        controls: Vec::with_capacity(steps * l),
        bias_history: Vec::with_capacity(steps * m),
        running_costs: Vec::with_capacity(steps),
        kl_cost: 0.0,
        decision_ess: Vec::new(),
    };
    let mut plant = seed.derive(DOMAIN_PLANT, 0).stream(0);
    let sqrt_dt = grid.dt.sqrt();
    let mut x = x0.to_vec();
    let mut xn = vec![0.0; n];
    let mut u = vec![0.0; l];
    let mut dw = vec![0.0; m];
    let mut scratch = StepScratch::new(n, l, m);
    let mut held = Decision { control: None, bias: vec![0.0; m], ess: None };
    rec.states.extend_from_slice(&x);
    for k in 0..steps {
        let t = grid.time(k);
        if k % replan_every.max(1) == 0 {
            held = decide(k, &x)?;
            if let Some(e) = held.ess {
                rec.decision_ess.push(e);
            }
        }
        match &held.control {
            Some(c) => u.copy_from_slice(c),
            None => fixed_control.eval(t, &x, &mut u),
        }
        for d in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut plant);
            *d = z * sqrt_dt;
        }
        rec.running_costs.push(cost.running_cost(t, &x, &u));
        em_step_into(dynamics, t, &x, &u, &held.bias, &dw, grid.dt, &mut scratch, &mut xn)
            .map_err(|e| e.at(0, k))?;
        std::mem::swap(&mut x, &mut xn);
        rec.states.extend_from_slice(&x);
        rec.controls.extend_from_slice(&u);
        rec.bias_history.extend_from_slice(&held.bias);
    }
    rec.kl_cost = crate::kl_attack::kl_cost(&rec.bias_history, m, grid.dt);
    Ok(rec)
}
