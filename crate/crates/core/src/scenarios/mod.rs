//! Benchmark systems and closed-loop experiments on them.

mod analytic;
mod cruise;
mod unicycle;

pub use analytic::{analytic_1d_suite, AnalyticBenchmark, LinearCostProblem};
pub use cruise::{CruiseCost, CruiseDynamics, CruiseNominal, CruiseScenario};
pub use unicycle::{Rect, UnicycleCost, UnicycleDynamics, UnicycleNominal, UnicycleScenario};

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{run_receding, ClosedLoopRecord, Decision};
use crate::error::{Error, Result};
use crate::kl_attack::{synthesize_attack, AttackConfig};
use crate::minimax::{certify, run_closed_loop_game, GainCertificate, GameConfig, GameMode, SamplePoint};
use crate::sde::{ControlAffineDynamics, CostModel, Policy, Sampling, SeedSpec, TimeGrid, WithFeedback};

const DOMAIN_RUN: u64 = 3;

/// A benchmark: dynamics, cost, a fixed nominal controller and an unsafe set.
pub trait Scenario: Sync {
    type Dynamics: ControlAffineDynamics;
    type Cost: CostModel;
    type Nominal: Policy;

    fn dynamics(&self) -> Self::Dynamics;
    fn cost(&self) -> Self::Cost;
    fn nominal(&self) -> Self::Nominal;
    fn grid(&self) -> Result<TimeGrid>;
    fn x0(&self) -> Vec<f64>;
    fn is_unsafe(&self, x: &[f64]) -> bool;
    /// Points at which the gain assumptions are certified.
    fn sample_points(&self) -> Vec<SamplePoint>;
    fn state_names(&self) -> &'static [&'static str];
    fn control_names(&self) -> &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashReport {
    pub total: usize,
    pub crashed: usize,
    pub p_crash: f64,
    /// First unsafe grid index of each run.
    pub crash_step: Vec<Option<usize>>,
}

impl CrashReport {
    /// Columns `run_id, crashed, crash_step`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "run_id,crashed,crash_step")?;
        for (i, s) in self.crash_step.iter().enumerate() {
            match s {
                Some(k) => writeln!(w, "{i},1,{k}")?,
                None => writeln!(w, "{i},0,")?,
            }
        }
        Ok(())
    }
}

/// A run is crashed iff any grid state is unsafe.
pub fn crash_probability<S: Scenario + ?Sized>(runs: &[ClosedLoopRecord], scn: &S) -> CrashReport {
    let crash_step: Vec<Option<usize>> = runs.iter().map(|r| r.first_hit(|x| scn.is_unsafe(x))).collect();
    let crashed = crash_step.iter().filter(|s| s.is_some()).count();
    CrashReport {
        total: runs.len(),
        crashed,
        p_crash: if runs.is_empty() { 0.0 } else { crashed as f64 / runs.len() as f64 },
        crash_step,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    /// Nominal controller, unbiased noise.
    NoAttack,
    /// Nominal controller against the KL-optimal attack.
    AttackOnly,
    /// Saddle-point controller against the saddle-point attack.
    Mitigate,
    /// Saddle-point policies with a chosen set of active players.
    Game(GameMode),
}

/// What the game controller's input is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationBaseline {
    /// The game controller is the whole input.
    None,
    /// The nominal feedback is part of the plant and the game controller adds
    /// a correction; `u` in the records is that correction.
    #[default]
    Nominal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub mode: ExperimentMode,
    pub lambda: f64,
    pub rollouts: usize,
    pub replan_every: usize,
    pub eval_runs: usize,
    pub sampling: Sampling,
    pub baseline: MitigationBaseline,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<ClosedLoopRecord>,
    pub crash: CrashReport,
    pub certificate: Option<GainCertificate>,
}

impl ExperimentOutcome {
    pub fn mean_kl(&self) -> f64 {
        crate::kl_attack::mean_kl_cost(&self.records)
    }

    pub fn min_ess(&self) -> Option<f64> {
        self.records.iter().filter_map(|r| r.min_ess()).reduce(f64::min)
    }

    /// `trajectories.csv`: `run_id, step, t, <state>, <u>, <theta>`.
    pub fn write_trajectories<S: Scenario + ?Sized, W: Write>(&self, scn: &S, mut w: W) -> std::io::Result<()> {
        write!(w, "run_id,step,t")?;
        for n in scn.state_names() {
            write!(w, ",{n}")?;
        }
        for n in scn.control_names() {
            write!(w, ",u_{n}")?;
        }
        for n in scn.control_names() {
            write!(w, ",theta_{n}")?;
        }
        writeln!(w)?;
        for (i, r) in self.records.iter().enumerate() {
            r.write_trajectory_rows(&mut w, i)?;
        }
        Ok(())
    }
}

/// Runs `spec.eval_runs` independent closed-loop realizations. Run `r` is
/// seeded from `(seed, r)` alone, so runs can be evaluated in any order.
pub fn run_experiment<S: Scenario + ?Sized>(scn: &S, spec: &ExperimentSpec, seed: &SeedSpec) -> Result<ExperimentOutcome> {
    let dynamics = scn.dynamics();
    let cost = scn.cost();
    let nominal = scn.nominal();
    let grid = scn.grid()?;
    let x0 = scn.x0();
    let m = dynamics.noise_dim();

    let records = match spec.mode {
        ExperimentMode::NoAttack | ExperimentMode::AttackOnly => {
            let run = |r: usize| {
                let run_seed = seed.derive(DOMAIN_RUN, r as u64);
                if spec.mode == ExperimentMode::NoAttack {
                    let hold = grid.steps.max(1);
                    run_receding(&dynamics, &cost, &grid, &x0, &nominal, hold, &run_seed, |_, _| {
                        Ok(Decision { control: None, bias: vec![0.0; m], ess: None })
                    })
                } else {
                    let cfg = AttackConfig {
                        lambda: spec.lambda,
                        rollouts_per_decision: spec.rollouts,
                        replan_every: spec.replan_every,
                        sampling: spec.sampling,
                    };
                    synthesize_attack(&dynamics, &cost, &grid, &x0, &nominal, &cfg, &run_seed)
                }
            };
            (run_all(spec.eval_runs, run)?, None)
        }
        ExperimentMode::Mitigate | ExperimentMode::Game(_) => {
            let mode = match spec.mode {
                ExperimentMode::Game(m) => m,
                _ => GameMode::BothPlay,
            };
            let points = scn.sample_points();
            match spec.baseline {
                MitigationBaseline::None => play_game(&dynamics, &cost, &grid, &x0, &points, spec, mode, seed)?,
                MitigationBaseline::Nominal => {
                    let plant = WithFeedback { plant: dynamics, feedback: nominal };
                    play_game(&plant, &cost, &grid, &x0, &points, spec, mode, seed)?
                }
            }
        }
    };
    let (records, certificate) = records;
    let crash = crash_probability(&records, scn);
    Ok(ExperimentOutcome { records, crash, certificate })
}

fn run_all(runs: usize, run: impl Fn(usize) -> Result<ClosedLoopRecord> + Sync) -> Result<Vec<ClosedLoopRecord>> {
    (0..runs)
        .into_par_iter()
        .map(|r| {
            run(r).map_err(|e| match e {
                Error::IntegrationDiverged { step, t, .. } => Error::IntegrationDiverged { trajectory: Some(r), step, t },
                other => other,
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn play_game<D: ControlAffineDynamics, C: CostModel>(
    dynamics: &D,
    cost: &C,
    grid: &TimeGrid,
    x0: &[f64],
    points: &[SamplePoint],
    spec: &ExperimentSpec,
    mode: GameMode,
    seed: &SeedSpec,
) -> Result<(Vec<ClosedLoopRecord>, Option<GainCertificate>)> {
    let cert = certify(dynamics, cost, points, spec.lambda);
    cert.require_valid()?;
    let cfg = GameConfig {
        rollouts_per_decision: spec.rollouts,
        replan_every: spec.replan_every,
        sampling: spec.sampling,
    };
    let records = run_all(spec.eval_runs, |r| {
        run_closed_loop_game(dynamics, cost, grid, x0, &cert, &cfg, &seed.derive(DOMAIN_RUN, r as u64), mode)
    })?;
    Ok((records, Some(cert)))
}
