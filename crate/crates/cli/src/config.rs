use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stealthpath::scenarios::{ExperimentMode, ExperimentSpec, MitigationBaseline};
use stealthpath::{CruiseScenario, GameMode, Sampling, UnicycleScenario};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[default]
    Unicycle,
    Cruise,
    Analytic1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    NoAttack,
    AttackOnly,
    Mitigate,
    Game,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    /// Defaults to `attack_only` for `synth` and `mitigate` for `mitigate`.
    pub mode: Option<ModeKind>,
    /// Active players when `mode = "game"`.
    pub game_mode: GameMode,
    pub lambda: f64,
    pub rollouts: usize,
    /// Overrides the scenario's step when set.
    pub dt: Option<f64>,
    pub replan_every: usize,
    pub eval_runs: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub sampling: Sampling,
    pub mitigation_baseline: MitigationBaseline,
    pub unicycle: UnicycleScenario,
    pub cruise: CruiseScenario,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Unicycle,
            mode: None,
            game_mode: GameMode::BothPlay,
            lambda: 0.1,
            rollouts: 2000,
            dt: None,
            replan_every: 25,
            eval_runs: 100,
            master_seed: 42,
            output_dir: PathBuf::from("out"),
            sampling: Sampling::Antithetic,
            mitigation_baseline: MitigationBaseline::Nominal,
            unicycle: UnicycleScenario::default(),
            cruise: CruiseScenario::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub rollouts: Option<usize>,
    pub dt: Option<f64>,
    pub quick: bool,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if o.quick {
            cfg.rollouts = cfg.rollouts.min(200);
            cfg.eval_runs = cfg.eval_runs.min(10);
        }
        if let Some(s) = o.seed {
            cfg.master_seed = s;
        }
        if let Some(d) = &o.out {
            cfg.output_dir = d.clone();
        }
        if let Some(n) = o.rollouts {
            cfg.rollouts = n;
        }
        if o.dt.is_some() {
            cfg.dt = o.dt;
        }
        if let Some(dt) = cfg.dt {
            cfg.unicycle.dt = dt;
            cfg.cruise.dt = dt;
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), Failure> {
        let bad = |field: &str, v: String| Err(Failure::Config(format!("{field} must be positive, got {v}")));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda.to_string());
        }
        if self.rollouts < 2 {
            return Err(Failure::Config(format!("rollouts must be at least 2, got {}", self.rollouts)));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad("dt", dt.to_string());
            }
        }
        if self.replan_every == 0 {
            return bad("replan_every", "0".into());
        }
        if self.eval_runs == 0 {
            return bad("eval_runs", "0".into());
        }
        Ok(())
    }

    /// The experiment to run for `command`, whose default mode is `default`.
    pub fn experiment(&self, command: &str, default: ModeKind) -> Result<ExperimentSpec, Failure> {
        let kind = self.mode.unwrap_or(default);
        let attack_side = matches!(default, ModeKind::NoAttack | ModeKind::AttackOnly);
        if attack_side != matches!(kind, ModeKind::NoAttack | ModeKind::AttackOnly) {
            return Err(Failure::Config(format!("mode {kind:?} is not run by `{command}`")));
        }
        if self.scenario == ScenarioKind::Analytic1d {
            return Err(Failure::Config(format!("scenario analytic_1d is only used by `validate`, not `{command}`")));
        }
        let mode = match kind {
            ModeKind::NoAttack => ExperimentMode::NoAttack,
            ModeKind::AttackOnly => ExperimentMode::AttackOnly,
            ModeKind::Mitigate => ExperimentMode::Mitigate,
            ModeKind::Game => ExperimentMode::Game(self.game_mode),
        };
        Ok(ExperimentSpec {
            mode,
            lambda: self.lambda,
            rollouts: self.rollouts,
            replan_every: self.replan_every,
            eval_runs: self.eval_runs,
            sampling: self.sampling,
            baseline: self.mitigation_baseline,
        })
    }
}
