//! Shared fixtures for the benchmarks.

use stealthpath::scenarios::{Scenario, UnicycleScenario};
use stealthpath::sde::{rollout_batch, RolloutOptions, SeedSpec, TrajectoryEnsemble, ZeroPolicy};

/// Unbiased unicycle rollouts under the nominal controller from the initial state.
pub fn unicycle_ensemble(count: usize, seed: u64) -> TrajectoryEnsemble {
    let s = UnicycleScenario::default();
    let grid = s.grid().expect("default grid");
    rollout_batch(&s.dynamics(), &s.cost(), &grid, &s.x0(), &s.nominal(), &ZeroPolicy(2), count, &SeedSpec::new(seed), RolloutOptions::default())
        .expect("nominal rollouts stay finite")
}
