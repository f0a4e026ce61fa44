//! One `PASS`/`FAIL` line per acceptance criterion, written straight to the
//! process stdout so it shows without `--nocapture`.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use stealthpath::kl_attack::{estimate_bias, estimate_value, kl_cost};
use stealthpath::minimax::{certify, estimate_game_value, estimate_saddle_point};
use stealthpath::scenarios::{run_experiment, ExperimentMode, ExperimentSpec, LinearCostProblem, MitigationBaseline};
use stealthpath::sde::{FnCost, ScalarLinearDynamics, ZeroPolicy};
use stealthpath::stealth::{
    bh_bound, check_dominance, log_tau_grid, np_alpha, np_beta, pinsker_bound, regularized_gamma, simulate_np_rates,
};
use stealthpath::validation::{fk_problem, query_points, solve_fk};
use stealthpath::weights::tilt;
use stealthpath::*;

const SEED: u64 = 42;
const ROLLOUTS: usize = 2000;
const REPLAN: usize = 25;
const EVAL_RUNS: usize = 100;

fn report(id: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn rel(measured: f64, expected: f64) -> f64 {
    (measured - expected).abs() / expected.abs()
}

fn z_ensemble(p: &LinearCostProblem, x: f64, count: usize, dt: f64, seed: u64) -> TrajectoryEnsemble {
    let grid = TimeGrid::new(0.0, p.horizon, dt).unwrap();
    rollout_batch(&p.dynamics(), p, &grid, &[x], &ZeroPolicy(1), &ZeroPolicy(1), count, &SeedSpec::new(seed), RolloutOptions::default())
        .unwrap()
}

fn linear_attack() -> LinearCostProblem {
    LinearCostProblem { offset: 0.0, slope: 1.0, control_gain: 0.0, noise_gain: 1.0, control_weight: 1.0, horizon: 1.0 }
}

#[test]
fn criterion_1_analytic_value() {
    let start = Instant::now();
    let v = in_pool(1, || estimate_value(&z_ensemble(&linear_attack(), 0.0, 100_000, 1e-3, SEED), 1.0).unwrap());
    let secs = start.elapsed().as_secs_f64();
    let err = rel(v, 1.0 / 6.0);
    let pass = err <= 0.02 && secs <= 30.0;
    report("criterion 1 (analytic value)", pass, &format!("V = {v:.5} vs 1/6, rel err {err:.4} <= 0.02; {secs:.1} s <= 30 s on one thread"));
    assert!(pass);
}

#[test]
fn criterion_2_analytic_policies() {
    let attack = linear_attack();
    let theta = estimate_bias(&z_ensemble(&attack, 0.0, 100_000, 1e-3, SEED), 1.0, &attack.dynamics(), &[0.0], 0.0)
        .unwrap()
        .theta[0];
    // g = 1, r = 1/2 and ∂ₓV = a(T − t) = 1 give u* = −2.
    let game = LinearCostProblem { control_gain: 1.0, control_weight: 0.5, ..attack };
    let cert = certify(&game.dynamics(), &game, &game.sample_points(), 1.0);
    let sp = estimate_saddle_point(&z_ensemble(&game, 0.0, 100_000, 1e-3, SEED + 1), &cert, &game.dynamics(), &game, &[0.0], 0.0).unwrap();
    let (e_theta, e_u) = (rel(theta, 1.0), rel(sp.u_star[0], -2.0));
    let pass = cert.valid && e_theta <= 0.05 && e_u <= 0.05;
    report(
        "criterion 2 (analytic policies)",
        pass,
        &format!("theta = {theta:.4} vs 1 (rel {e_theta:.4}), u = {:.4} vs -2 (rel {e_u:.4}), both <= 0.05", sp.u_star[0]),
    );
    assert!(pass);
}

#[test]
fn criterion_3_feynman_kac() {
    let p = fk_problem();
    let attack = solve_fk(&p, 1.0, 6.0, 600).unwrap();
    let game = solve_fk(&p, -1.0, 6.0, 600).unwrap();
    let grid = TimeGrid::new(0.0, p.horizon, 2e-3).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in query_points(-1.5, 1.5, 10).into_iter().enumerate() {
        let ens = rollout_batch(&p.dynamics(), &p, &grid, &[x], &ZeroPolicy(1), &ZeroPolicy(1), 20_000, &SeedSpec::new(SEED).derive(7, i as u64), RolloutOptions::default())
            .unwrap();
        worst = worst.max(rel(estimate_value(&ens, 1.0).unwrap(), attack.attack_value(x, 1.0).unwrap()));
        worst = worst.max(rel(estimate_game_value(&ens, 1.0).unwrap(), game.game_value(x, 1.0).unwrap()));
    }
    let pass = worst <= 0.02;
    report("criterion 3 (Feynman-Kac)", pass, &format!("worst rel gap {worst:.4} <= 0.02 over 10 points, both signs"));
    assert!(pass);
}

#[test]
fn criterion_4_gain_identities() {
    let uni = UnicycleScenario::default();
    let cruise = CruiseScenario::default();
    let cases = [
        ("unicycle", certify(&uni.dynamics(), &uni.cost(), &uni.sample_points(), 0.1), 0.01, 0.001 / 0.09),
        ("cruise", certify(&cruise.dynamics(), &cruise.cost(), &cruise.sample_points(), 1.5), 0.02, 0.03 / 1.48),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, c, xi, gamma) in cases {
        let ok = c.valid && (c.xi - xi).abs() <= 1e-9 && (c.gamma - gamma).abs() <= 1e-9 && (c.alpha - gamma).abs() <= 1e-9;
        pass &= ok;
        detail.push(format!("{name} xi = {:.9}, gamma = {:.9}, alpha = {:.9}", c.xi, c.gamma, c.alpha));
    }
    assert!((0.03f64 / 1.48 - 0.020270).abs() < 5e-7);
    report("criterion 4 (gain identities)", pass, &format!("{} (tol 1e-9)", detail.join("; ")));
    assert!(pass);
}

fn spec(mode: ExperimentMode, lambda: f64) -> ExperimentSpec {
    ExperimentSpec {
        mode,
        lambda,
        rollouts: ROLLOUTS,
        replan_every: REPLAN,
        eval_runs: EVAL_RUNS,
        sampling: Sampling::Antithetic,
        baseline: MitigationBaseline::Nominal,
    }
}

fn p_crash<S: Scenario>(scn: &S, mode: ExperimentMode, lambda: f64) -> f64 {
    run_experiment(scn, &spec(mode, lambda), &SeedSpec::new(SEED)).unwrap().crash.p_crash
}

struct Trend {
    none: f64,
    weak: f64,
    strong: f64,
    mitigated: f64,
}

fn unicycle_trend() -> &'static Trend {
    static CELL: OnceLock<Trend> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = UnicycleScenario::default();
        Trend {
            none: p_crash(&s, ExperimentMode::NoAttack, 0.1),
            weak: p_crash(&s, ExperimentMode::AttackOnly, 2.0),
            strong: p_crash(&s, ExperimentMode::AttackOnly, 0.1),
            mitigated: p_crash(&s, ExperimentMode::Mitigate, 0.1),
        }
    })
}

#[test]
fn criterion_5_unicycle_trend() {
    let t = unicycle_trend();
    let legs = [
        ("no_attack <= 0.02", t.none <= 0.02),
        ("0.02 < p(lambda=2)", 0.02 < t.weak),
        ("p(lambda=2) < p(lambda=0.1)", t.weak < t.strong),
        ("p(lambda=0.1) >= 0.5", t.strong >= 0.5),
        ("mitigated <= 0.05", t.mitigated <= 0.05),
    ];
    let pass = legs.iter().all(|l| l.1);
    let failed: Vec<&str> = legs.iter().filter(|l| !l.1).map(|l| l.0).collect();
    report(
        "criterion 5 (unicycle trend)",
        pass,
        &format!(
            "no_attack = {:.2}, lambda=2: {:.2}, lambda=0.1: {:.2}, mitigated: {:.2}; failed legs: {failed:?}",
            t.none, t.weak, t.strong, t.mitigated
        ),
    );
    assert!(pass, "{failed:?}");
}

#[test]
fn criterion_6_cruise_trend() {
    let s = CruiseScenario::default();
    let none = p_crash(&s, ExperimentMode::NoAttack, 1.5);
    let strong = p_crash(&s, ExperimentMode::AttackOnly, 1.5);
    let weak = p_crash(&s, ExperimentMode::AttackOnly, 3.0);
    let mitigated = p_crash(&s, ExperimentMode::Mitigate, 1.5);
    let legs = [
        ("no_attack <= 0.02", none <= 0.02),
        ("p(lambda=1.5) >= 0.15", strong >= 0.15),
        ("0.15 > p(lambda=3)", 0.15 > weak),
        ("mitigated <= 0.05", mitigated <= 0.05),
    ];
    let pass = legs.iter().all(|l| l.1);
    let failed: Vec<&str> = legs.iter().filter(|l| !l.1).map(|l| l.0).collect();
    report(
        "criterion 6 (cruise trend)",
        pass,
        &format!("no_attack = {none:.2}, lambda=1.5: {strong:.2}, lambda=3: {weak:.2}, mitigated: {mitigated:.2}; failed legs: {failed:?}"),
    );
    assert!(pass, "{failed:?}");
}

#[test]
fn criterion_7_detector() {
    let taus = [0.25, 0.5, 1.0, 2.0, 4.0];
    let mut worst: f64 = 0.0;
    for k in [100, 200, 300] {
        let d = DetectorSpec::new(k, 1.1).unwrap();
        for r in simulate_np_rates(&d, &taus, 1_000_000, &SeedSpec::new(SEED)).unwrap() {
            worst = worst.max((r.alpha - np_alpha(&d, r.tau).unwrap()).abs());
            worst = worst.max((r.beta - np_beta(&d, r.tau).unwrap()).abs());
        }
    }
    let grid = log_tau_grid(1e-3, 1e3, 50);
    let dom = check_dominance(&DetectorSpec::new(300, 1.1).unwrap(), &DetectorSpec::new(100, 1.1).unwrap(), &grid).unwrap();
    let pass = worst <= 0.005 && dom.compared == 50 && dom.dominates(0.0);
    report(
        "criterion 7 (detector)",
        pass,
        &format!(
            "max |closed form - MC| = {worst:.5} <= 0.005 at 1e6 trials; K=300 over K=100 worst beta gap {:.3e} <= 0 on {} points",
            dom.worst_gap, dom.compared
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_properties() {
    let mut legs = Vec::new();

    let costs: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 * 0.37 - 50.0).collect();
    let w_err = [0.01, 1.0, 100.0]
        .iter()
        .map(|s| (tilt(&costs, 1.0 / s).unwrap().weights.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    legs.push(("weights sum to 1 within 1e-12", w_err <= 1e-12));

    let d = ScalarLinearDynamics { drift_coef: -0.5, control_gain: 1.0, noise_gain: 1.0 };
    let grid = TimeGrid::new(0.0, 1.0, 0.02).unwrap();
    let mut shift_err: f64 = 0.0;
    for (seed, shift) in [(1u64, 30.0), (2, -12.5), (3, 44.0)] {
        let base = FnCost::new(1.0, DMatrix::from_element(1, 1, 0.5), |_, x| x[0] + 0.3 * x[0] * x[0]);
        let moved = FnCost::new(1.0, DMatrix::from_element(1, 1, 0.5), move |_, x| shift + x[0] + 0.3 * x[0] * x[0]);
        let ens = |c: &FnCost| rollout_batch(&d, c, &grid, &[0.4], &ZeroPolicy(1), &ZeroPolicy(1), 256, &SeedSpec::new(seed), RolloutOptions::default()).unwrap();
        let (e0, e1) = (ens(&base), ens(&moved));
        let t0 = estimate_bias(&e0, 1.5, &d, &[0.4], 0.0).unwrap().theta[0];
        let t1 = estimate_bias(&e1, 1.5, &d, &[0.4], 0.0).unwrap().theta[0];
        let cert = certify(&d, &base, &[(0.0, vec![0.0]), (0.5, vec![1.0])], 2.0);
        let u0 = estimate_saddle_point(&e0, &cert, &d, &base, &[0.4], 0.0).unwrap().u_star[0];
        let u1 = estimate_saddle_point(&e1, &cert, &d, &moved, &[0.4], 0.0).unwrap().u_star[0];
        shift_err = shift_err.max((t0 - t1).abs()).max((u0 - u1).abs());
    }
    legs.push(("baseline shift moves theta, u by <= 1e-8", shift_err <= 1e-8));

    let s = UnicycleScenario { horizon: 1.0, ..Default::default() };
    let mut sp = spec(ExperimentMode::AttackOnly, 0.5);
    (sp.rollouts, sp.replan_every, sp.eval_runs) = (64, 10, 4);
    let run = |threads| in_pool(threads, || run_experiment(&s, &sp, &SeedSpec::new(SEED)).unwrap());
    let (a, b) = (run(1), run(3));
    let same = a.records.iter().zip(&b.records).all(|(x, y)| {
        x.states.iter().zip(&y.states).all(|(p, q)| p.to_bits() == q.to_bits())
            && x.bias_history.iter().zip(&y.bias_history).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    legs.push(("1 and 3 threads agree bitwise", same));

    let mut pq: f64 = 0.0;
    for a in [0.5, 50.0, 150.0] {
        for x in [0.1, 1.0, 49.0, 170.0] {
            let (p, q) = regularized_gamma(x, a).unwrap();
            pq = pq.max((p + q - 1.0).abs());
        }
    }
    legs.push(("P + Q = 1 within 1e-12", pq <= 1e-12));

    let exact = pinsker_bound(0.0).unwrap() == 1.0
        && pinsker_bound(0.5).unwrap() == 0.5
        && pinsker_bound(2.0).unwrap() == 0.0
        && bh_bound(0.0).unwrap() == 0.5;
    legs.push(("Pinsker/BH cases exact", exact));

    let hist: Vec<f64> = (0..500).flat_map(|_| [0.3, 0.4]).collect();
    let kl = kl_cost(&hist, 2, 0.01);
    legs.push(("kl of (0.3, 0.4) over T = 5 is 0.625 within 4 ulp", (kl - 0.625).abs() <= 4.0 * f64::EPSILON));

    let pass = legs.iter().all(|l| l.1);
    let failed: Vec<&str> = legs.iter().filter(|l| !l.1).map(|l| l.0).collect();
    report("criterion 8 (property suites)", pass, &format!("{} checks, kl = {kl:?}, failed: {failed:?}", legs.len()));
    assert!(pass, "{failed:?}");
}

#[test]
fn invariant_crash_ordering_gaps() {
    let t = unicycle_trend();
    let pass = t.strong - t.weak >= 0.05 && t.weak - t.none >= 0.05;
    report(
        "invariant (crash ordering, gaps >= 0.05)",
        pass,
        &format!("p(lambda=0.1) - p(lambda=2) = {:.2}, p(lambda=2) - no_attack = {:.2}", t.strong - t.weak, t.weak - t.none),
    );
    assert!(pass);
}

#[test]
fn invariant_mitigation_efficacy() {
    let t = unicycle_trend();
    let attacker_only = p_crash(&UnicycleScenario::default(), ExperimentMode::Game(GameMode::AttackerOnly), 0.1);
    let pass = t.mitigated <= 0.05 && attacker_only >= 0.5;
    report(
        "invariant (mitigation efficacy)",
        pass,
        &format!("both_play = {:.2} <= 0.05, attacker_only = {attacker_only:.2} >= 0.5", t.mitigated),
    );
    assert!(pass);
}
