use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use stealthpath::minimax::certify;
use stealthpath::scenarios::{run_experiment, ExperimentOutcome};
use stealthpath::stealth::{check_dominance, kl_bound_report, log_tau_grid, tradeoff_curve, write_curve_csv};
use stealthpath::validation::{run_validation, ValidationOptions};
use stealthpath::{DetectorSpec, Scenario, SeedSpec};

use crate::config::{ExperimentConfig, ModeKind, Overrides, ScenarioKind};
use crate::manifest::{DetectEcho, EssStats, RunManifest};
use crate::Failure;

fn create(dir: &Path, name: &str, manifest: &mut RunManifest) -> Result<BufWriter<File>, Failure> {
    manifest.outputs.push(name.to_string());
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn prepare_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))
}

fn write_outcome<S: Scenario>(
    scn: &S,
    outcome: &ExperimentOutcome,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    let mut w = create(dir, "trajectories.csv", manifest)?;
    outcome.write_trajectories(scn, &mut w)?;
    w.flush()?;
    let mut w = create(dir, "crash_report.csv", manifest)?;
    outcome.crash.write_csv(&mut w)?;
    w.flush()?;
    manifest.p_crash = Some(outcome.crash.p_crash);
    manifest.ess = EssStats::of(&outcome.records);
    println!("p_crash={} ({}/{})", outcome.crash.p_crash, outcome.crash.crashed, outcome.crash.total);
    Ok(())
}

fn synth_on<S: Scenario>(scn: &S, cfg: &ExperimentConfig, manifest: &mut RunManifest) -> Result<(), Failure> {
    let spec = cfg.experiment("synth", ModeKind::AttackOnly)?;
    let outcome = run_experiment(scn, &spec, &SeedSpec::new(cfg.master_seed))?;
    let dir = &cfg.output_dir;
    write_outcome(scn, &outcome, dir, manifest)?;
    let kl = outcome.mean_kl();
    let report = kl_bound_report(kl)?;
    let mut w = create(dir, "kl_report.txt", manifest)?;
    write!(w, "runs={}\n{}", outcome.records.len(), report.to_text())?;
    for (i, r) in outcome.records.iter().enumerate() {
        writeln!(w, "run_{i}_kl={}", r.kl_cost)?;
    }
    w.flush()?;
    manifest.mean_kl = Some(kl);
    println!("mean_kl={kl}");
    Ok(())
}

fn mitigate_on<S: Scenario>(scn: &S, cfg: &ExperimentConfig, manifest: &mut RunManifest) -> Result<(), Failure> {
    let spec = cfg.experiment("mitigate", ModeKind::Mitigate)?;
    let dir = &cfg.output_dir;
    let cert = certify(&scn.dynamics(), &scn.cost(), &scn.sample_points(), spec.lambda);
    let mut w = create(dir, "certificate.txt", manifest)?;
    w.write_all(cert.report().as_bytes())?;
    w.flush()?;
    manifest.certificate = Some(cert.clone());
    print!("{}", cert.report());
    cert.require_valid()?;
    let outcome = run_experiment(scn, &spec, &SeedSpec::new(cfg.master_seed))?;
    write_outcome(scn, &outcome, dir, manifest)
}

/// Runs `synth` or `mitigate`; the manifest is written even when the run
/// fails after the output directory exists.
pub fn experiment(command: &str, config: Option<&Path>, o: &Overrides) -> Result<(), Failure> {
    let start = std::time::Instant::now();
    let cfg = ExperimentConfig::load(config, o)?;
    prepare_dir(&cfg.output_dir)?;
    let mut manifest = RunManifest::new(command);
    manifest.config = Some(cfg.clone());
    let result = match (command, cfg.scenario) {
        ("synth", ScenarioKind::Cruise) => synth_on(&cfg.cruise, &cfg, &mut manifest),
        ("synth", _) => synth_on(&cfg.unicycle, &cfg, &mut manifest),
        (_, ScenarioKind::Cruise) => mitigate_on(&cfg.cruise, &cfg, &mut manifest),
        _ => mitigate_on(&cfg.unicycle, &cfg, &mut manifest),
    };
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(&cfg.output_dir)?;
    result
}

pub struct DetectOptions {
    pub k: Vec<usize>,
    pub sigma: f64,
    pub taus: Vec<f64>,
    pub tau_count: usize,
    pub tau_min: f64,
    pub tau_max: f64,
}

/// One `tau, alpha, beta` file per `K`: `curve.csv` for a single `K`,
/// otherwise `curve_k{K}.csv` each, plus a dominance summary of the largest
/// `K` over the smallest.
pub fn detect(opts: &DetectOptions, out: &Path) -> Result<(), Failure> {
    let start = std::time::Instant::now();
    if opts.k.is_empty() {
        return Err(Failure::Config("need at least one K".into()));
    }
    let taus = if opts.taus.is_empty() {
        if opts.tau_count == 0 || !(opts.tau_min > 0.0 && opts.tau_max >= opts.tau_min) {
            return Err(Failure::Config("tau grid needs tau_count >= 1 and 0 < tau_min <= tau_max".into()));
        }
        log_tau_grid(opts.tau_min, opts.tau_max, opts.tau_count)
    } else {
        opts.taus.clone()
    };
    let specs = opts.k.iter().map(|&k| DetectorSpec::new(k, opts.sigma)).collect::<stealthpath::Result<Vec<_>>>()?;
    let curves = specs.iter().map(|s| tradeoff_curve(s, &taus)).collect::<stealthpath::Result<Vec<_>>>()?;
    prepare_dir(out)?;
    let mut manifest = RunManifest::new("detect");
    manifest.detect = Some(DetectEcho { k: opts.k.clone(), sigma: opts.sigma, taus: taus.clone() });
    for (spec, curve) in specs.iter().zip(&curves) {
        let name = if specs.len() == 1 { "curve.csv".to_string() } else { format!("curve_k{}.csv", spec.k) };
        let mut w = create(out, &name, &mut manifest)?;
        write_curve_csv(curve, &mut w)?;
        w.flush()?;
    }
    if specs.len() > 1 {
        let (lo, hi) = specs.iter().fold((specs[0], specs[0]), |(lo, hi), s| {
            (if s.k < lo.k { *s } else { lo }, if s.k > hi.k { *s } else { hi })
        });
        let dom = check_dominance(&hi, &lo, &taus)?;
        let mut w = create(out, "dominance.txt", &mut manifest)?;
        writeln!(w, "better_k={}\nreference_k={}", hi.k, lo.k)?;
        writeln!(w, "compared={}\nworst_beta_gap={}\nworst_tau={}", dom.compared, dom.worst_gap, dom.worst_tau)?;
        writeln!(w, "dominates={}", dom.dominates(0.0))?;
        w.flush()?;
        println!("K={} dominates K={}: {}", hi.k, lo.k, dom.dominates(0.0));
    }
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok(())
}

fn wrong_gamma(xi: f64, lambda: f64) -> stealthpath::Result<f64> {
    Ok(xi * lambda / (lambda + xi))
}

pub fn validate(quick: bool, seed: u64, wrong_gamma_hook: bool, out: &Path) -> Result<(), Failure> {
    let start = std::time::Instant::now();
    let seed = SeedSpec::new(seed);
    let mut opts = if quick { ValidationOptions::quick(seed) } else { ValidationOptions::full(seed) };
    if wrong_gamma_hook {
        opts.gamma_fn = wrong_gamma;
    }
    let report = run_validation(&opts)?;
    prepare_dir(out)?;
    let mut manifest = RunManifest::new(if quick { "validate --quick" } else { "validate" });
    let mut w = create(out, "validation_report.txt", &mut manifest)?;
    w.write_all(report.to_text().as_bytes())?;
    w.flush()?;
    print!("{}", report.to_text());
    manifest.checks_passed = Some(report.passed());
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(out)?;
    let failed = report.failures().count();
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} validation check(s) failed")));
    }
    Ok(())
}

pub fn default_out(o: &Overrides, config: Option<&Path>) -> Result<PathBuf, Failure> {
    if let Some(p) = &o.out {
        return Ok(p.clone());
    }
    Ok(ExperimentConfig::load(config, o)?.output_dir)
}
