//! Training and evaluation of a single (config, seed) run directory.
//!
//! A run directory holds `config.json` (the exact config trained, seeds
//! narrowed to the one seed), `run.json`, the checkpoints, `curves.csv` and,
//! after evaluation, an `eval/` directory with the reports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gaitspeed_core::checkpoint::{load_estimator, load_policy, save_estimator, save_policy, RunInfo};
use gaitspeed_core::config::{EvalSpec, ExperimentConfig, Scheme};
use gaitspeed_core::evaluation::{filter_episodes, run_eval, summarize, EvalPolicy, EvalRequest, MetricsReport};
use gaitspeed_core::train::{CurvePoint, Trainer};
use gaitspeed_core::Error;
use serde::{Deserialize, Serialize};

use crate::output::{self, ReportFile, SOURCE_HASH};
use crate::overrides::config_with_overrides;

pub const OUT_ENV: &str = "GAITSPEED_OUT";
pub const CONFIG_FILE: &str = "config.json";
pub const POLICY_FILE: &str = "policy.json";
pub const ESTIMATOR_FILE: &str = "estimator.json";

/// Output root: explicit flag, then `GAITSPEED_OUT`, then the config's
/// `output_dir`, then `out`.
pub fn output_root(config: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config
        .output_dir
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn run_dir(root: &Path, name: &str, seed: u64) -> PathBuf {
    root.join(name).join(format!("seed{seed}"))
}

/// Seeds from the command line, else the config's list, else seed 1.
pub fn seeds_for(config: &ExperimentConfig, requested: &[u64]) -> Vec<u64> {
    if !requested.is_empty() {
        requested.to_vec()
    } else if !config.seeds.is_empty() {
        config.seeds.clone()
    } else {
        vec![1]
    }
}

pub fn read_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(config_with_overrides(&text, overrides).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub source_hash: String,
    pub version: String,
    pub updates: usize,
    pub env_steps: u64,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub curves: Vec<CurvePoint>,
    pub report: Option<MetricsReport>,
}

/// Trains one seed into `dir`, then evaluates with the config's eval spec
/// when `evaluate` is set.
pub fn train_run(
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    evaluate: bool,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<RunOutcome> {
    let mut snapshot = config.clone();
    snapshot.seeds = vec![seed];
    let config_hash = snapshot.config_hash();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    output::write_json(&dir.join(CONFIG_FILE), &snapshot)?;

    let mut trainer = Trainer::new(&snapshot, seed)?;
    let curves = trainer.run(&mut progress)?;
    let outcome = trainer.into_outcome(curves);
    let info = RunInfo {
        config_hash: config_hash.clone(),
        seed,
        updates: snapshot.updates,
        scheme: snapshot.scheme,
        conditioning: snapshot.conditioning,
    };
    save_policy(&dir.join(POLICY_FILE), &outcome.agent, &info)?;
    if let Some(est) = &outcome.estimator {
        save_estimator(&dir.join(ESTIMATOR_FILE), est, &info)?;
    }
    output::write_curves(&dir.join("curves.csv"), &config_hash, &outcome.curves)?;
    output::write_json(
        &dir.join("run.json"),
        &RunRecord {
            name: snapshot.name.clone(),
            seed,
            config_hash: config_hash.clone(),
            source_hash: SOURCE_HASH.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            updates: snapshot.updates,
            env_steps: outcome.curves.last().map_or(0, |p| p.env_steps),
        },
    )?;
    let report = if evaluate {
        Some(evaluate_run(dir, &snapshot.eval, None, &dir.join("eval"))?)
    } else {
        None
    };
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        config_hash,
        curves: outcome.curves,
        report,
    })
}

/// Accepts a run directory or a path to its policy manifest.
pub fn resolve_run_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    } else {
        path.to_path_buf()
    }
}

/// Evaluates the checkpoint in `run` and writes the reports into `out`.
/// `scheme` defaults to the scheme the run was trained with.
pub fn evaluate_run(run: &Path, spec: &EvalSpec, scheme: Option<Scheme>, out: &Path) -> Result<MetricsReport> {
    spec.validate()?;
    let config = read_config(&run.join(CONFIG_FILE), &[])?;
    let config_hash = config.config_hash();
    let (agent, manifest) = load_policy(&run.join(POLICY_FILE))?;
    if manifest.config_hash != config_hash {
        return Err(Error::Compatibility(format!(
            "{} was trained under config {} but {} hashes to {config_hash}",
            POLICY_FILE, manifest.config_hash, CONFIG_FILE
        ))
        .into());
    }
    let estimator_path = run.join(ESTIMATOR_FILE);
    let estimator = if estimator_path.exists() {
        Some(load_estimator(&estimator_path)?.0)
    } else {
        None
    };
    let policy = EvalPolicy {
        agent: &agent,
        estimator: estimator.as_ref(),
        trained_scheme: manifest.scheme,
        conditioning: manifest.conditioning,
        env: &config.env,
        mode: config.mode,
    };
    let request = EvalRequest {
        scheme: scheme.unwrap_or(manifest.scheme),
        episodes: spec.episodes,
        omega_d_law: spec.omega_d_law,
        h_exp_law: spec.h_exp_law,
        seed: spec.seed,
    };
    let results = run_eval(&policy, &request)?;
    let filtered = filter_episodes(&results, spec.min_theta_0, spec.drop_failures);
    let report = summarize(&results, &filtered.kept, spec.grouping)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    output::write_episodes(&out.join("episodes.csv"), &config_hash, &results)?;
    output::write_groups(&out.join("groups.csv"), &config_hash, &report.groups)?;
    output::write_scatter(&out.join("scatter.csv"), &config_hash, &filtered.kept)?;
    output::write_json(
        &out.join("report.json"),
        &ReportFile {
            config_hash: &config_hash,
            source_hash: SOURCE_HASH,
            checkpoint_seed: manifest.seed,
            eval_seed: spec.seed,
            min_theta_0: spec.min_theta_0,
            drop_failures: spec.drop_failures,
            discarded_fraction: filtered.discarded_fraction,
            metrics: &report,
        },
    )?;
    Ok(report)
}

/// One-line human summary of a report.
pub fn describe_report(report: &MetricsReport) -> String {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    format!(
        "success {:.3} ({}/{}), retained {}, mean T {} s, mean omega {} rad/s, spearman(T, T_d) {}",
        report.success_rate_all,
        report.successes_all,
        report.episodes_all,
        report.episodes_retained,
        fmt(report.overall_t.map(|s| s.mean)),
        fmt(report.overall_omega.map(|s| s.mean)),
        fmt(report.spearman_t_td),
    )
}
