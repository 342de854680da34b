//! Multi-arm, multi-seed sweeps. Arms are a base config plus overrides; each
//! (arm, seed) job trains and evaluates into its own run directory, and the
//! sweep root gets combined curve and summary tables.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};
use gaitspeed_core::config::{value_hash, ExperimentConfig};
use gaitspeed_core::evaluation::MetricsReport;
use gaitspeed_core::train::CurvePoint;
use gaitspeed_core::Error;
use serde::{Deserialize, Serialize};

use crate::exit_code;
use crate::output;
use crate::run::{output_root, read_config, run_dir, seeds_for, train_run};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    #[serde(default)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    /// Base config path, relative to the sweep file.
    pub base: PathBuf,
    pub arms: Vec<ArmSpec>,
    /// Seeds for every arm; falls back to the base config's seeds.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Overrides applied to every arm before its own.
    #[serde(default)]
    pub overrides: Vec<String>,
}

impl SweepSpec {
    pub fn from_path(path: &Path) -> Result<(Self, Vec<(ArmSpec, ExperimentConfig)>)> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let spec: SweepSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if spec.arms.is_empty() {
            return Err(Error::Config(format!("{}: sweep lists no arms", path.display())).into());
        }
        if spec.name.is_empty() || spec.name.contains(['/', '\\']) {
            return Err(Error::Config("sweep name must be a non-empty path component".into()).into());
        }
        let base = path.parent().unwrap_or_else(|| Path::new(".")).join(&spec.base);
        let mut arms = Vec::with_capacity(spec.arms.len());
        for arm in &spec.arms {
            if spec.arms.iter().filter(|a| a.name == arm.name).count() > 1 {
                return Err(Error::Config(format!("arm name `{}` is repeated", arm.name)).into());
            }
            let mut overrides = spec.overrides.clone();
            overrides.extend(arm.overrides.iter().cloned());
            overrides.push(format!("name={}", arm.name));
            let config = read_config(&base, &overrides).with_context(|| format!("arm `{}`", arm.name))?;
            arms.push((arm.clone(), config));
        }
        Ok((spec, arms))
    }
}

/// Status of one (arm, seed) job in the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub arm: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub ok: bool,
    pub error: Option<String>,
    pub exit_code: u8,
    pub success_rate_all: Option<f64>,
    pub success_rate: Option<f64>,
    pub episodes_retained: Option<usize>,
    pub t_mean: Option<f64>,
    pub omega_mean: Option<f64>,
    pub omega_std: Option<f64>,
    pub spearman_t_td: Option<f64>,
}

impl JobSummary {
    fn new(arm: &str, seed: u64, dir: &Path, report: Option<&MetricsReport>, error: Option<&anyhow::Error>) -> Self {
        JobSummary {
            arm: arm.to_string(),
            seed,
            dir: dir.to_path_buf(),
            ok: error.is_none(),
            error: error.map(|e| format!("{e:#}")),
            exit_code: error.map_or(0, exit_code),
            success_rate_all: report.map(|r| r.success_rate_all),
            success_rate: report.map(|r| r.success_rate),
            episodes_retained: report.map(|r| r.episodes_retained),
            t_mean: report.and_then(|r| r.overall_t.map(|s| s.mean)),
            omega_mean: report.and_then(|r| r.overall_omega.map(|s| s.mean)),
            omega_std: report.and_then(|r| r.overall_omega.map(|s| s.std)),
            spearman_t_td: report.and_then(|r| r.spearman_t_td),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub name: String,
    pub spec_hash: String,
    pub source_hash: String,
    pub jobs: Vec<JobSummary>,
}

struct JobOutput {
    summary: JobSummary,
    curves: Vec<CurvePoint>,
}

pub fn default_jobs() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    (cores / 2).max(1)
}

/// Runs every job, writes the combined tables under `<root>/<sweep name>`,
/// and returns the summary. Failed jobs are recorded, not fatal.
pub fn run_sweep(path: &Path, out: Option<&Path>, jobs: usize, verbose: bool) -> Result<SweepSummary> {
    let (spec, arms) = SweepSpec::from_path(path)?;
    let root = output_root(&arms[0].1, out).join(&spec.name);
    let spec_hash = value_hash(&serde_json::to_value(&spec)?);

    let mut queue = VecDeque::new();
    for (index, (arm, config)) in arms.iter().enumerate() {
        for seed in seeds_for(config, &spec.seeds) {
            queue.push_back((index, arm.name.clone(), seed));
        }
    }
    let queue = Mutex::new(queue);
    let results: Mutex<Vec<(usize, JobOutput)>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let Some((index, arm, seed)) = queue.lock().expect("queue lock").pop_front() else {
                    break;
                };
                let config = &arms[index].1;
                let dir = run_dir(&root, &arm, seed);
                let every = (config.updates / 10).max(1);
                let outcome = train_run(config, seed, &dir, true, |p| {
                    if verbose && (p.update % every == 0 || p.update == config.updates) {
                        eprintln!(
                            "[{arm} seed{seed}] update {}/{} success {:.3} T {:.2}",
                            p.update, config.updates, p.success_rate, p.mean_t
                        );
                    }
                });
                let output = match outcome {
                    Ok(o) => JobOutput {
                        summary: JobSummary::new(&arm, seed, &dir, o.report.as_ref(), None),
                        curves: o.curves,
                    },
                    Err(e) => {
                        if verbose {
                            eprintln!("[{arm} seed{seed}] failed: {e:#}");
                        }
                        JobOutput {
                            summary: JobSummary::new(&arm, seed, &dir, None, Some(&e)),
                            curves: Vec::new(),
                        }
                    }
                };
                results.lock().expect("results lock").push((index, output));
            });
        }
    });

    let mut results = results.into_inner().expect("results lock");
    results.sort_by(|(ia, a), (ib, b)| (ia, a.summary.seed).cmp(&(ib, b.summary.seed)));
    write_combined_curves(&root.join("sweep_curves.csv"), &spec_hash, &arms, &results)?;
    write_summary_csv(&root.join("sweep_summary.csv"), &spec_hash, &results)?;
    let summary = SweepSummary {
        name: spec.name.clone(),
        spec_hash,
        source_hash: output::SOURCE_HASH.into(),
        jobs: results.into_iter().map(|(_, r)| r.summary).collect(),
    };
    output::write_json(&root.join("summary.json"), &summary)?;
    Ok(summary)
}

fn min_mean_max(values: &[f64]) -> [f64; 3] {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    [min, mean, max]
}

fn write_combined_curves(
    path: &Path,
    hash: &str,
    arms: &[(ArmSpec, ExperimentConfig)],
    results: &[(usize, JobOutput)],
) -> Result<()> {
    fs::create_dir_all(path.parent().expect("sweep root"))?;
    let mut file = fs::File::create(path)?;
    use std::io::Write;
    writeln!(file, "# config_hash={hash}")?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["arm".to_string(), "update".into(), "env_steps".into(), "seeds".into()];
    for metric in ["success_rate", "mean_T", "mean_reward"] {
        for stat in ["min", "mean", "max"] {
            header.push(format!("{metric}_{stat}"));
        }
    }
    w.write_record(&header)?;
    for (index, (arm, _)) in arms.iter().enumerate() {
        let runs: Vec<&Vec<CurvePoint>> = results
            .iter()
            .filter(|(i, r)| *i == index && r.summary.ok)
            .map(|(_, r)| &r.curves)
            .collect();
        let Some(len) = runs.iter().map(|c| c.len()).min() else {
            continue;
        };
        for k in 0..len {
            let point = runs[0][k];
            let mut row = vec![
                arm.name.clone(),
                point.update.to_string(),
                point.env_steps.to_string(),
                runs.len().to_string(),
            ];
            let metrics: [fn(&CurvePoint) -> f64; 3] = [|p| p.success_rate, |p| p.mean_t, |p| p.mean_reward];
            for metric in metrics {
                // NaN (no finished episodes yet) propagates into the mean.
                let values: Vec<f64> = runs.iter().map(|c| metric(&c[k])).collect();
                row.extend(min_mean_max(&values).iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_summary_csv(path: &Path, hash: &str, results: &[(usize, JobOutput)]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    use std::io::Write;
    writeln!(file, "# config_hash={hash}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "arm",
        "seed",
        "status",
        "success_rate_all",
        "success_rate",
        "episodes_retained",
        "T_mean",
        "omega_mean",
        "omega_std",
        "spearman_T_Td",
    ])?;
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (_, r) in results {
        let s = &r.summary;
        w.write_record([
            s.arm.clone(),
            s.seed.to_string(),
            if s.ok { "ok".into() } else { format!("failed({})", s.exit_code) },
            o(s.success_rate_all),
            o(s.success_rate),
            s.episodes_retained.map(|n| n.to_string()).unwrap_or_default(),
            o(s.t_mean),
            o(s.omega_mean),
            o(s.omega_std),
            o(s.spearman_t_td),
        ])?;
    }
    w.flush()?;
    Ok(())
}
