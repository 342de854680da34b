//! CSV and JSON artifacts. Every CSV starts with a `# config_hash=` comment
//! line so a table can always be traced back to the config that made it.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use gaitspeed_core::evaluation::{EpisodeResult, GroupStats, MetricsReport, Stats};
use gaitspeed_core::train::{CurvePoint, CURVE_COLUMNS};
use serde::Serialize;

pub const SOURCE_HASH: &str = env!("GAITSPEED_SOURCE_HASH");

fn csv_writer(path: &Path, config_hash: &str) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "# config_hash={config_hash}")?;
    Ok(csv::Writer::from_writer(file))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_curves(path: &Path, config_hash: &str, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv_writer(path, config_hash)?;
    w.write_record(CURVE_COLUMNS)?;
    for p in points {
        w.write_record([
            p.update.to_string(),
            p.env_steps.to_string(),
            p.success_rate.to_string(),
            p.mean_t.to_string(),
            p.mean_reward.to_string(),
            p.clip_fraction.to_string(),
            p.kl.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_episodes(path: &Path, config_hash: &str, episodes: &[EpisodeResult]) -> Result<()> {
    let mut w = csv_writer(path, config_hash)?;
    w.write_record(["index", "seed", "success", "dropped", "theta_0", "T", "omega", "omega_d", "T_d", "H_exp"])?;
    for e in episodes {
        w.write_record([
            e.index.to_string(),
            e.seed.to_string(),
            e.success.to_string(),
            e.dropped.to_string(),
            e.theta_0.to_string(),
            opt(e.t),
            opt(e.omega),
            e.omega_d.to_string(),
            e.t_d.to_string(),
            e.h_exp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn stats_fields(s: Option<Stats>) -> [String; 6] {
    match s {
        Some(s) => [
            s.count.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
            s.median.to_string(),
            s.p5.to_string(),
            s.p95.to_string(),
        ],
        None => ["0".into(), String::new(), String::new(), String::new(), String::new(), String::new()],
    }
}

pub fn write_groups(path: &Path, config_hash: &str, groups: &[GroupStats]) -> Result<()> {
    let mut w = csv_writer(path, config_hash)?;
    let mut header = vec!["key".to_string()];
    for metric in ["T", "omega"] {
        for stat in ["count", "mean", "std", "median", "p5", "p95"] {
            header.push(format!("{metric}_{stat}"));
        }
    }
    w.write_record(&header)?;
    for g in groups {
        let mut row = vec![g.key.to_string()];
        row.extend(stats_fields(g.t));
        row.extend(stats_fields(g.omega));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Retained episodes only: target speed, achieved speed, initial angle.
pub fn write_scatter(path: &Path, config_hash: &str, retained: &[EpisodeResult]) -> Result<()> {
    let mut w = csv_writer(path, config_hash)?;
    w.write_record(["omega_d", "omega", "theta_0"])?;
    for e in retained {
        w.write_record([e.omega_d.to_string(), opt(e.omega), e.theta_0.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportFile<'a> {
    pub config_hash: &'a str,
    pub source_hash: &'a str,
    pub checkpoint_seed: u64,
    pub eval_seed: u64,
    pub min_theta_0: f64,
    pub drop_failures: bool,
    pub discarded_fraction: f64,
    #[serde(flatten)]
    pub metrics: &'a MetricsReport,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
