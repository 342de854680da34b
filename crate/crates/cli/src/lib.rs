//! Library side of the `gaitspeed` command: config overrides, run
//! directories, report files and sweeps. `main.rs` only parses arguments.

pub mod output;
pub mod overrides;
pub mod run;
pub mod sweep;

use std::path::Path;

use anyhow::Result;
use gaitspeed_core::checkpoint::read_manifest;
use gaitspeed_core::so3::discretized_goal_set;
use gaitspeed_core::{EnvError, Error};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_COMPATIBILITY: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// Exit status for an error, from the first library error in its chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Usage(_) | Error::Env(EnvError::Config(_)) => EXIT_CONFIG,
                Error::Compatibility(_) => EXIT_COMPATIBILITY,
                Error::Numerical(_) | Error::EstimatorDivergence(_) => EXIT_NUMERICAL,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

/// Goal rotations as `w,x,y,z` CSV lines with a header.
pub fn goal_set_csv(step: f64) -> Result<String> {
    let goals = discretized_goal_set(step).map_err(|e| Error::Usage(e.to_string()))?;
    let mut out = String::from("w,x,y,z\n");
    for g in goals {
        let [w, x, y, z] = g.to_array();
        out.push_str(&format!("{w},{x},{y},{z}\n"));
    }
    Ok(out)
}

/// Pretty-printed manifests: a single manifest file, or every checkpoint
/// manifest found in a run directory.
pub fn inspect(path: &Path) -> Result<String> {
    let files = if path.is_dir() {
        [run::POLICY_FILE, run::ESTIMATOR_FILE]
            .iter()
            .map(|f| path.join(f))
            .filter(|p| p.exists())
            .collect::<Vec<_>>()
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Usage(format!("no checkpoint manifest under {}", path.display())).into());
    }
    let mut out = String::new();
    for file in files {
        let manifest = read_manifest(&file)?;
        out.push_str(&serde_json::to_string_pretty(&manifest)?);
        out.push('\n');
    }
    Ok(out)
}
