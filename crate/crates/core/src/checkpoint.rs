//! Checkpoint and trajectory files.
//!
//! A checkpoint is a JSON manifest next to a raw blob of little-endian `f32`
//! values. Policies and estimators share the container and differ in the
//! manifest's `kind` tag.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Scheme;
use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorConfig};
use crate::nn::{GruLayout, MlpLayout, RunningMeanStd};
use crate::ppo::{ActionMode, ActorCritic, ConditioningMode};

pub const CHECKPOINT_FORMAT: &str = "gaitspeed-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network description stored in the manifest, tagged by checkpoint type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Blob: policy parameters (MLP then log-std), value parameters,
    /// normalizer mean, normalizer variance.
    Policy {
        policy_layout: MlpLayout,
        value_layout: MlpLayout,
        obs_norm_count: f64,
        obs_norm_clip: f64,
        action_mode: ActionMode,
        #[serde(default = "unit_scale")]
        residual_scale: f64,
    },
    /// Blob: recurrent parameters then head parameters.
    Estimator {
        gru: GruLayout,
        config: EstimatorConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub config_hash: String,
    pub seed: u64,
    pub updates: usize,
    pub scheme: Scheme,
    pub conditioning: ConditioningMode,
    pub blob: String,
    pub blob_len: usize,
    pub blob_sha256: String,
}

/// Identity fields shared by every checkpoint written for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub config_hash: String,
    pub seed: u64,
    pub updates: usize,
    pub scheme: Scheme,
    pub conditioning: ConditioningMode,
}

impl Manifest {
    pub fn kind(&self) -> &'static str {
        match self.architecture {
            Architecture::Policy { .. } => "policy",
            Architecture::Estimator { .. } => "estimator",
        }
    }

    pub fn run_info(&self) -> RunInfo {
        RunInfo {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            updates: self.updates,
            scheme: self.scheme,
            conditioning: self.conditioning,
        }
    }
}

pub fn f32_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn f32_le_values(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Compatibility(format!(
            "blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn unit_scale() -> f64 {
    1.0
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

fn write_checkpoint(path: &Path, architecture: Architecture, info: &RunInfo, values: &[f64]) -> Result<()> {
    let bytes = f32_le_bytes(values);
    let blob = blob_path(path);
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        architecture,
        config_hash: info.config_hash.clone(),
        seed: info.seed,
        updates: info.updates,
        scheme: info.scheme,
        conditioning: info.conditioning,
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Usage(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        blob_len: values.len(),
        blob_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob, &bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Compatibility(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "{}: unsupported checkpoint format {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

fn read_checkpoint(path: &Path) -> Result<(Manifest, Vec<f64>)> {
    let manifest = read_manifest(path)?;
    let blob = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob)?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.blob_sha256 {
        return Err(Error::Compatibility(format!(
            "{}: checksum mismatch",
            blob.display()
        )));
    }
    let values = f32_le_values(&bytes)?;
    if values.len() != manifest.blob_len {
        return Err(Error::Compatibility(format!(
            "{}: expected {} values, found {}",
            blob.display(),
            manifest.blob_len,
            values.len()
        )));
    }
    Ok((manifest, values))
}

/// Writes `path` (manifest) and `path` with a `.bin` extension (blob).
pub fn save_policy(path: &Path, agent: &ActorCritic, info: &RunInfo) -> Result<()> {
    let architecture = Architecture::Policy {
        policy_layout: agent.policy_layout.clone(),
        value_layout: agent.value_layout.clone(),
        obs_norm_count: agent.obs_norm.count,
        obs_norm_clip: agent.obs_norm.clip,
        action_mode: agent.action_mode,
        residual_scale: agent.residual_scale,
    };
    let values: Vec<f64> = agent
        .policy
        .iter()
        .chain(&agent.value)
        .chain(&agent.obs_norm.mean)
        .chain(&agent.obs_norm.var)
        .copied()
        .collect();
    write_checkpoint(path, architecture, info, &values)
}

pub fn load_policy(path: &Path) -> Result<(ActorCritic, Manifest)> {
    let (manifest, values) = read_checkpoint(path)?;
    let Architecture::Policy {
        policy_layout,
        value_layout,
        obs_norm_count,
        obs_norm_clip,
        action_mode,
        residual_scale,
    } = manifest.architecture.clone()
    else {
        return Err(Error::Compatibility(format!(
            "{}: expected a policy checkpoint, found {}",
            path.display(),
            manifest.kind()
        )));
    };
    let n_policy = policy_layout.param_count() + policy_layout.output_dim();
    let n_value = value_layout.param_count();
    let obs = policy_layout.input_dim();
    if value_layout.input_dim() != obs || values.len() != n_policy + n_value + 2 * obs {
        return Err(Error::Compatibility(format!(
            "{}: blob does not match the declared architecture",
            path.display()
        )));
    }
    let (policy, rest) = values.split_at(n_policy);
    let (value, rest) = rest.split_at(n_value);
    let (mean, var) = rest.split_at(obs);
    let agent = ActorCritic {
        policy_layout,
        value_layout,
        policy: policy.to_vec(),
        value: value.to_vec(),
        obs_norm: RunningMeanStd {
            mean: mean.to_vec(),
            var: var.to_vec(),
            count: obs_norm_count,
            clip: obs_norm_clip,
        },
        action_mode,
        residual_scale,
    };
    Ok((agent, manifest))
}

pub fn save_estimator(path: &Path, estimator: &Estimator, info: &RunInfo) -> Result<()> {
    let architecture = Architecture::Estimator {
        gru: estimator.gru.clone(),
        config: estimator.config.clone(),
    };
    write_checkpoint(path, architecture, info, &estimator.params)
}

pub fn load_estimator(path: &Path) -> Result<(Estimator, Manifest)> {
    let (manifest, values) = read_checkpoint(path)?;
    let Architecture::Estimator { gru, config } = manifest.architecture.clone() else {
        return Err(Error::Compatibility(format!(
            "{}: expected an estimator checkpoint, found {}",
            path.display(),
            manifest.kind()
        )));
    };
    let probe = Estimator {
        gru,
        config,
        params: Vec::new(),
    };
    let expected = probe.param_count();
    if values.len() != expected {
        return Err(Error::Compatibility(format!(
            "{}: blob has {} values, architecture needs {expected}",
            path.display(),
            values.len()
        )));
    }
    Ok((
        Estimator {
            params: values,
            ..probe
        },
        manifest,
    ))
}

/// One named field of a trajectory record and its per-record shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryField {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TrajectoryField {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        TrajectoryField {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sidecar describing a trajectory record stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub fields: Vec<TrajectoryField>,
    pub records: usize,
    pub seed: u64,
    pub config_hash: String,
    pub data: String,
}

impl TrajectoryManifest {
    pub fn record_len(&self) -> usize {
        self.fields.iter().map(TrajectoryField::len).sum()
    }
}

/// Accumulates fixed-layout records and writes them as `f32` LE plus a JSON
/// sidecar.
#[derive(Debug, Clone)]
pub struct TrajectoryWriter {
    fields: Vec<TrajectoryField>,
    record_len: usize,
    data: Vec<u8>,
    records: usize,
}

impl TrajectoryWriter {
    pub fn new(fields: Vec<TrajectoryField>) -> Self {
        let record_len = fields.iter().map(TrajectoryField::len).sum();
        TrajectoryWriter {
            fields,
            record_len,
            data: Vec::new(),
            records: 0,
        }
    }

    pub fn push(&mut self, record: &[f64]) -> Result<()> {
        if record.len() != self.record_len {
            return Err(Error::Usage(format!(
                "trajectory record has {} values, layout needs {}",
                record.len(),
                self.record_len
            )));
        }
        self.data.extend(f32_le_bytes(record));
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> usize {
        self.records
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn finish(self, stem: &Path, seed: u64, config_hash: &str) -> Result<TrajectoryManifest> {
        let data = stem.with_extension("bin");
        let manifest = TrajectoryManifest {
            fields: self.fields,
            records: self.records,
            seed,
            config_hash: config_hash.into(),
            data: data
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Usage(format!("bad trajectory path {}", stem.display())))?
                .to_string(),
        };
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&data, &self.data)?;
        fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// Reads a trajectory written by [`TrajectoryWriter::finish`]; returns the
/// sidecar and one vector per record.
pub fn read_trajectory(stem: &Path) -> Result<(TrajectoryManifest, Vec<Vec<f64>>)> {
    let manifest: TrajectoryManifest =
        serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let dir = stem.parent().unwrap_or_else(|| Path::new("."));
    let values = f32_le_values(&fs::read(dir.join(&manifest.data))?)?;
    let width = manifest.record_len();
    if values.len() != width * manifest.records {
        return Err(Error::Compatibility(format!(
            "{}: expected {} records of {width} values",
            stem.display(),
            manifest.records
        )));
    }
    let records = if width == 0 {
        vec![Vec::new(); manifest.records]
    } else {
        values.chunks(width).map(<[f64]>::to_vec).collect()
    };
    Ok((manifest, records))
}
