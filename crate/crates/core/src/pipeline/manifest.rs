//! Versioned, timestamp-free run manifests.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::RunConfig;
use crate::backbone::TapAddress;
use crate::error::{Error, Result};
use crate::traj::optimize::FiringRecord;
use crate::traj::GridBox;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "run.json";

/// FNV-1a 64 digest, hex encoded.
pub fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory.
    pub path: String,
    pub digest: String,
}

/// Effective values of the method's headline hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub train_steps: usize,
    pub sampling_steps: usize,
    pub t_alpha: usize,
    pub patch_size: usize,
    pub pca_dim: usize,
    pub lr: f64,
    pub opt_every: usize,
    pub opt_threshold: usize,
    pub inner_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub countdown: usize,
    pub t: usize,
    pub injected: bool,
    pub optimized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub group: usize,
    pub frame: usize,
    pub site: TapAddress,
    /// Box on the site's feature grid; the mask covers exactly this box.
    pub grid_box: GridBox,
    /// Latent cells per feature-grid cell.
    pub scale: f64,
    pub degenerate: bool,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub config: RunConfig,
    pub hyperparameters: Hyperparameters,
    pub inputs: Vec<InputRecord>,
    pub backbone_checksum: String,
    pub t_alpha_requested: usize,
    pub t_alpha_used: usize,
    pub steps: Vec<StepEvent>,
    pub firings: Vec<FiringRecord>,
    pub masks: Vec<MaskRecord>,
    pub artifacts: Vec<ArtifactRecord>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parse, rejecting any version other than [`MANIFEST_VERSION`].
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MANIFEST_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Manifest(format!(
                    "unsupported manifest version {v} (expected {MANIFEST_VERSION})"
                )))
            }
            None => return Err(Error::Manifest("missing manifest version".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn input(&self, role: &str) -> Option<&InputRecord> {
        self.inputs.iter().find(|i| i.role == role)
    }
}
