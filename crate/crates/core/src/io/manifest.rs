//! Dataset manifest: the JSON index of every sample a dataset directory
//! holds, with the config hash and seed that produced it.

use super::config::write_json_sorted;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: u32,
    /// SPC1 path relative to the dataset directory.
    pub lr: String,
    pub hr_gt: Option<String>,
    /// 16-bit PGM path of the ground-truth depth, when simulated.
    pub depth_gt: Option<String>,
    pub sbr: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub lr_dims: [usize; 3],
    pub hr_dims: [usize; 3],
    pub scale: [usize; 3],
    pub depth_min: f64,
    pub depth_range: f64,
    pub train: Vec<SampleEntry>,
    pub val: Vec<SampleEntry>,
    pub test: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn path_in(dir: &Path) -> std::path::PathBuf {
        dir.join("manifest.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json_sorted(self, &Self::path_in(dir))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path_in(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(&path, format!("manifest parse: {e}")))
    }

    /// Fingerprint of the dataset identity: canonical JSON hash of the
    /// manifest itself.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let value = serde_json::to_value(self).expect("manifest serializes");
        let canonical = super::config::canonical_json(&value);
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        super::config::hex_string(&hasher.finalize())
    }

    pub fn has_ground_truth(&self, split: &[SampleEntry]) -> bool {
        !split.is_empty() && split.iter().all(|s| s.hr_gt.is_some())
    }
}
