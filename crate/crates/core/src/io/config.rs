//! Declarative experiment configuration and its canonical hash.

use crate::cube::CubeDims;
use crate::error::{Error, Result};
use crate::operators::ScaleFactor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

fn default_alpha() -> f64 {
    1.0
}
fn default_tau() -> f64 {
    0.05
}
fn default_eps_floor() -> f64 {
    1e-12
}
fn default_pulse_support() -> usize {
    9
}
fn default_illuminations() -> u32 {
    60
}
fn default_true() -> bool {
    true
}
fn default_depth_min() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerSection {
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_true")]
    pub corrupt: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetSection {
    pub width: usize,
    pub feat_layers: usize,
}

/// Everything a run needs: geometry, noise, losses, network, trainer, seed,
/// and optional external depth-image inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// LR cube dims as [T, S, S].
    pub lr_dims: [usize; 3],
    /// Per-axis scale factors [t, row, col]; HR dims are LR dims times these.
    pub scale: [usize; 3],
    pub sbr: f64,
    pub gamma: f64,
    /// Corruption level of the equivariant branch; defaults to gamma.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_eps_floor")]
    pub eps_floor: f64,
    pub pulse_fwhm: f64,
    #[serde(default = "default_pulse_support")]
    pub pulse_support: usize,
    #[serde(default = "default_illuminations")]
    pub illuminations: u32,
    pub dataset: DatasetSizes,
    pub trainer: TrainerSection,
    pub net: NetSection,
    pub seed: u64,
    /// Optional directory of 16-bit PGM depth images used instead of
    /// procedural depth surfaces.
    #[serde(default)]
    pub depth_images: Option<PathBuf>,
    #[serde(default = "default_depth_min")]
    pub depth_min: f64,
    /// Depth span mapped onto [0, 65535]; defaults to T_hr - 1.
    #[serde(default)]
    pub depth_range: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let _ = self.lr_cube_dims()?;
        let _ = self.hr_cube_dims()?;
        let _ = self.scale_factor()?;
        if !(self.sbr > 0.0) {
            return Err(Error::Config(format!("sbr must be > 0, got {}", self.sbr)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.dataset.train == 0 || self.dataset.test == 0 {
            return Err(Error::Config(
                "dataset.train and dataset.test must be >= 1".into(),
            ));
        }
        crate::trainer::TrainMode::parse(&self.trainer.mode)?;
        if self.trainer.batch_size == 0 {
            return Err(Error::Config("trainer.batch_size must be >= 1".into()));
        }
        if self.net.width == 0 || self.net.feat_layers == 0 {
            return Err(Error::Config("net.width and net.feat_layers must be >= 1".into()));
        }
        if let Some(dir) = &self.depth_images {
            if !dir.exists() {
                return Err(Error::Config(format!(
                    "depth_images path {} does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    pub fn lr_cube_dims(&self) -> Result<CubeDims> {
        CubeDims::new(self.lr_dims[0], self.lr_dims[1], self.lr_dims[2])
    }

    pub fn hr_cube_dims(&self) -> Result<CubeDims> {
        CubeDims::new(
            self.lr_dims[0] * self.scale[0],
            self.lr_dims[1] * self.scale[1],
            self.lr_dims[2] * self.scale[2],
        )
    }

    pub fn scale_factor(&self) -> Result<ScaleFactor> {
        ScaleFactor::new(self.scale[0], self.scale[1], self.scale[2])
    }

    pub fn resolved_sigma(&self) -> f64 {
        self.sigma.unwrap_or(self.gamma)
    }

    pub fn resolved_depth_range(&self) -> f64 {
        self.depth_range
            .unwrap_or((self.lr_dims[0] * self.scale[0]) as f64 - 1.0)
    }

    pub fn loss_config(&self) -> crate::losses::LossConfig {
        crate::losses::LossConfig {
            alpha: self.alpha,
            tau: self.tau,
            gamma: self.gamma,
            sigma: self.resolved_sigma(),
            eps_floor: self.eps_floor,
            backprop_both: true,
        }
    }

    pub fn train_config(&self) -> Result<crate::trainer::TrainConfig> {
        Ok(crate::trainer::TrainConfig {
            mode: crate::trainer::TrainMode::parse(&self.trainer.mode)?,
            epochs: self.trainer.epochs,
            batch_size: self.trainer.batch_size,
            loss: self.loss_config(),
            scale: self.scale_factor()?,
            seed: self.seed,
            checkpoint_every: self.trainer.checkpoint_every,
            lr: self.trainer.lr,
            weight_decay: self.trainer.weight_decay,
            corrupt: self.trainer.corrupt,
        })
    }

    pub fn net_config(&self) -> Result<crate::autodiff::NetConfig> {
        Ok(crate::autodiff::NetConfig {
            width: self.net.width,
            feat_layers: self.net.feat_layers,
            scale: self.scale_factor()?,
            init_seed: self.seed,
        })
    }

    /// A copy with every optional field materialized, so the hash tracks
    /// semantics rather than spelling.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.sigma = Some(self.resolved_sigma());
        c.depth_range = Some(self.resolved_depth_range());
        c
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON encoding of the
    /// resolved config.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self.resolved()).expect("config serializes");
        let canonical = canonical_json(&value);
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Hash used for checkpoint-resume compatibility: identical to [`hash`]
    /// except that the epoch count is ignored, so an interrupted run can be
    /// extended. Every other field must match bitwise.
    pub fn resume_hash(&self) -> String {
        let mut c = self.resolved();
        c.trainer.epochs = 0;
        c.hash()
    }
}

/// Compact JSON with objects emitted in sorted key order at every level.
pub fn canonical_json(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let inner: Vec<String> = keys
                .iter()
                .map(|k| {
                    format!(
                        "{}:{}",
                        serde_json::to_string(k).unwrap(),
                        canonical_json(&map[*k])
                    )
                })
                .collect();
            format!("{{{}}}", inner.join(","))
        }
        serde_json::Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", inner.join(","))
        }
        other => serde_json::to_string(other).unwrap(),
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes any serializable value as sorted-key JSON with a trailing newline.
pub fn write_json_sorted<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let v = serde_json::to_value(value)
        .map_err(|e| Error::Config(format!("serialize for {}: {e}", path.display())))?;
    let sorted = sort_value(v);
    let text = serde_json::to_string_pretty(&sorted)
        .map_err(|e| Error::Config(format!("serialize for {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn sort_value(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => {
            let mut entries: Vec<(String, serde_json::Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = serde_json::Map::new();
            for (k, val) in entries {
                out.insert(k, sort_value(val));
            }
            serde_json::Value::Object(out)
        }
        serde_json::Value::Array(items) => {
            serde_json::Value::Array(items.into_iter().map(sort_value).collect())
        }
        other => other,
    }
}

/// The pinned desk-scale configuration: LR [32,16,16] to HR [64,32,32],
/// 50/8/16 samples, SBR 1, gamma 0.005, 20 epochs.
pub fn desk_config(mode: &str, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        lr_dims: [32, 16, 16],
        scale: [2, 2, 2],
        sbr: 1.0,
        gamma: 0.005,
        sigma: None,
        alpha: 1.0,
        tau: 0.05,
        eps_floor: 1e-12,
        pulse_fwhm: 3.0,
        pulse_support: 9,
        illuminations: 60,
        dataset: DatasetSizes {
            train: 50,
            val: 8,
            test: 16,
        },
        trainer: TrainerSection {
            mode: mode.to_string(),
            epochs: 20,
            batch_size: 2,
            lr: 0.01,
            weight_decay: 1e-6,
            checkpoint_every: 0,
            corrupt: true,
        },
        net: NetSection {
            width: 8,
            feat_layers: 2,
        },
        seed,
        depth_images: None,
        depth_min: 1.0,
        depth_range: None,
    }
}
