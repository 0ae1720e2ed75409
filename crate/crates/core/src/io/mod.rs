//! Serialization: SPC1 cube containers, SPNN checkpoints (in `autodiff`),
//! PGM/PPM depth images, experiment configs, and dataset manifests.

pub mod config;
pub mod manifest;
pub mod pgm;
pub mod spc1;

pub use config::{desk_config, write_json_sorted, ExperimentConfig};
pub use manifest::{DatasetManifest, SampleEntry};
