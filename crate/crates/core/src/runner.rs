//! End-to-end pipeline orchestration: simulate datasets onto disk, train
//! against them, evaluate checkpoints, and ingest externally measured cubes.
//! The command-line binary is a thin argument parser over these functions;
//! every run is a pure function of (config, inputs, seed).

use crate::autodiff::{load_checkpoint, save_checkpoint, ReconstructionNet};
use crate::cube::{DepthImage, DepthUnit};
use crate::error::{Error, Result};
use crate::forward::{generate_sample, make_pulse, SampleGenInputs, SamplePair, SceneGenConfig};
use crate::io::config::write_json_sorted;
use crate::io::manifest::{DatasetManifest, SampleEntry};
use crate::io::{pgm, spc1, ExperimentConfig};
use crate::metrics::{build_report, mle_depth, model_depth, EvalModel, EvalReport};
use crate::trainer::{
    train, AdamState, EpochMetrics, TrainObserver, TrainState,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Guard against concurrent writers to one output directory. The lock file
/// is removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn split_dirs(out_dir: &Path) -> [(&'static str, PathBuf); 3] {
    [
        ("train", out_dir.join("train")),
        ("val", out_dir.join("val")),
        ("test", out_dir.join("test")),
    ]
}

/// Generates the configured dataset onto disk and writes its manifest.
pub fn run_simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let _lock = DirLock::acquire(out_dir)?;
    let hr_dims = cfg.hr_cube_dims()?;
    let scale = cfg.scale_factor()?;
    let pulse = make_pulse(cfg.pulse_fwhm, cfg.pulse_support)?;
    let gen_cfg = SceneGenConfig::new(cfg.illuminations, pulse);
    let depth_images = load_external_depths(cfg)?;
    let depth_range = cfg.resolved_depth_range();

    let counts = [cfg.dataset.train, cfg.dataset.val, cfg.dataset.test];
    let offsets = [0, cfg.dataset.train, cfg.dataset.train + cfg.dataset.val];
    let mut manifest = DatasetManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        lr_dims: cfg.lr_dims,
        hr_dims: [hr_dims.t_bins, hr_dims.rows, hr_dims.cols],
        scale: cfg.scale,
        depth_min: cfg.depth_min,
        depth_range,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for ((split, dir), (count, offset)) in split_dirs(out_dir)
        .into_iter()
        .zip(counts.into_iter().zip(offsets))
    {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let entries: Vec<(SampleEntry, SamplePair)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let lane = (offset + i) as u64;
                let inputs = SampleGenInputs {
                    hr_dims,
                    scale,
                    sbr: cfg.sbr,
                    gamma: cfg.gamma,
                    depth_override: depth_images
                        .as_ref()
                        .map(|imgs| imgs[(offset + i) % imgs.len()].clone()),
                };
                let pair = generate_sample(&inputs, &gen_cfg, cfg.seed, lane)?;
                Ok((
                    SampleEntry {
                        id: lane as u32,
                        lr: format!("{split}/lr_{i:04}.spc1"),
                        hr_gt: Some(format!("{split}/hr_{i:04}.spc1")),
                        depth_gt: Some(format!("{split}/depth_{i:04}.pgm")),
                        sbr: cfg.sbr,
                        gamma: cfg.gamma,
                    },
                    pair,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        for (entry, pair) in &entries {
            spc1::save_cube(&pair.lr, &out_dir.join(&entry.lr))?;
            spc1::save_cube(
                pair.hr_gt.as_ref().expect("simulated"),
                &out_dir.join(entry.hr_gt.as_ref().unwrap()),
            )?;
            pgm::write_depth_pgm(
                pair.depth_gt.as_ref().expect("simulated"),
                cfg.depth_min,
                depth_range,
                &out_dir.join(entry.depth_gt.as_ref().unwrap()),
            )?;
        }
        let list = entries.into_iter().map(|(e, _)| e).collect();
        match split {
            "train" => manifest.train = list,
            "val" => manifest.val = list,
            _ => manifest.test = list,
        }
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn load_external_depths(cfg: &ExperimentConfig) -> Result<Option<Vec<DepthImage>>> {
    let Some(dir) = &cfg.depth_images else {
        return Ok(None);
    };
    let hr = cfg.hr_cube_dims()?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "depth_images directory {} holds no .pgm files",
            dir.display()
        )));
    }
    let range = cfg.resolved_depth_range();
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = pgm::read_depth_pgm(p, cfg.depth_min, range, DepthUnit::Bins)?;
        if img.rows != hr.rows || img.cols != hr.cols {
            return Err(Error::Config(format!(
                "depth image {} is {}x{}, config wants {}x{}",
                p.display(),
                img.rows,
                img.cols,
                hr.rows,
                hr.cols
            )));
        }
        images.push(img);
    }
    Ok(Some(images))
}

/// Loads one split of a dataset directory.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: &[SampleEntry]) -> Result<Vec<SamplePair>> {
    split
        .iter()
        .map(|entry| {
            let lr = spc1::load_cube(&dir.join(&entry.lr))?;
            let hr_gt = entry
                .hr_gt
                .as_ref()
                .map(|p| spc1::load_cube(&dir.join(p)))
                .transpose()?;
            let depth_gt = entry
                .depth_gt
                .as_ref()
                .map(|p| {
                    pgm::read_depth_pgm(
                        &dir.join(p),
                        manifest.depth_min,
                        manifest.depth_range,
                        DepthUnit::Bins,
                    )
                })
                .transpose()?;
            Ok(SamplePair { lr, hr_gt, depth_gt })
        })
        .collect()
}

fn check_dataset_compat(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<()> {
    if manifest.lr_dims != cfg.lr_dims || manifest.scale != cfg.scale {
        return Err(Error::Config(format!(
            "dataset geometry (lr {:?}, scale {:?}) does not match config (lr {:?}, scale {:?})",
            manifest.lr_dims, manifest.scale, cfg.lr_dims, cfg.scale
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSidecar {
    config_hash: String,
    adam: AdamState,
    state: TrainState,
}

struct DiskObserver<'a> {
    out_dir: &'a Path,
    config_hash: String,
    checkpoint_every: usize,
    metrics_lines: Vec<String>,
}

impl DiskObserver<'_> {
    fn write_metrics_file(&self) -> Result<()> {
        let path = self.out_dir.join("metrics.jsonl");
        fs::write(&path, self.metrics_lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn jsonl_line<T: Serialize>(value: &T) -> String {
    // single-line JSON with sorted keys
    let v = serde_json::to_value(value).expect("serializes");
    crate::io::config::canonical_json(&v)
}

impl TrainObserver for DiskObserver<'_> {
    fn on_epoch(
        &mut self,
        net: &ReconstructionNet,
        adam: &AdamState,
        metrics: &EpochMetrics,
        state: &TrainState,
        is_best: bool,
    ) -> Result<()> {
        self.metrics_lines.push(jsonl_line(metrics));
        self.write_metrics_file()?;
        let sidecar = TrainSidecar {
            config_hash: self.config_hash.clone(),
            adam: adam.clone(),
            state: state.clone(),
        };
        save_checkpoint(net, &self.out_dir.join("checkpoint_last.spnn"))?;
        write_json_sorted(&sidecar, &self.out_dir.join("checkpoint_last.json"))?;
        if is_best {
            save_checkpoint(net, &self.out_dir.join("checkpoint_best.spnn"))?;
        }
        if self.checkpoint_every > 0 && (metrics.epoch + 1).is_multiple_of(self.checkpoint_every) {
            save_checkpoint(
                net,
                &self.out_dir.join(format!("checkpoint_epoch_{:04}.spnn", metrics.epoch + 1)),
            )?;
        }
        Ok(())
    }
}

/// Outcome of a training run.
pub struct TrainRun {
    pub net: ReconstructionNet,
    pub history: Vec<EpochMetrics>,
    pub state: TrainState,
}

/// Trains the configured mode against a simulated or ingested dataset.
/// With `resume`, picks up bitwise-exactly from `checkpoint_last` in
/// `out_dir`.
pub fn run_train(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainRun> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(dataset_dir)?;
    check_dataset_compat(cfg, &manifest)?;
    let train_cfg = cfg.train_config()?;
    if train_cfg.mode == crate::trainer::TrainMode::Sup && !manifest.has_ground_truth(&manifest.train)
    {
        return Err(Error::Config(
            "supervised mode needs hr_gt on every training sample; this dataset has none".into(),
        ));
    }
    let train_set = load_split(dataset_dir, &manifest, &manifest.train)?;
    let val_set = load_split(dataset_dir, &manifest, &manifest.val)?;

    let _lock = DirLock::acquire(out_dir)?;
    let (mut net, mut adam, start, prior_lines) = if resume {
        let ckpt = out_dir.join("checkpoint_last.spnn");
        let side_path = out_dir.join("checkpoint_last.json");
        let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: TrainSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::format(&side_path, format!("sidecar parse: {e}")))?;
        if sidecar.config_hash != cfg.resume_hash() {
            return Err(Error::Config(
                "resume checkpoint was produced by a different config".into(),
            ));
        }
        let net = load_checkpoint(cfg.net_config()?, &ckpt)?;
        let metrics_path = out_dir.join("metrics.jsonl");
        let lines: Vec<String> = fs::read_to_string(&metrics_path)
            .map(|t| t.lines().map(str::to_string).collect())
            .unwrap_or_default();
        (net, sidecar.adam, sidecar.state, lines)
    } else {
        let net = ReconstructionNet::new(cfg.net_config()?)?;
        let adam = AdamState::new(&net, cfg.trainer.lr, cfg.trainer.weight_decay);
        (net, adam, TrainState::default(), Vec::new())
    };

    let mut observer = DiskObserver {
        out_dir,
        config_hash: cfg.resume_hash(),
        checkpoint_every: cfg.trainer.checkpoint_every,
        metrics_lines: prior_lines,
    };
    let (history, state) = train(
        &mut net,
        &mut adam,
        &train_set,
        &val_set,
        &train_cfg,
        start,
        &mut observer,
    )?;
    Ok(TrainRun { net, history, state })
}

/// Evaluates the trilinear baseline plus any checkpoints on the test split,
/// writing the report (JSON and text) and per-sample depth exports.
pub fn run_eval(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    checkpoints: &[(String, PathBuf)],
) -> Result<EvalReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(dataset_dir)?;
    check_dataset_compat(cfg, &manifest)?;
    let test_set = load_split(dataset_dir, &manifest, &manifest.test)?;
    if test_set.is_empty() {
        return Err(Error::Config("dataset has no test split".into()));
    }
    if test_set.iter().any(|s| s.depth_gt.is_none()) {
        return Err(Error::Config(
            "test split has no ground-truth depth; reports need simulated data".into(),
        ));
    }
    let _lock = DirLock::acquire(out_dir)?;
    let nets: Vec<(String, ReconstructionNet)> = checkpoints
        .iter()
        .map(|(name, path)| Ok((name.clone(), load_checkpoint(cfg.net_config()?, path)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut models = vec![EvalModel::Trilinear];
    for (name, net) in &nets {
        models.push(EvalModel::Net {
            name: name.clone(),
            net,
        });
    }
    let pulse = make_pulse(cfg.pulse_fwhm, cfg.pulse_support)?;
    let scale = cfg.scale_factor()?;
    let report = build_report(
        &models,
        &test_set,
        scale,
        &pulse,
        &cfg.hash(),
        &manifest.fingerprint(),
    )?;
    write_json_sorted(&report, &out_dir.join("report.json"))?;
    let table = report.to_table();
    fs::write(out_dir.join("report.txt"), &table)
        .map_err(|e| Error::io(out_dir.join("report.txt"), e))?;
    export_depth_maps(&models, &test_set, &manifest, scale, &pulse, &report, out_dir)?;
    Ok(report)
}

/// Per-sample depth exports: LR MLE, every model, and the ground truth, as
/// 16-bit PGM plus color PPM, with the per-sample RMSE in a JSON sidecar.
fn export_depth_maps(
    models: &[EvalModel],
    test_set: &[SamplePair],
    manifest: &DatasetManifest,
    scale: crate::operators::ScaleFactor,
    pulse: &crate::forward::PulseShape,
    report: &EvalReport,
    out_dir: &Path,
) -> Result<()> {
    let depth_dir = out_dir.join("depth");
    fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    let (dmin, drange) = (manifest.depth_min, manifest.depth_range);
    for (i, pair) in test_set.iter().enumerate() {
        let mut stamp = serde_json::Map::new();
        // LR MLE depth at LR lateral resolution (in LR bin units scaled to HR bins)
        let lr_mle = mle_depth(&pair.lr, Some(pulse));
        let lr_in_hr_bins = DepthImage::new(
            lr_mle.rows,
            lr_mle.cols,
            DepthUnit::Bins,
            lr_mle
                .data()
                .iter()
                .map(|d| d * scale.t_scale as f64)
                .collect(),
        )?;
        write_depth_pair(&lr_in_hr_bins, dmin, drange, &depth_dir, &format!("lr_mle_{i:04}"))?;
        for model in models {
            let depth = model_depth(model, &pair.lr, scale, pulse)?;
            write_depth_pair(
                &depth,
                dmin,
                drange,
                &depth_dir,
                &format!("{}_{i:04}", model.name()),
            )?;
            if let Some(row) = report.row(model.name()) {
                stamp.insert(model.name().to_string(), serde_json::json!(row.rmses[i]));
            }
        }
        if let Some(gt) = &pair.depth_gt {
            write_depth_pair(gt, dmin, drange, &depth_dir, &format!("gt_{i:04}"))?;
        }
        write_json_sorted(
            &serde_json::Value::Object(stamp),
            &depth_dir.join(format!("rmse_{i:04}.json")),
        )?;
    }
    Ok(())
}

fn write_depth_pair(
    depth: &DepthImage,
    dmin: f64,
    drange: f64,
    dir: &Path,
    stem: &str,
) -> Result<()> {
    pgm::write_depth_pgm(depth, dmin, drange, &dir.join(format!("{stem}.pgm")))?;
    pgm::write_depth_ppm(depth, dmin, drange, &dir.join(format!("{stem}.ppm")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestMeta {
    pub sbr: f64,
    pub gamma: f64,
    pub scale: [usize; 3],
    #[serde(default = "default_depth_min_meta")]
    pub depth_min: f64,
    #[serde(default)]
    pub depth_range: Option<f64>,
}

fn default_depth_min_meta() -> f64 {
    1.0
}

/// Registers an externally measured LR cube into a dataset directory as a
/// ground-truth-free training sample.
pub fn run_ingest(cube_path: &Path, meta_path: &Path, dataset_dir: &Path) -> Result<DatasetManifest> {
    let cube = spc1::load_cube(cube_path)?;
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: IngestMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
    if !(meta.sbr > 0.0) || !(meta.gamma > 0.0) {
        return Err(Error::Config(format!(
            "ingest metadata needs sbr > 0 and gamma > 0, got sbr {}, gamma {}",
            meta.sbr, meta.gamma
        )));
    }
    let scale = crate::operators::ScaleFactor::new(meta.scale[0], meta.scale[1], meta.scale[2])?;
    let dims = cube.dims();
    let hr_dims = scale.up(dims)?;
    fs::create_dir_all(dataset_dir.join("train"))
        .map_err(|e| Error::io(dataset_dir.join("train"), e))?;
    let mut manifest = match DatasetManifest::load(dataset_dir) {
        Ok(m) => {
            if m.lr_dims != [dims.t_bins, dims.rows, dims.cols] || m.scale != meta.scale {
                return Err(Error::Config(format!(
                    "cube dims {:?} with scale {:?} do not match the existing manifest ({:?}, {:?})",
                    [dims.t_bins, dims.rows, dims.cols],
                    meta.scale,
                    m.lr_dims,
                    m.scale
                )));
            }
            m
        }
        Err(_) => DatasetManifest {
            config_hash: "ingested".into(),
            seed: 0,
            lr_dims: [dims.t_bins, dims.rows, dims.cols],
            hr_dims: [hr_dims.t_bins, hr_dims.rows, hr_dims.cols],
            scale: meta.scale,
            depth_min: meta.depth_min,
            depth_range: meta
                .depth_range
                .unwrap_or(hr_dims.t_bins as f64 - 1.0),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        },
    };
    let id = manifest.train.len() as u32;
    let rel = format!("train/ingest_{id:04}.spc1");
    spc1::save_cube(&cube, &dataset_dir.join(&rel))?;
    manifest.train.push(SampleEntry {
        id,
        lr: rel,
        hr_gt: None,
        depth_gt: None,
        sbr: meta.sbr,
        gamma: meta.gamma,
    });
    manifest.save(dataset_dir)?;
    Ok(manifest)
}

/// Depth extraction method for standalone exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMethod {
    SoftArgmax,
    Mle,
}

/// Extracts a depth map from a stored cube and writes PGM + PPM.
pub fn run_export_depth(
    cube_path: &Path,
    out_dir: &Path,
    method: DepthMethod,
    pulse_fwhm: f64,
    pulse_support: usize,
) -> Result<PathBuf> {
    let cube = spc1::load_cube(cube_path)?;
    let depth = match method {
        DepthMethod::SoftArgmax => {
            let norm = crate::metrics::softmax_histogram(&cube)?;
            crate::metrics::soft_argmax_depth(&norm)?
        }
        DepthMethod::Mle => {
            let pulse = make_pulse(pulse_fwhm, pulse_support)?;
            mle_depth(&cube, Some(&pulse))
        }
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = cube_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "depth".into());
    let t = cube.dims().t_bins as f64;
    write_depth_pair(&depth, 1.0, t - 1.0, out_dir, &stem)?;
    Ok(out_dir.join(format!("{stem}.pgm")))
}
