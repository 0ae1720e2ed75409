//! Training pipeline: supervised and self-supervised modes over the same
//! Adam optimizer, with deterministic shuffling, per-epoch validation RMSE,
//! and best-checkpoint tracking.
//!
//! Every random draw is taken from a substream derived from
//! (seed, purpose, epoch, sample position), never from optimizer state, so
//! resuming from a checkpoint at epoch k replays exactly the stream a
//! straight-through run would have used.

use crate::autodiff::{Graph, ReconstructionNet, Reconstructor};
use crate::cube::{sample_poisson, PhotonCountingCube};
use crate::error::{Error, Result};
use crate::forward::SamplePair;
use crate::losses::{self, LossConfig};
use crate::metrics;
use crate::operators::{random_transform, ScaleFactor};
use crate::rng::{Rng, StreamPurpose};

/// Ablation mode selecting which loss terms reach the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Sup,
    EOnly,
    PuklOnly,
    PuklE,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sup" => Ok(TrainMode::Sup),
            "e" | "e_only" => Ok(TrainMode::EOnly),
            "pukl" | "pukl_only" => Ok(TrainMode::PuklOnly),
            "pukl_e" => Ok(TrainMode::PuklE),
            other => Err(Error::Config(format!(
                "unknown mode '{other}', expected sup | e | pukl | pukl_e"
            ))),
        }
    }

    pub fn is_self_supervised(&self) -> bool {
        !matches!(self, TrainMode::Sup)
    }
}

/// Adam with decoupled weight decay. Weight decay multiplies the parameters
/// before the moment update; moments are bias-corrected.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &ReconstructionNet, lr: f64, weight_decay: f64) -> Self {
        let m = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let v = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// One optimizer step over the accumulated gradients.
    pub fn step(&mut self, net: &mut ReconstructionNet) -> Result<()> {
        for p in net.params() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (idx, p) in net.params_mut().iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.value[i] *= decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Full training configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub scale: ScaleFactor,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Poisson re-corruption of the transformed branch (on by default;
    /// disabled for exactness checks).
    pub corrupt: bool,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, scale: ScaleFactor, gamma: f64, seed: u64) -> Self {
        Self {
            mode,
            epochs: 20,
            batch_size: 2,
            loss: LossConfig::new(gamma),
            scale,
            seed,
            checkpoint_every: 0,
            lr: 0.01,
            weight_decay: 1e-6,
            corrupt: true,
        }
    }
}

/// Loss values of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub pukl: Option<f64>,
    pub equiv: Option<f64>,
    pub total: f64,
}

/// Nodes of the transform-downsample-corrupt-reconstruct branch for one
/// sample; exposed for the equivariance exactness checks.
pub struct EquivariantBranch {
    pub h2: crate::autodiff::NodeId,
    pub h3: crate::autodiff::NodeId,
    pub loss: crate::autodiff::NodeId,
}

/// Builds the equivariant branch on top of an existing HR prediction node:
/// transform, down-sample, optionally Poisson-corrupt (detached), and
/// reconstruct again. The corruption draw is non-differentiable by
/// construction: gradients reach the parameters through `h2` and through the
/// second network evaluation only.
pub fn equivariant_branch(
    g: &mut Graph,
    recon: &dyn Reconstructor,
    hr_pred: crate::autodiff::NodeId,
    cfg: &TrainConfig,
    transform_rng: &mut Rng,
    corrupt_rng: &mut Rng,
) -> Result<EquivariantBranch> {
    let shape = g.shape(hr_pred);
    let spec = random_transform(transform_rng, shape.t, cfg.scale.t_scale)?;
    let h2 = g.transform(hr_pred, spec)?;
    let factors = [
        cfg.scale.t_scale,
        cfg.scale.row_scale,
        cfg.scale.col_scale,
    ];
    let l2 = g.block_mean(h2, factors)?;
    let lr_shape = g.shape(l2);
    let corrupted = if cfg.corrupt {
        let sigma = cfg.loss.sigma;
        if !(sigma > 0.0) {
            return Err(Error::Config(format!(
                "corruption enabled but sigma = {sigma}"
            )));
        }
        let dims = crate::cube::CubeDims::new(lr_shape.t, lr_shape.rows, lr_shape.cols)?;
        let rate = PhotonCountingCube::from_raw(
            dims,
            g.value(l2).iter().map(|&v| (v / sigma).max(0.0)).collect(),
        )?;
        let counts = sample_poisson(&rate, corrupt_rng)?;
        g.input(lr_shape, counts.data().iter().map(|&v| v * sigma).collect())
    } else {
        let frozen = g.value(l2).to_vec();
        g.input(lr_shape, frozen)
    };
    let h3 = recon.forward_graph(g, corrupted)?;
    let loss = losses::equivariance_loss(g, h2, h3, cfg.loss.eps_floor)?;
    Ok(EquivariantBranch { h2, h3, loss })
}

/// One self-supervised optimizer step over a batch of LR measurements.
/// `base_index` is the position of the first batch element inside the epoch
/// ordering; it anchors the random substreams.
pub fn self_supervised_step(
    net: &mut ReconstructionNet,
    adam: &mut AdamState,
    batch: &[&PhotonCountingCube],
    cfg: &TrainConfig,
    epoch: usize,
    base_index: usize,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidValue("empty batch".into()));
    }
    if cfg.mode == TrainMode::Sup {
        return Err(Error::Config(
            "self_supervised_step called in supervised mode".into(),
        ));
    }
    net.zero_grads();
    let inv_batch = 1.0 / batch.len() as f64;
    let (mut sum_pukl, mut sum_e, mut sum_total) = (0.0, 0.0, 0.0);
    for (offset, h_l) in batch.iter().enumerate() {
        let lane = (base_index + offset) as u64;
        let mut rng_b = Rng::substream(cfg.seed, StreamPurpose::Bernoulli, epoch as u64, lane);
        let mut rng_g = Rng::substream(cfg.seed, StreamPurpose::Transform, epoch as u64, lane);
        let mut rng_p = Rng::substream(cfg.seed, StreamPurpose::Corruption, epoch as u64, lane);

        let mut g = Graph::new();
        let terms = losses::pukl_mc(&mut g, net, h_l, &cfg.loss, &mut rng_b)?;
        let branch = equivariant_branch(&mut g, net, terms.hr_pred, cfg, &mut rng_g, &mut rng_p)?;
        let total = match cfg.mode {
            TrainMode::PuklE => losses::total_loss(&mut g, terms.loss, branch.loss, cfg.loss.alpha)?,
            TrainMode::PuklOnly => terms.loss,
            TrainMode::EOnly => g.mul_scalar(branch.loss, cfg.loss.alpha),
            TrainMode::Sup => unreachable!(),
        };
        let (v_pukl, v_e, v_total) = (
            g.scalar(terms.loss),
            g.scalar(branch.loss),
            g.scalar(total),
        );
        if !v_total.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss at epoch {epoch}, sample {lane}: pukl {v_pukl}, le {v_e}"
            )));
        }
        let grads = g.backward(total, inv_batch)?;
        net.accumulate_grads(&grads);
        sum_pukl += v_pukl;
        sum_e += v_e;
        sum_total += v_total;
    }
    adam.step(net)?;
    Ok(StepLosses {
        pukl: Some(sum_pukl * inv_batch),
        equiv: Some(sum_e * inv_batch),
        total: sum_total * inv_batch,
    })
}

/// One supervised optimizer step over (LR, HR ground-truth) pairs. Targets
/// are per-pixel normalized before the KL loss.
pub fn supervised_step(
    net: &mut ReconstructionNet,
    adam: &mut AdamState,
    batch: &[(&PhotonCountingCube, &PhotonCountingCube)],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidValue("empty batch".into()));
    }
    net.zero_grads();
    let inv_batch = 1.0 / batch.len() as f64;
    let mut sum_total = 0.0;
    for (h_l, hr_gt) in batch {
        let gt_norm = hr_gt.normalize_per_pixel()?;
        let mut g = Graph::new();
        let input = g.input_cube(h_l);
        let pred = net.forward_graph(&mut g, input)?;
        let loss = losses::kl_supervised(&mut g, pred, &gt_norm, cfg.loss.eps_floor)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Train(format!("non-finite loss at epoch {epoch}: {v}")));
        }
        let grads = g.backward(loss, inv_batch)?;
        net.accumulate_grads(&grads);
        sum_total += v;
    }
    adam.step(net)?;
    Ok(StepLosses {
        pukl: None,
        equiv: None,
        total: sum_total * inv_batch,
    })
}

/// Per-epoch metrics, one JSONL line each.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_pukl: Option<f64>,
    pub l_e: Option<f64>,
    pub l_total: f64,
    pub val_rmse: Option<f64>,
    pub wall_ms: u64,
}

/// Progress of a (possibly resumed) run.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    /// (epoch, val_rmse) of the best validation epoch so far.
    pub best: Option<(usize, f64)>,
}

/// Called after every epoch with the freshly updated network.
pub trait TrainObserver {
    fn on_epoch(
        &mut self,
        net: &ReconstructionNet,
        adam: &AdamState,
        metrics: &EpochMetrics,
        state: &TrainState,
        is_best: bool,
    ) -> Result<()>;
}

/// Observer that does nothing; for tests and library callers.
pub struct NoopObserver;

impl TrainObserver for NoopObserver {
    fn on_epoch(
        &mut self,
        _: &ReconstructionNet,
        _: &AdamState,
        _: &EpochMetrics,
        _: &TrainState,
        _: bool,
    ) -> Result<()> {
        Ok(())
    }
}

/// Mean validation RMSE of soft-argmax depth, when ground truth is present.
pub fn validation_rmse(net: &ReconstructionNet, val_set: &[SamplePair]) -> Result<Option<f64>> {
    if val_set.is_empty() || val_set.iter().any(|s| s.depth_gt.is_none()) {
        return Ok(None);
    }
    let mut acc = 0.0;
    for pair in val_set {
        let hr = net.forward_cube(&pair.lr)?;
        let norm = metrics::softmax_histogram(&hr)?;
        let depth = metrics::soft_argmax_depth(&norm)?;
        acc += metrics::rmse(&depth, pair.depth_gt.as_ref().unwrap())?;
    }
    Ok(Some(acc / val_set.len() as f64))
}

/// Epoch loop with deterministic shuffling, resumable from `start`.
/// Supervised mode requires ground truth on every training sample.
pub fn train(
    net: &mut ReconstructionNet,
    adam: &mut AdamState,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    cfg: &TrainConfig,
    start: TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<(Vec<EpochMetrics>, TrainState)> {
    if train_set.is_empty() {
        return Err(Error::InvalidValue("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if cfg.mode == TrainMode::Sup {
        if let Some(i) = train_set.iter().position(|s| s.hr_gt.is_none()) {
            return Err(Error::Config(format!(
                "supervised mode requires hr_gt on every sample; sample {i} has none"
            )));
        }
    }
    let mut history = Vec::new();
    let mut state = start;
    for epoch in state.epochs_done..cfg.epochs {
        let t0 = std::time::Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = Rng::substream(cfg.seed, StreamPurpose::Shuffle, epoch as u64, 0);
        shuffle_rng.shuffle(&mut order);

        let (mut ep_pukl, mut ep_e, mut ep_total, mut n_samples) = (0.0, 0.0, 0.0, 0usize);
        let mut saw_terms = false;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let base_index = batch_no * cfg.batch_size;
            let losses = if cfg.mode == TrainMode::Sup {
                let batch: Vec<(&PhotonCountingCube, &PhotonCountingCube)> = chunk
                    .iter()
                    .map(|&i| (&train_set[i].lr, train_set[i].hr_gt.as_ref().unwrap()))
                    .collect();
                supervised_step(net, adam, &batch, cfg, epoch)?
            } else {
                let batch: Vec<&PhotonCountingCube> =
                    chunk.iter().map(|&i| &train_set[i].lr).collect();
                self_supervised_step(net, adam, &batch, cfg, epoch, base_index)?
            };
            let w = chunk.len() as f64;
            if let (Some(p), Some(e)) = (losses.pukl, losses.equiv) {
                ep_pukl += p * w;
                ep_e += e * w;
                saw_terms = true;
            }
            ep_total += losses.total * w;
            n_samples += chunk.len();
        }
        let inv = 1.0 / n_samples as f64;
        let val_rmse = validation_rmse(net, val_set)?;
        let metrics = EpochMetrics {
            epoch,
            l_pukl: saw_terms.then_some(ep_pukl * inv),
            l_e: saw_terms.then_some(ep_e * inv),
            l_total: ep_total * inv,
            val_rmse,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        state.epochs_done = epoch + 1;
        let is_best = match (val_rmse, state.best) {
            (Some(v), Some((_, best_v))) => v < best_v,
            (Some(_), None) => true,
            // without validation, the latest epoch is retained as best
            (None, _) => true,
        };
        if is_best {
            state.best = Some((epoch, val_rmse.unwrap_or(f64::NAN)));
        }
        observer.on_epoch(net, adam, &metrics, &state, is_best)?;
        history.push(metrics);
    }
    Ok((history, state))
}
