//! Training objectives: supervised KL consistency, the exact Poisson
//! unbiased KL risk estimator used for verification, its Monte Carlo form
//! used for training, the equivariance loss, and the weighted total.
//!
//! The differentiable losses are graph builders: they append nodes to a
//! [`Graph`] and return the scalar loss node, so gradients flow through every
//! network evaluation involved — including both the perturbed and
//! unperturbed passes inside the Monte Carlo consistency term.

use crate::autodiff::{Graph, NodeId, Reconstructor};
use crate::cube::{sample_bernoulli_pm1, PhotonCountingCube};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Loss hyper-parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Trade-off weight on the equivariance term.
    pub alpha: f64,
    /// Probe amplitude of the Monte Carlo perturbation.
    pub tau: f64,
    /// Poisson noise scale of the measurement model.
    pub gamma: f64,
    /// Corruption level of the equivariant branch; defaults to gamma.
    pub sigma: f64,
    /// Floor applied inside every logarithm.
    pub eps_floor: f64,
    /// When false, the perturbed network evaluation inside the Monte Carlo
    /// term is treated as a constant (ablation switch; default backprops
    /// through both evaluations).
    pub backprop_both: bool,
}

impl LossConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            alpha: 1.0,
            tau: 0.05,
            gamma,
            sigma: gamma,
            eps_floor: 1e-12,
            backprop_both: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::Config(format!(
                "eps_floor must be > 0, got {}",
                self.eps_floor
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Exact Poisson unbiased KL risk estimate of a mapping `f` evaluated on an
/// integer count vector: `-sum_i y[i] * ln(max(f(y - e_i)[i], eps))`, with
/// zero-count coordinates contributing nothing. Used as the verification
/// route; training uses [`pukl_mc`].
pub fn pukl_exact<F>(f: F, y: &PhotonCountingCube, eps_floor: f64) -> Result<f64>
where
    F: Fn(&PhotonCountingCube) -> PhotonCountingCube,
{
    for (i, &v) in y.data().iter().enumerate() {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::InvalidValue(format!(
                "pukl_exact: negative or non-finite count {v} at {i}"
            )));
        }
        if v.fract() != 0.0 {
            return Err(Error::InvalidValue(format!(
                "pukl_exact: non-integer count {v} at {i}"
            )));
        }
    }
    let mut acc = 0.0;
    let mut probe = y.data().to_vec();
    for i in 0..probe.len() {
        let yi = y.data()[i];
        if yi == 0.0 {
            continue;
        }
        probe[i] = yi - 1.0;
        let shifted = PhotonCountingCube::from_raw(y.dims(), probe.clone())?;
        let fi = f(&shifted).data()[i];
        acc += yi * fi.max(eps_floor).ln();
        probe[i] = yi;
    }
    Ok(-acc)
}

/// Supervised consistency loss: KL divergence between the per-pixel
/// normalized ground truth and the per-pixel normalized prediction,
/// `sum gt * ln(gt / pred_norm)` with both sides floored inside the log.
/// `gt` must already be per-pixel normalized (each histogram sums to 1).
pub fn kl_supervised(
    g: &mut Graph,
    pred_hr: NodeId,
    gt_hr: &PhotonCountingCube,
    eps_floor: f64,
) -> Result<NodeId> {
    let shape = g.shape(pred_hr);
    let dims = gt_hr.dims();
    if shape.channels != 1 || shape.t != dims.t_bins || shape.rows != dims.rows || shape.cols != dims.cols
    {
        return Err(Error::DimMismatch(format!(
            "kl_supervised: prediction {shape:?} vs ground truth {dims:?}"
        )));
    }
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let sum: f64 = gt_hr.histogram(r, c).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized { row: r, col: c, sum });
            }
        }
    }
    if let Some(bad) = g.value(pred_hr).iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidValue(format!(
            "kl_supervised: prediction must be strictly positive, element {bad} is {}",
            g.value(pred_hr)[bad]
        )));
    }
    // constant part: sum gt * ln(max(gt, eps)); gt = 0 terms contribute 0
    let const_term: f64 = gt_hr
        .data()
        .iter()
        .map(|&t| if t > 0.0 { t * t.max(eps_floor).ln() } else { 0.0 })
        .sum();
    let pred_norm = g.normalize_t(pred_hr)?;
    let log_pred = g.log_floor(pred_norm, eps_floor);
    let gt_leaf = g.input_cube(gt_hr);
    let cross = g.mul(gt_leaf, log_pred)?;
    let cross_sum = g.sum_all(cross);
    let neg_cross = g.mul_scalar(cross_sum, -1.0);
    Ok(g.add_scalar(neg_cross, const_term))
}

/// Plain-value form of [`kl_supervised`] for tests and reporting.
pub fn kl_supervised_value(
    pred_hr: &PhotonCountingCube,
    gt_hr: &PhotonCountingCube,
    eps_floor: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let pred = g.input_cube(pred_hr);
    let loss = kl_supervised(&mut g, pred, gt_hr, eps_floor)?;
    Ok(g.scalar(loss))
}

/// Equivariance loss between the transformed prediction and the
/// re-reconstructed cube: `sum h2 * ln(max(h2, eps) / max(h3, eps))`.
/// Gradients flow into both arguments.
pub fn equivariance_loss(
    g: &mut Graph,
    h2: NodeId,
    h3: NodeId,
    eps_floor: f64,
) -> Result<NodeId> {
    if g.shape(h2) != g.shape(h3) {
        return Err(Error::DimMismatch(format!(
            "equivariance_loss: {:?} vs {:?}",
            g.shape(h2),
            g.shape(h3)
        )));
    }
    let l2 = g.log_floor(h2, eps_floor);
    let l3 = g.log_floor(h3, eps_floor);
    let diff = g.sub(l2, l3)?;
    let prod = g.mul(h2, diff)?;
    Ok(g.sum_all(prod))
}

/// Plain-value form of [`equivariance_loss`].
pub fn equivariance_loss_value(
    h2: &PhotonCountingCube,
    h3: &PhotonCountingCube,
    eps_floor: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.input_cube(h2);
    let b = g.input_cube(h3);
    let loss = equivariance_loss(&mut g, a, b, eps_floor)?;
    Ok(g.scalar(loss))
}

/// Nodes produced by the Monte Carlo consistency loss; the HR prediction is
/// exposed so the equivariant branch can reuse the same forward pass.
pub struct PuklTerms {
    pub loss: NodeId,
    /// `f(H_l)` at HR resolution.
    pub hr_pred: NodeId,
    /// Down-sampled prediction at LR resolution.
    pub lr_pred: NodeId,
}

/// Monte Carlo Poisson unbiased KL consistency loss.
///
/// Draws one Bernoulli sign cube B per evaluation, forms
/// `H_m = H_1 + (gamma/tau) * B .* H_l .* (A(f(H_l + tau B)) - H_1)`
/// with `H_1 = A(f(H_l))` and A the block-mean down-sampling of the
/// reconstructor's scale, and returns `-sum H_l .* ln(max(H_m, eps))`.
/// At gamma = 0 this reduces exactly to the plain log-consistency term.
pub fn pukl_mc(
    g: &mut Graph,
    recon: &dyn Reconstructor,
    h_l: &PhotonCountingCube,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<PuklTerms> {
    cfg.validate()?;
    if let Some(bad) = h_l.data().iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidValue(format!(
            "pukl_mc: measurement element {bad} is {}",
            h_l.data()[bad]
        )));
    }
    let scale = recon.scale();
    let factors = [scale.t_scale, scale.row_scale, scale.col_scale];

    let input = g.input_cube(h_l);
    let hr_pred = recon.forward_graph(g, input)?;
    let lr_pred = g.block_mean(hr_pred, factors)?;

    let signs = sample_bernoulli_pm1(h_l.dims(), rng);
    let perturbed: Vec<f64> = h_l
        .data()
        .iter()
        .zip(signs.data())
        .map(|(&h, &b)| h + cfg.tau * b)
        .collect();
    let shape = g.shape(input);
    let input_p = g.input(shape, perturbed);
    let hr_p = recon.forward_graph(g, input_p)?;
    let lr_p_full = g.block_mean(hr_p, factors)?;
    let lr_p = if cfg.backprop_both {
        lr_p_full
    } else {
        let frozen = g.value(lr_p_full).to_vec();
        g.input(g.shape(lr_p_full), frozen)
    };

    let diff = g.sub(lr_p, lr_pred)?;
    let probe_weight: Vec<f64> = signs
        .data()
        .iter()
        .zip(h_l.data())
        .map(|(&b, &h)| (cfg.gamma / cfg.tau) * b * h)
        .collect();
    let probe = g.input(g.shape(lr_pred), probe_weight);
    let correction = g.mul(probe, diff)?;
    let h_m = g.add(lr_pred, correction)?;

    let log_hm = g.log_floor(h_m, cfg.eps_floor);
    let weights = g.input_cube(h_l);
    let weighted = g.mul(weights, log_hm)?;
    let sum = g.sum_all(weighted);
    let loss = g.mul_scalar(sum, -1.0);
    Ok(PuklTerms {
        loss,
        hr_pred,
        lr_pred,
    })
}

/// Weighted total `pukl + alpha * le`. Rejects non-finite inputs.
pub fn total_loss(g: &mut Graph, pukl: NodeId, le: NodeId, alpha: f64) -> Result<NodeId> {
    let (vp, ve) = (g.scalar(pukl), g.scalar(le));
    if !vp.is_finite() || !ve.is_finite() {
        return Err(Error::Train(format!(
            "non-finite loss terms: pukl = {vp}, le = {ve}"
        )));
    }
    let scaled = g.mul_scalar(le, alpha);
    g.add(pukl, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::net::NearestNeighborUpsampler;
    use crate::cube::CubeDims;
    use crate::operators::ScaleFactor;
    use approx::assert_relative_eq;

    const EPS: f64 = 1e-12;

    fn cube(t: usize, s: usize, data: Vec<f64>) -> PhotonCountingCube {
        PhotonCountingCube::new(CubeDims::new(t, s, s).unwrap(), data).unwrap()
    }

    #[test]
    fn pukl_exact_shift_identity() {
        // with f(v) = v + 1, f(y - e_i)[i] = y[i], so PUKL = -sum y ln y
        let y = cube(4, 1, vec![3.0, 5.0, 2.0, 7.0]);
        let got = pukl_exact(|v| v.map(|x| x + 1.0), &y, EPS).unwrap();
        let want: f64 = -[3.0f64, 5.0, 2.0, 7.0]
            .iter()
            .map(|&v| v * v.ln())
            .sum::<f64>();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn pukl_exact_zero_counts() {
        let y = cube(3, 1, vec![0.0, 0.0, 0.0]);
        assert_eq!(pukl_exact(|v| v.map(|x| x + 1.0), &y, EPS).unwrap(), 0.0);
        // ones contribute 1 * ln(1) = 0 as well
        let y1 = cube(2, 1, vec![1.0, 0.0]);
        assert_eq!(pukl_exact(|v| v.map(|x| x + 1.0), &y1, EPS).unwrap(), 0.0);
    }

    #[test]
    fn pukl_exact_rejects_bad_counts() {
        let dims = CubeDims::new(2, 1, 1).unwrap();
        let neg = PhotonCountingCube::from_raw(dims, vec![-1.0, 2.0]).unwrap();
        assert!(pukl_exact(|v| v.clone(), &neg, EPS).is_err());
        let frac = PhotonCountingCube::from_raw(dims, vec![1.5, 2.0]).unwrap();
        assert!(pukl_exact(|v| v.clone(), &frac, EPS).is_err());
    }

    #[test]
    fn pukl_exact_statistical_unbiasedness_smoke() {
        // lighter-weight version of the acceptance criterion: 1e5 draws
        // against the truncated-Poisson enumeration oracle, 3% tolerance.
        let rates = [3.0, 5.0, 2.0, 7.0];
        let x = cube(4, 1, rates.to_vec());
        let mut rng = Rng::new(314);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let y = crate::cube::sample_poisson(&x, &mut rng).unwrap();
            acc += pukl_exact(|v| v.map(|t| t + 1.0), &y, EPS).unwrap();
        }
        let mc = acc / n as f64;
        // oracle: E[-sum X_i ln(Y_i + 1)] by enumeration
        let mut oracle = 0.0;
        for &lam in &rates {
            let mut p = (-lam).exp();
            let mut cum = 0.0;
            let mut k = 0u64;
            let mut e = 0.0;
            while cum < 1.0 - 1e-12 {
                e += p * ((k + 1) as f64).ln();
                cum += p;
                k += 1;
                p *= lam / k as f64;
            }
            oracle -= lam * e;
        }
        assert!(
            (mc / oracle - 1.0).abs() < 0.03,
            "mc {mc} vs oracle {oracle}"
        );
    }

    #[test]
    fn kl_supervised_zero_when_equal() {
        let gt = cube(4, 2, (1..=16).map(|v| v as f64).collect())
            .normalize_per_pixel()
            .unwrap();
        let pred = gt.clone();
        let loss = kl_supervised_value(&pred, &gt, EPS).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn kl_supervised_closed_form() {
        // gt = [1, 0], pred normalized to [0.5, 0.5] -> 1 * ln 2
        let gt = cube(2, 1, vec![1.0, 0.0]);
        let pred = cube(2, 1, vec![3.0, 3.0]);
        let loss = kl_supervised_value(&pred, &gt, EPS).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn kl_supervised_nonnegative_on_random_histograms() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let dims = CubeDims::new(6, 3, 3).unwrap();
            let gt = PhotonCountingCube::new(
                dims,
                (0..dims.len()).map(|_| rng.uniform(0.0, 4.0)).collect(),
            )
            .unwrap()
            .normalize_per_pixel()
            .unwrap();
            let pred = PhotonCountingCube::new(
                dims,
                (0..dims.len()).map(|_| rng.uniform(0.01, 4.0)).collect(),
            )
            .unwrap();
            let loss = kl_supervised_value(&pred, &gt, EPS).unwrap();
            assert!(loss >= -1e-9, "loss {loss}");
        }
    }

    #[test]
    fn kl_supervised_rejects_unnormalized_gt() {
        let gt = cube(2, 1, vec![0.9, 0.2]);
        let pred = cube(2, 1, vec![0.5, 0.5]);
        let err = kl_supervised_value(&pred, &gt, EPS).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { .. }));
    }

    #[test]
    fn equivariance_zero_and_closed_form() {
        let h = cube(3, 2, (1..=12).map(|v| v as f64).collect());
        assert!(equivariance_loss_value(&h, &h, EPS).unwrap().abs() < 1e-12);
        // h2 = 2 * h3: L = sum h2 ln 2 = M ln 2
        let h3 = cube(2, 1, vec![1.5, 2.5]);
        let h2 = h3.map(|v| 2.0 * v);
        let m = h2.total();
        assert_relative_eq!(
            equivariance_loss_value(&h2, &h3, EPS).unwrap(),
            m * std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn pukl_mc_zero_measurement_is_zero() {
        let scale = ScaleFactor::new(2, 2, 2).unwrap();
        let recon = NearestNeighborUpsampler::new(scale);
        let h_l = PhotonCountingCube::zeros(CubeDims::new(2, 2, 2).unwrap());
        let mut g = Graph::new();
        let terms = pukl_mc(&mut g, &recon, &h_l, &LossConfig::new(0.005), &mut Rng::new(4)).unwrap();
        assert_eq!(g.scalar(terms.loss), 0.0);
    }

    #[test]
    fn pukl_mc_gamma_zero_is_plain_log_consistency() {
        let scale = ScaleFactor::new(2, 2, 2).unwrap();
        let recon = NearestNeighborUpsampler::new(scale);
        let dims = CubeDims::new(4, 2, 2).unwrap();
        let h_l = cube(4, 2, (1..=16).map(|v| v as f64 / 3.0).collect());
        let mut cfg = LossConfig::new(0.0);
        cfg.gamma = 0.0;
        let mut g = Graph::new();
        let terms = pukl_mc(&mut g, &recon, &h_l, &cfg, &mut Rng::new(4)).unwrap();
        // NN-upsample then block mean is the identity, so H_1 = h_l
        let want: f64 = -h_l
            .data()
            .iter()
            .map(|&h| h * h.max(EPS).ln())
            .sum::<f64>();
        assert_relative_eq!(g.scalar(terms.loss), want, epsilon = 1e-10);
        assert_eq!(g.shape(terms.hr_pred).t, dims.t_bins * 2);
    }

    #[test]
    fn total_loss_composition() {
        let mut g = Graph::new();
        let a = g.input(crate::autodiff::Shape::scalar(), vec![2.5]);
        let b = g.input(crate::autodiff::Shape::scalar(), vec![1.5]);
        let t0 = total_loss(&mut g, a, b, 0.0).unwrap();
        assert_relative_eq!(g.scalar(t0), 2.5);
        let t1 = total_loss(&mut g, a, b, 1.0).unwrap();
        assert_relative_eq!(g.scalar(t1), 4.0);
        let nan = g.input(crate::autodiff::Shape::scalar(), vec![f64::NAN]);
        assert!(total_loss(&mut g, nan, b, 1.0).is_err());
    }
}
