//! Depth extraction from photon counting cubes and reconstruction-quality
//! reporting: per-pixel softmax normalization, soft-argmax depth, matched
//! filter MLE depth, RMSE, and ablation report assembly.

use crate::autodiff::ReconstructionNet;
use crate::cube::{DepthImage, DepthUnit, PhotonCountingCube};
use crate::error::{Error, Result};
use crate::forward::{PulseShape, SamplePair};
use crate::operators::{upsample_trilinear, ScaleFactor};
use rayon::prelude::*;

/// Per-pixel softmax over the time axis with max subtraction for stability.
/// Every output histogram sums to 1 and is invariant to per-pixel additive
/// constants in the input.
pub fn softmax_histogram(h: &PhotonCountingCube) -> Result<PhotonCountingCube> {
    if let Some(bad) = h.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "softmax input element {bad} is {}",
            h.data()[bad]
        )));
    }
    let t = h.dims().t_bins;
    let mut out = h.data().to_vec();
    for hist in out.chunks_mut(t) {
        let max = hist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in hist.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in hist.iter_mut() {
            *v /= sum;
        }
    }
    PhotonCountingCube::from_raw(h.dims(), out)
}

/// Expected bin index under a normalized per-pixel histogram, bins indexed
/// from 1: `D[j,k] = sum_i i * h[i,j,k]`. Input histograms must sum to 1.
pub fn soft_argmax_depth(h_norm: &PhotonCountingCube) -> Result<DepthImage> {
    let dims = h_norm.dims();
    let mut out = vec![0.0f64; dims.rows * dims.cols];
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let hist = h_norm.histogram(r, c);
            let sum: f64 = hist.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized { row: r, col: c, sum });
            }
            out[r * dims.cols + c] = hist
                .iter()
                .enumerate()
                .map(|(i, &p)| (i + 1) as f64 * p)
                .sum();
        }
    }
    DepthImage::new(dims.rows, dims.cols, DepthUnit::Bins, out)
}

/// Maximum-likelihood depth per pixel: the peak of the histogram
/// cross-correlated with the pulse kernel (matched filter), or of the raw
/// histogram when no pulse is given. Ties break toward the smallest bin.
/// All-zero histograms yield NaN and are excluded from RMSE.
pub fn mle_depth(h: &PhotonCountingCube, pulse: Option<&PulseShape>) -> DepthImage {
    let dims = h.dims();
    let t_bins = dims.t_bins;
    let mut out = vec![f64::NAN; dims.rows * dims.cols];
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let hist = h.histogram(r, c);
            if hist.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut best_bin = 0usize;
            for d in 0..t_bins {
                let score = match pulse {
                    Some(p) => {
                        let half = p.half_support() as i64;
                        p.kernel()
                            .iter()
                            .enumerate()
                            .map(|(k, &kv)| {
                                let t = d as i64 + k as i64 - half;
                                if (0..t_bins as i64).contains(&t) {
                                    kv * hist[t as usize]
                                } else {
                                    0.0
                                }
                            })
                            .sum()
                    }
                    None => hist[d],
                };
                if score > best {
                    best = score;
                    best_bin = d;
                }
            }
            out[r * dims.cols + c] = (best_bin + 1) as f64;
        }
    }
    DepthImage::new(dims.rows, dims.cols, DepthUnit::Bins, out).expect("sized above")
}

/// Root mean squared error exactly as reported: `(1/S) * sqrt(sum (D - D_gt)^2)`
/// over an S x S image. Pixels invalid (NaN) in either image are excluded
/// from the sum.
pub fn rmse(d: &DepthImage, d_gt: &DepthImage) -> Result<f64> {
    if d.rows != d_gt.rows || d.cols != d_gt.cols {
        return Err(Error::DimMismatch(format!(
            "rmse: {}x{} vs {}x{}",
            d.rows, d.cols, d_gt.rows, d_gt.cols
        )));
    }
    if d.rows != d.cols {
        return Err(Error::DimMismatch(format!(
            "rmse expects a square image, got {}x{}",
            d.rows, d.cols
        )));
    }
    let sum_sq: f64 = d
        .data()
        .iter()
        .zip(d_gt.data())
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum_sq.sqrt() / d.rows as f64)
}

/// One evaluated model.
pub enum EvalModel<'a> {
    /// Trilinear interpolation followed by matched-filter MLE depth;
    /// requires no trained parameters.
    Trilinear,
    Net {
        name: String,
        net: &'a ReconstructionNet,
    },
}

impl EvalModel<'_> {
    pub fn name(&self) -> &str {
        match self {
            EvalModel::Trilinear => "trilinear",
            EvalModel::Net { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub rmses: Vec<f64>,
    pub mean_rmse: f64,
}

/// Per-model depth RMSE over a shared test set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ModelRow>,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
}

impl EvalReport {
    pub fn row(&self, model: &str) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Aligned plain-text table, one model per line.
    pub fn to_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.model.len())
            .chain(["model".len()])
            .max()
            .unwrap_or(5);
        let mut s = format!("{:<name_w$}  {:>10}  {:>7}\n", "model", "mean_rmse", "samples");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<name_w$}  {:>10.4}  {:>7}\n",
                r.model,
                r.mean_rmse,
                r.rmses.len()
            ));
        }
        s
    }
}

/// Predicted depth for one sample under one model.
pub fn model_depth(
    model: &EvalModel,
    lr: &PhotonCountingCube,
    scale: ScaleFactor,
    pulse: &PulseShape,
) -> Result<DepthImage> {
    match model {
        EvalModel::Trilinear => {
            let hr = upsample_trilinear(lr, scale)?;
            Ok(mle_depth(&hr, Some(pulse)))
        }
        EvalModel::Net { net, .. } => {
            let hr = net.forward_cube(lr)?;
            let norm = softmax_histogram(&hr)?;
            soft_argmax_depth(&norm)
        }
    }
}

/// Evaluates every model on the shared test set. Net models go through
/// softmax and soft-argmax; the trilinear baseline goes through matched
/// filter MLE.
pub fn build_report(
    models: &[EvalModel],
    test_set: &[SamplePair],
    scale: ScaleFactor,
    pulse: &PulseShape,
    config_fingerprint: &str,
    dataset_fingerprint: &str,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::InvalidValue("empty test set".into()));
    }
    let mut rows = Vec::with_capacity(models.len());
    for model in models {
        let rmses: Vec<f64> = test_set
            .par_iter()
            .map(|pair| {
                let gt = pair.depth_gt.as_ref().ok_or_else(|| {
                    Error::InvalidValue("test sample has no ground-truth depth".into())
                })?;
                let depth = model_depth(model, &pair.lr, scale, pulse)?;
                rmse(&depth, gt)
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_rmse = rmses.iter().sum::<f64>() / rmses.len() as f64;
        rows.push(ModelRow {
            model: model.name().to_string(),
            rmses,
            mean_rmse,
        });
    }
    Ok(EvalReport {
        rows,
        config_fingerprint: config_fingerprint.to_string(),
        dataset_fingerprint: dataset_fingerprint.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use crate::cube::CubeDims;
    use super::*;
    use crate::forward::make_pulse;
    use crate::rng::Rng;
    use approx::assert_relative_eq;

    fn cube(t: usize, s: usize, data: Vec<f64>) -> PhotonCountingCube {
        PhotonCountingCube::new(CubeDims::new(t, s, s).unwrap(), data).unwrap()
    }

    #[test]
    fn softmax_constant_histogram_is_uniform() {
        let c = cube(5, 2, vec![3.0; 20]);
        let s = softmax_histogram(&c).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn softmax_sums_and_shift_invariance() {
        let mut rng = Rng::new(2);
        let dims = CubeDims::new(8, 3, 3).unwrap();
        let data: Vec<f64> = (0..dims.len()).map(|_| rng.uniform(0.0, 20.0)).collect();
        let c = PhotonCountingCube::new(dims, data.clone()).unwrap();
        let s = softmax_histogram(&c).unwrap();
        for r in 0..3 {
            for col in 0..3 {
                let sum: f64 = s.histogram(r, col).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        // adding a per-pixel constant leaves the softmax unchanged
        let mut shifted = data;
        for (pixel, hist) in shifted.chunks_mut(8).enumerate() {
            for v in hist.iter_mut() {
                *v += pixel as f64 * 3.5;
            }
        }
        let s2 = softmax_histogram(&PhotonCountingCube::new(dims, shifted).unwrap()).unwrap();
        for (a, b) in s.data().iter().zip(s2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_peak_mass_closed_form() {
        // histogram [10, 0, 0]: bin-1 mass = e^10 / (e^10 + 2)
        let c = cube(3, 1, vec![10.0, 0.0, 0.0]);
        let s = softmax_histogram(&c).unwrap();
        let want = 10f64.exp() / (10f64.exp() + 2.0);
        assert_relative_eq!(s.data()[0], want, epsilon = 1e-12);
        assert_relative_eq!(s.data()[0], 0.9999092083843409, epsilon = 1e-12);
    }

    #[test]
    fn soft_argmax_uniform_and_point_masses() {
        let t = 9;
        let uniform = cube(t, 1, vec![1.0 / t as f64; t]);
        let d = soft_argmax_depth(&uniform).unwrap();
        assert_relative_eq!(d.get(0, 0), (t as f64 + 1.0) / 2.0, epsilon = 1e-12);

        let mut point = vec![0.0; t];
        point[4] = 1.0; // bin 5
        let d = soft_argmax_depth(&cube(t, 1, point)).unwrap();
        assert_relative_eq!(d.get(0, 0), 5.0, epsilon = 1e-12);

        let mut split = vec![0.0; 10];
        split[1] = 0.5; // bin 2
        split[9] = 0.5; // bin 10
        let d = soft_argmax_depth(&cube(10, 1, split)).unwrap();
        assert_relative_eq!(d.get(0, 0), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn soft_argmax_symmetric_histogram_is_center() {
        // symmetric about bin 4 of 7
        let h = cube(7, 1, vec![0.05, 0.1, 0.2, 0.3, 0.2, 0.1, 0.05]);
        let d = soft_argmax_depth(&h).unwrap();
        assert_relative_eq!(d.get(0, 0), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn soft_argmax_rejects_unnormalized() {
        let h = cube(3, 1, vec![0.5, 0.2, 0.2]);
        assert!(matches!(
            soft_argmax_depth(&h),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn mle_depth_delta_and_tie_rule() {
        let mut data = vec![0.0; 12];
        data[6] = 4.0; // bin 7
        let d = mle_depth(&cube(12, 1, data), None);
        assert_eq!(d.get(0, 0), 7.0);

        let mut tie = vec![0.0; 12];
        tie[2] = 3.0; // bin 3
        tie[8] = 3.0; // bin 9
        let d = mle_depth(&cube(12, 1, tie), None);
        assert_eq!(d.get(0, 0), 3.0, "ties break toward the smallest bin");

        let empty = mle_depth(&cube(4, 1, vec![0.0; 4]), None);
        assert!(empty.get(0, 0).is_nan());
    }

    #[test]
    fn mle_depth_recovers_noisy_pulse() {
        // Poisson draws of a bin-17 pulse at SBR 5, gamma small: at least 95%
        // of 1024 pixels recover 17 +/- 1 (seed pinned).
        let dims = CubeDims::new(32, 32, 32).unwrap();
        let pulse = make_pulse(3.0, 9).unwrap();
        let scene = crate::forward::SceneParams {
            depth: DepthImage::constant(32, 32, DepthUnit::Bins, 17.0),
            albedo_scale: vec![0.8; 1024],
            background: vec![1.0; 1024],
            illuminations: 30,
            gamma: 0.01,
            sbr: 5.0,
        };
        let scene = crate::forward::calibrate_sbr(&scene, &pulse, dims, 5.0).unwrap();
        let rate = crate::forward::expected_rate_cube(&scene, &pulse, dims).unwrap();
        let scaled = rate.map(|v| v / 0.01);
        let counts =
            crate::cube::sample_poisson(&scaled, &mut Rng::new(1717)).unwrap().map(|v| v * 0.01);
        let d = mle_depth(&counts, Some(&pulse));
        let good = d
            .data()
            .iter()
            .filter(|&&v| (v - 17.0).abs() <= 1.0)
            .count();
        assert!(good as f64 >= 0.95 * 1024.0, "recovered {good}/1024");
    }

    #[test]
    fn rmse_closed_forms() {
        let a = DepthImage::constant(4, 4, DepthUnit::Bins, 7.0);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        // constant offset c on an SxS image is exactly c
        let b = DepthImage::constant(4, 4, DepthUnit::Bins, 9.5);
        assert_relative_eq!(rmse(&a, &b).unwrap(), 2.5, epsilon = 1e-12);
        // single-pixel error e is e/S
        let mut c = a.clone();
        c.set(2, 1, 7.0 + 3.0);
        assert_relative_eq!(rmse(&c, &a).unwrap(), 3.0 / 4.0, epsilon = 1e-12);
        // symmetry and non-negativity
        assert_relative_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
    }

    #[test]
    fn rmse_excludes_invalid_pixels_and_checks_dims() {
        let mut a = DepthImage::constant(3, 3, DepthUnit::Bins, 5.0);
        let b = DepthImage::constant(3, 3, DepthUnit::Bins, 6.0);
        a.set(0, 0, f64::NAN);
        // 8 valid pixels with offset 1 -> sqrt(8)/3
        assert_relative_eq!(rmse(&a, &b).unwrap(), 8f64.sqrt() / 3.0, epsilon = 1e-12);
        let c = DepthImage::constant(2, 2, DepthUnit::Bins, 5.0);
        assert!(rmse(&a, &c).is_err());
    }

    #[test]
    fn report_single_model_and_order_invariance() {
        let hr_dims = CubeDims::new(8, 8, 8).unwrap();
        let scale = ScaleFactor::new(2, 2, 2).unwrap();
        let pulse = make_pulse(1.5, 5).unwrap();
        let cfg = crate::forward::SceneGenConfig::new(20, pulse.clone());
        let mut set =
            crate::forward::generate_scene_dataset(3, hr_dims, scale, 1.0, 0.01, &cfg, 11).unwrap();
        let report = build_report(&[EvalModel::Trilinear], &set, scale, &pulse, "cfg", "ds").unwrap();
        assert_eq!(report.rows.len(), 1);
        let mean = report.rows[0].mean_rmse;
        let by_hand: f64 =
            report.rows[0].rmses.iter().sum::<f64>() / report.rows[0].rmses.len() as f64;
        assert!((mean - by_hand).abs() < 1e-12);

        // single sample: mean equals that sample's rmse
        let single = build_report(
            &[EvalModel::Trilinear],
            &set[..1],
            scale,
            &pulse,
            "cfg",
            "ds",
        )
        .unwrap();
        assert_eq!(single.rows[0].mean_rmse, single.rows[0].rmses[0]);

        // shuffling the test set leaves all numbers unchanged
        set.reverse();
        let report2 = build_report(&[EvalModel::Trilinear], &set, scale, &pulse, "cfg", "ds").unwrap();
        let mut a = report.rows[0].rmses.clone();
        let mut b = report2.rows[0].rmses.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert!((report.rows[0].mean_rmse - report2.rows[0].mean_rmse).abs() < 1e-12);
    }
}
