//! Single-photon forward model: converts depth/reflectivity scenes into
//! expected-rate cubes and noisy low-resolution measurements, and generates
//! procedural scene datasets for training and evaluation.
//!
//! Scenes are authored directly in time-bin units; physical depth-to-bin
//! conversion is display metadata only, so the speed of light never enters a
//! numeric code path here.

use crate::cube::{CubeDims, DepthImage, DepthUnit, PhotonCountingCube};
use crate::error::{Error, Result};
use crate::operators::{downsample, ScaleFactor};
use crate::rng::{Rng, StreamPurpose};
use rayon::prelude::*;

/// Discrete Gaussian system impulse response sampled on time bins.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseShape {
    pub fwhm_bins: f64,
    kernel: Vec<f64>,
}

impl PulseShape {
    /// Kernel values, normalized to sum 1 and symmetric about the center bin.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn support(&self) -> usize {
        self.kernel.len()
    }

    pub fn half_support(&self) -> usize {
        self.kernel.len() / 2
    }
}

/// Builds a normalized Gaussian pulse with the given full width at half
/// maximum, truncated to an odd support window.
pub fn make_pulse(fwhm_bins: f64, support_bins: usize) -> Result<PulseShape> {
    if !(fwhm_bins >= 0.0) || !fwhm_bins.is_finite() {
        return Err(Error::InvalidValue(format!("pulse fwhm {fwhm_bins}")));
    }
    if support_bins == 0 || support_bins.is_multiple_of(2) {
        return Err(Error::InvalidValue(format!(
            "pulse support must be a positive odd integer, got {support_bins}"
        )));
    }
    if (support_bins as f64) < 3.0 * fwhm_bins {
        return Err(Error::InvalidValue(format!(
            "pulse support {support_bins} too small for fwhm {fwhm_bins}; need support >= 3*fwhm"
        )));
    }
    let half = (support_bins / 2) as i64;
    let kernel = if fwhm_bins == 0.0 || support_bins == 1 {
        let mut k = vec![0.0; support_bins];
        k[half as usize] = 1.0;
        k
    } else {
        let sigma = fwhm_bins / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
        let mut k: Vec<f64> = (-half..=half)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = k.iter().sum();
        for v in k.iter_mut() {
            *v /= sum;
        }
        k
    };
    Ok(PulseShape { fwhm_bins, kernel })
}

/// A scene expressed in time-bin units: depth surface, per-pixel albedo scale
/// and background level, illumination count, and noise parameters.
#[derive(Debug, Clone)]
pub struct SceneParams {
    pub depth: DepthImage,
    pub albedo_scale: Vec<f64>,
    pub background: Vec<f64>,
    pub illuminations: u32,
    pub gamma: f64,
    pub sbr: f64,
}

impl SceneParams {
    pub fn validate(&self, dims: CubeDims) -> Result<()> {
        let n = dims.rows * dims.cols;
        if self.depth.rows != dims.rows || self.depth.cols != dims.cols {
            return Err(Error::DimMismatch(format!(
                "scene depth is {}x{}, cube wants {}x{}",
                self.depth.rows, self.depth.cols, dims.rows, dims.cols
            )));
        }
        if self.albedo_scale.len() != n || self.background.len() != n {
            return Err(Error::DimMismatch(
                "albedo/background arrays must match the lateral grid".into(),
            ));
        }
        if let Some(bad) = self
            .albedo_scale
            .iter()
            .position(|&a| !(a > 0.0 && a <= 1.0))
        {
            return Err(Error::InvalidValue(format!(
                "albedo at pixel {bad} must lie in (0, 1], got {}",
                self.albedo_scale[bad]
            )));
        }
        if let Some(bad) = self.background.iter().position(|&b| !(b >= 0.0)) {
            return Err(Error::InvalidValue(format!(
                "background at pixel {bad} must be >= 0, got {}",
                self.background[bad]
            )));
        }
        if self.illuminations == 0 {
            return Err(Error::InvalidValue("illumination count must be >= 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidValue(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// One dataset entry: a noisy LR measurement, the clean HR rate cube when the
/// scene is simulated, and the ground-truth depth at HR resolution.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub lr: PhotonCountingCube,
    pub hr_gt: Option<PhotonCountingCube>,
    pub depth_gt: Option<DepthImage>,
}

/// Expected photon rate per (bin, pixel):
/// `rate[t,i,j] = K * (eta[i,j] * pulse(t - d[i,j]) + n[i,j])`.
/// Fractional depths split the pulse between adjacent bins by linear
/// interpolation. Depths are 1-based bin positions and must lie in [1, T].
pub fn expected_rate_cube(
    scene: &SceneParams,
    pulse: &PulseShape,
    dims: CubeDims,
) -> Result<PhotonCountingCube> {
    scene.validate(dims)?;
    let t_bins = dims.t_bins;
    let k = scene.illuminations as f64;
    let half = pulse.half_support() as i64;
    let kernel = pulse.kernel();
    let mut data = vec![0.0f64; dims.len()];
    for r in 0..dims.rows {
        for c in 0..dims.cols {
            let d = scene.depth.get(r, c);
            if !(d >= 1.0 && d <= t_bins as f64) {
                return Err(Error::DepthOutOfRange {
                    row: r,
                    col: c,
                    depth: d,
                    t_bins,
                });
            }
            let pixel = r * dims.cols + c;
            let eta = scene.albedo_scale[pixel];
            let bg = scene.background[pixel];
            let hist = &mut data[pixel * t_bins..(pixel + 1) * t_bins];
            for v in hist.iter_mut() {
                *v = k * bg;
            }
            // 0-based center and its fractional part
            let center = d - 1.0;
            let base = center.floor();
            let frac = center - base;
            let base = base as i64;
            for (ki, &kv) in kernel.iter().enumerate() {
                let off = ki as i64 - half;
                let amp = k * eta * kv;
                let t0 = base + off;
                if (0..t_bins as i64).contains(&t0) {
                    hist[t0 as usize] += amp * (1.0 - frac);
                }
                let t1 = t0 + 1;
                if frac > 0.0 && (0..t_bins as i64).contains(&t1) {
                    hist[t1 as usize] += amp * frac;
                }
            }
        }
    }
    PhotonCountingCube::new(dims, data)
}

/// Total expected signal and background counts of a scene as placed on the
/// grid (signal accounts for pulse truncation at the cube boundary).
pub fn signal_background_totals(
    scene: &SceneParams,
    pulse: &PulseShape,
    dims: CubeDims,
) -> Result<(f64, f64)> {
    let mut signal_only = scene.clone();
    signal_only.background = vec![0.0; dims.rows * dims.cols];
    let signal = expected_rate_cube(&signal_only, pulse, dims)?.total();
    let background =
        scene.illuminations as f64 * dims.t_bins as f64 * scene.background.iter().sum::<f64>();
    Ok((signal, background))
}

/// Rescales the background so that total signal / total background equals
/// `target_sbr` exactly. Idempotent: a second call with the same target is a
/// no-op up to rounding.
pub fn calibrate_sbr(
    scene: &SceneParams,
    pulse: &PulseShape,
    dims: CubeDims,
    target_sbr: f64,
) -> Result<SceneParams> {
    if !(target_sbr > 0.0) {
        return Err(Error::InvalidValue(format!("target SBR must be > 0, got {target_sbr}")));
    }
    let (signal, background) = signal_background_totals(scene, pulse, dims)?;
    if signal <= 0.0 {
        return Err(Error::InvalidValue(
            "cannot calibrate SBR: scene has zero signal energy".into(),
        ));
    }
    if background <= 0.0 {
        return Err(Error::InvalidValue(
            "cannot calibrate SBR: scene has zero background to rescale".into(),
        ));
    }
    let factor = signal / (target_sbr * background);
    let mut out = scene.clone();
    for b in out.background.iter_mut() {
        *b *= factor;
    }
    out.sbr = target_sbr;
    Ok(out)
}

/// Noisy LR measurement: `H_l = gamma * Poisson(downsample(rate_hr) / gamma)`.
/// Mean-preserving for any gamma; smaller gamma approaches the clean rates.
pub fn measure(
    rate_hr: &PhotonCountingCube,
    scale: ScaleFactor,
    gamma: f64,
    rng: &mut Rng,
) -> Result<PhotonCountingCube> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidValue(format!("gamma must be > 0, got {gamma}")));
    }
    let lr_rate = downsample(rate_hr, scale)?;
    let scaled = lr_rate.map(|v| v / gamma);
    let counts = crate::cube::sample_poisson(&scaled, rng)?;
    Ok(counts.map(|v| v * gamma))
}

/// Knobs for the procedural scene generator.
#[derive(Debug, Clone)]
pub struct SceneGenConfig {
    pub illuminations: u32,
    pub pulse: PulseShape,
    /// Keep depths this many bins away from the cube boundary.
    pub depth_margin: f64,
    pub albedo_range: (f64, f64),
    pub shapes_per_scene: (usize, usize),
}

impl SceneGenConfig {
    pub fn new(illuminations: u32, pulse: PulseShape) -> Self {
        let depth_margin = pulse.half_support() as f64 + 1.0;
        Self {
            illuminations,
            pulse,
            depth_margin,
            albedo_range: (0.3, 1.0),
            shapes_per_scene: (2, 4),
        }
    }
}

fn generate_depth_and_albedo(
    dims: CubeDims,
    cfg: &SceneGenConfig,
    rng: &mut Rng,
) -> (DepthImage, Vec<f64>) {
    let (rows, cols) = (dims.rows, dims.cols);
    let t = dims.t_bins as f64;
    let lo = 1.0 + cfg.depth_margin;
    let hi = t - cfg.depth_margin;
    let span = hi - lo;

    // base tilted plane
    let d0 = rng.uniform(lo + 0.15 * span, hi - 0.15 * span);
    let max_slope = 0.6 * span / (rows + cols) as f64;
    let gr = rng.uniform(-max_slope, max_slope);
    let gc = rng.uniform(-max_slope, max_slope);
    let mut depth = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            depth[r * cols + c] = d0 + gr * r as f64 + gc * c as f64;
        }
    }

    let base_albedo = rng.uniform(0.4, 0.9);
    let mut albedo = vec![base_albedo; rows * cols];

    // raised rectangles and ellipses
    let (smin, smax) = cfg.shapes_per_scene;
    let n_shapes = smin + rng.next_range((smax - smin + 1) as u64) as usize;
    for _ in 0..n_shapes {
        let is_ellipse = rng.next_range(2) == 1;
        let cr = rng.uniform(0.1, 0.9) * rows as f64;
        let cc = rng.uniform(0.1, 0.9) * cols as f64;
        let hr = rng.uniform(0.08, 0.3) * rows as f64;
        let hc = rng.uniform(0.08, 0.3) * cols as f64;
        let raise = rng.uniform(0.1, 0.35) * span * if rng.next_range(2) == 1 { 1.0 } else { -1.0 };
        let shape_albedo = rng.uniform(cfg.albedo_range.0, cfg.albedo_range.1);
        for r in 0..rows {
            for c in 0..cols {
                let dr = (r as f64 - cr) / hr;
                let dc = (c as f64 - cc) / hc;
                let inside = if is_ellipse {
                    dr * dr + dc * dc <= 1.0
                } else {
                    dr.abs() <= 1.0 && dc.abs() <= 1.0
                };
                if inside {
                    depth[r * cols + c] += raise;
                    albedo[r * cols + c] = shape_albedo;
                }
            }
        }
    }

    // per-pixel albedo jitter, clipped into range
    for a in albedo.iter_mut() {
        *a = (*a + rng.uniform(-0.05, 0.05)).clamp(cfg.albedo_range.0, cfg.albedo_range.1);
    }
    for d in depth.iter_mut() {
        *d = d.clamp(lo, hi);
    }
    (
        DepthImage::new(rows, cols, DepthUnit::Bins, depth).expect("sized above"),
        albedo,
    )
}

/// Per-sample generation inputs.
#[derive(Debug, Clone)]
pub struct SampleGenInputs {
    pub hr_dims: CubeDims,
    pub scale: ScaleFactor,
    pub sbr: f64,
    pub gamma: f64,
    /// Replaces the procedural depth surface (e.g. an ingested depth image);
    /// values are clamped into the valid bin range.
    pub depth_override: Option<DepthImage>,
}

/// Builds one simulated sample: scene -> HR rate cube -> noisy LR
/// measurement. `lane` selects the deterministic substream.
pub fn generate_sample(
    inputs: &SampleGenInputs,
    cfg: &SceneGenConfig,
    seed: u64,
    lane: u64,
) -> Result<SamplePair> {
    let hr_dims = inputs.hr_dims;
    let mut scene_rng = Rng::substream(seed, StreamPurpose::Dataset, lane, 0);
    let (mut depth, albedo) = generate_depth_and_albedo(hr_dims, cfg, &mut scene_rng);
    if let Some(external) = &inputs.depth_override {
        if external.rows != hr_dims.rows || external.cols != hr_dims.cols {
            return Err(Error::DimMismatch(format!(
                "depth override is {}x{}, scene wants {}x{}",
                external.rows, external.cols, hr_dims.rows, hr_dims.cols
            )));
        }
        let lo = 1.0 + cfg.depth_margin;
        let hi = hr_dims.t_bins as f64 - cfg.depth_margin;
        depth = DepthImage::new(
            external.rows,
            external.cols,
            DepthUnit::Bins,
            external.data().iter().map(|d| d.clamp(lo, hi)).collect(),
        )?;
    }
    let n_pixels = hr_dims.rows * hr_dims.cols;
    let scene = SceneParams {
        depth,
        albedo_scale: albedo,
        background: vec![1.0; n_pixels],
        illuminations: cfg.illuminations,
        gamma: inputs.gamma,
        sbr: inputs.sbr,
    };
    let scene = calibrate_sbr(&scene, &cfg.pulse, hr_dims, inputs.sbr)?;
    let hr_gt = expected_rate_cube(&scene, &cfg.pulse, hr_dims)?;
    let mut measure_rng = Rng::substream(seed, StreamPurpose::Measure, lane, 0);
    let lr = measure(&hr_gt, inputs.scale, inputs.gamma, &mut measure_rng)?;
    Ok(SamplePair {
        lr,
        hr_gt: Some(hr_gt),
        depth_gt: Some(scene.depth),
    })
}

/// Deterministic procedural dataset. Samples are generated on independent
/// substreams of `seed`, so the result does not depend on thread scheduling.
pub fn generate_scene_dataset(
    count: usize,
    hr_dims: CubeDims,
    scale: ScaleFactor,
    sbr: f64,
    gamma: f64,
    cfg: &SceneGenConfig,
    seed: u64,
) -> Result<Vec<SamplePair>> {
    if count == 0 {
        return Err(Error::InvalidValue("dataset count must be >= 1".into()));
    }
    scale.down(hr_dims, "generate_scene_dataset")?;
    let inputs = SampleGenInputs {
        hr_dims,
        scale,
        sbr,
        gamma,
        depth_override: None,
    };
    (0..count)
        .into_par_iter()
        .map(|lane| generate_sample(&inputs, cfg, seed, lane as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn delta_pulse() -> PulseShape {
        make_pulse(0.0, 1).unwrap()
    }

    #[test]
    fn pulse_sigma_for_fwhm_3() {
        // sigma = fwhm / (2 sqrt(2 ln 2)) = 3 / 2.35482... = 1.2739827...
        let p = make_pulse(3.0, 9).unwrap();
        let sigma = 3.0 / (2.0 * (2.0f64 * std::f64::consts::LN_2).sqrt());
        assert_relative_eq!(sigma, 1.2739827004320285, epsilon = 1e-12);
        // the discrete kernel value ratio at offset 1 matches exp(-1/(2 sigma^2))
        let k = p.kernel();
        let mid = p.half_support();
        assert_relative_eq!(
            k[mid + 1] / k[mid],
            (-1.0 / (2.0 * sigma * sigma)).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn pulse_normalized_and_symmetric() {
        for fwhm in [0.5f64, 1.0, 3.0, 5.0] {
            let support = (3.0 * fwhm).ceil() as usize * 2 + 1;
            let p = make_pulse(fwhm, support).unwrap();
            let sum: f64 = p.kernel().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "fwhm {fwhm}: sum {sum}");
            let k = p.kernel();
            for i in 0..k.len() / 2 {
                assert_relative_eq!(k[i], k[k.len() - 1 - i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pulse_delta_limit_and_support_guard() {
        let p = delta_pulse();
        assert_eq!(p.kernel(), &[1.0]);
        assert!(make_pulse(3.0, 7).is_err()); // 7 < 3*3
        assert!(make_pulse(3.0, 10).is_err()); // even support
    }

    fn single_pixel_scene(depth: f64, eta: f64, bg: f64, k: u32) -> SceneParams {
        SceneParams {
            depth: DepthImage::constant(1, 1, DepthUnit::Bins, depth),
            albedo_scale: vec![eta],
            background: vec![bg],
            illuminations: k,
            gamma: 0.01,
            sbr: 1.0,
        }
    }

    #[test]
    fn rate_cube_zero_scene_is_zero() {
        let dims = CubeDims::new(8, 1, 1).unwrap();
        let mut scene = single_pixel_scene(4.0, 1.0, 0.0, 5);
        scene.albedo_scale = vec![1e-300];
        // exactly zero signal needs eta=0, which the validator rejects;
        // background-only zero case:
        let scene0 = SceneParams {
            albedo_scale: vec![1.0],
            ..single_pixel_scene(4.0, 1.0, 0.0, 5)
        };
        let cube = expected_rate_cube(&scene0, &delta_pulse(), dims).unwrap();
        // delta pulse at integer depth 4 -> bin index 3 only
        assert_eq!(cube.get(3, 0, 0), 5.0);
        assert_eq!(cube.total(), 5.0);
    }

    #[test]
    fn rate_cube_delta_placement() {
        let dims = CubeDims::new(10, 1, 1).unwrap();
        let scene = single_pixel_scene(7.0, 0.5, 0.0, 12);
        let cube = expected_rate_cube(&scene, &delta_pulse(), dims).unwrap();
        for t in 0..10 {
            let expect = if t == 6 { 12.0 * 0.5 } else { 0.0 };
            assert_eq!(cube.get(t, 0, 0), expect);
        }
    }

    #[test]
    fn rate_cube_background_only() {
        let dims = CubeDims::new(6, 2, 2).unwrap();
        let scene = SceneParams {
            depth: DepthImage::constant(2, 2, DepthUnit::Bins, 3.0),
            albedo_scale: vec![1e-12; 4], // negligible signal
            background: vec![0.25; 4],
            illuminations: 1,
            gamma: 0.01,
            sbr: 1.0,
        };
        let cube = expected_rate_cube(&scene, &delta_pulse(), dims).unwrap();
        assert_relative_eq!(cube.total(), 6.0 * 4.0 * 0.25, epsilon = 1e-9);
    }

    #[test]
    fn rate_cube_fractional_depth_splits_linearly() {
        let dims = CubeDims::new(10, 1, 1).unwrap();
        let scene = single_pixel_scene(4.25, 1.0, 0.0, 1);
        let cube = expected_rate_cube(&scene, &delta_pulse(), dims).unwrap();
        assert_relative_eq!(cube.get(3, 0, 0), 0.75, epsilon = 1e-12);
        assert_relative_eq!(cube.get(4, 0, 0), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn rate_cube_depth_out_of_range_names_pixel() {
        let dims = CubeDims::new(8, 2, 2).unwrap();
        let mut depth = DepthImage::constant(2, 2, DepthUnit::Bins, 4.0);
        depth.set(1, 0, 11.0);
        let scene = SceneParams {
            depth,
            albedo_scale: vec![1.0; 4],
            background: vec![0.0; 4],
            illuminations: 1,
            gamma: 0.01,
            sbr: 1.0,
        };
        let err = expected_rate_cube(&scene, &delta_pulse(), dims).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1,0)"), "got: {msg}");
    }

    #[test]
    fn rate_cube_linear_in_k_and_eta() {
        let dims = CubeDims::new(16, 2, 2).unwrap();
        let pulse = make_pulse(3.0, 9).unwrap();
        let base = SceneParams {
            depth: DepthImage::constant(2, 2, DepthUnit::Bins, 8.0),
            albedo_scale: vec![0.4; 4],
            background: vec![0.1; 4],
            illuminations: 3,
            gamma: 0.01,
            sbr: 1.0,
        };
        let one = expected_rate_cube(&base, &pulse, dims).unwrap();
        let double_k = SceneParams {
            illuminations: 6,
            ..base.clone()
        };
        let two = expected_rate_cube(&double_k, &pulse, dims).unwrap();
        for i in 0..one.data().len() {
            assert_relative_eq!(two.data()[i], 2.0 * one.data()[i], epsilon = 1e-12);
        }
        // linearity in eta for the signal part (background fixed at zero)
        let sig = SceneParams {
            background: vec![0.0; 4],
            ..base.clone()
        };
        let sig2 = SceneParams {
            albedo_scale: vec![0.8; 4],
            background: vec![0.0; 4],
            ..base
        };
        let a = expected_rate_cube(&sig, &pulse, dims).unwrap();
        let b = expected_rate_cube(&sig2, &pulse, dims).unwrap();
        for i in 0..a.data().len() {
            assert_relative_eq!(b.data()[i], 2.0 * a.data()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn total_signal_matches_closed_form_in_interior() {
        // depths far from the boundary: total signal = K * sum(eta)
        let dims = CubeDims::new(32, 3, 3).unwrap();
        let pulse = make_pulse(3.0, 9).unwrap();
        let scene = SceneParams {
            depth: DepthImage::constant(3, 3, DepthUnit::Bins, 16.0),
            albedo_scale: (1..=9).map(|v| v as f64 / 10.0).collect(),
            background: vec![0.0; 9],
            illuminations: 7,
            gamma: 0.01,
            sbr: 1.0,
        };
        let cube = expected_rate_cube(&scene, &pulse, dims).unwrap();
        let expect = 7.0 * (1..=9).map(|v| v as f64 / 10.0).sum::<f64>();
        assert_relative_eq!(cube.total(), expect, epsilon = 1e-6);
    }

    #[test]
    fn sbr_calibration_hits_target_exactly_and_is_idempotent() {
        let dims = CubeDims::new(16, 4, 4).unwrap();
        let pulse = make_pulse(3.0, 9).unwrap();
        let scene = SceneParams {
            depth: DepthImage::constant(4, 4, DepthUnit::Bins, 8.0),
            albedo_scale: vec![0.5; 16],
            background: vec![1.0; 16],
            illuminations: 10,
            gamma: 0.01,
            sbr: 0.0,
        };
        for target in [1.0, 0.2, 5.0] {
            let cal = calibrate_sbr(&scene, &pulse, dims, target).unwrap();
            let (s, b) = signal_background_totals(&cal, &pulse, dims).unwrap();
            assert_relative_eq!(s / b, target, epsilon = 1e-9);
            let again = calibrate_sbr(&cal, &pulse, dims, target).unwrap();
            for (x, y) in cal.background.iter().zip(again.background.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // ratio definition: target 1.0 with signal 100 puts background at 100
        let (s, _) = signal_background_totals(&scene, &pulse, dims).unwrap();
        let cal = calibrate_sbr(&scene, &pulse, dims, 0.2).unwrap();
        let (_, b) = signal_background_totals(&cal, &pulse, dims).unwrap();
        assert_relative_eq!(b, s / 0.2, epsilon = 1e-9);
    }

    #[test]
    fn sbr_calibration_rejects_zero_signal() {
        let dims = CubeDims::new(8, 1, 1).unwrap();
        let scene = SceneParams {
            depth: DepthImage::constant(1, 1, DepthUnit::Bins, 4.0),
            albedo_scale: vec![1.0],
            background: vec![1.0],
            illuminations: 1,
            gamma: 0.01,
            sbr: 1.0,
        };
        // zero signal via a zero pulse cannot be constructed; zero illuminations
        // is rejected by validate; emulate with eta -> 0 being disallowed, so
        // exercise the zero-background guard instead.
        let mut no_bg = scene;
        no_bg.background = vec![0.0];
        assert!(calibrate_sbr(&no_bg, &delta_pulse(), dims, 1.0).is_err());
    }

    #[test]
    fn measure_zero_rate_is_zero() {
        let dims = CubeDims::new(4, 2, 2).unwrap();
        let rate = PhotonCountingCube::zeros(dims);
        let out = measure(&rate, ScaleFactor::new(2, 2, 2).unwrap(), 0.005, &mut Rng::new(1))
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn measure_is_mean_preserving_small_gamma() {
        // gamma -> small: mean over 1e4 draws within 1% of downsample(rate)
        let dims = CubeDims::new(4, 2, 2).unwrap();
        let scale = ScaleFactor::new(2, 2, 2).unwrap();
        let data: Vec<f64> = (1..=16).map(|v| v as f64 / 4.0).collect();
        let rate = PhotonCountingCube::new(dims, data).unwrap();
        let target = downsample(&rate, scale).unwrap();
        let n = 10_000;
        let mut acc = vec![0.0f64; target.data().len()];
        let mut rng = Rng::new(99);
        for _ in 0..n {
            let m = measure(&rate, scale, 1e-3, &mut rng).unwrap();
            for (a, &v) in acc.iter_mut().zip(m.data()) {
                *a += v;
            }
        }
        for (i, a) in acc.iter().enumerate() {
            let mean = a / n as f64;
            assert!(
                (mean / target.data()[i] - 1.0).abs() < 0.01,
                "element {i}: {mean} vs {}",
                target.data()[i]
            );
        }
    }

    #[test]
    fn dataset_rejects_zero_count_and_is_deterministic() {
        let hr = CubeDims::new(16, 8, 8).unwrap();
        let scale = ScaleFactor::new(2, 2, 2).unwrap();
        let cfg = SceneGenConfig::new(10, make_pulse(3.0, 9).unwrap());
        assert!(generate_scene_dataset(0, hr, scale, 1.0, 0.005, &cfg, 1).is_err());
        let a = generate_scene_dataset(3, hr, scale, 1.0, 0.005, &cfg, 42).unwrap();
        let b = generate_scene_dataset(3, hr, scale, 1.0, 0.005, &cfg, 42).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.lr.data(), y.lr.data());
            assert_eq!(
                x.hr_gt.as_ref().unwrap().data(),
                y.hr_gt.as_ref().unwrap().data()
            );
        }
    }

    #[test]
    fn dataset_depth_coverage_spans_half_the_range() {
        // tuned before freezing: 8 scenes at T=32 cover well over half of [1,T]
        let hr = CubeDims::new(32, 16, 16).unwrap();
        let scale = ScaleFactor::new(2, 2, 2).unwrap();
        let cfg = SceneGenConfig::new(10, make_pulse(3.0, 9).unwrap());
        let set = generate_scene_dataset(8, hr, scale, 1.0, 0.005, &cfg, 7).unwrap();
        let mut touched = vec![false; 32];
        for pair in &set {
            for &d in pair.depth_gt.as_ref().unwrap().data() {
                let bin = (d.round() as usize).clamp(1, 32) - 1;
                touched[bin] = true;
            }
        }
        let covered = touched.iter().filter(|&&t| t).count();
        assert!(covered * 2 >= 32, "covered {covered}/32 bins");
    }

    #[test]
    fn dataset_dims_contract() {
        let hr = CubeDims::new(16, 8, 8).unwrap();
        let scale = ScaleFactor::new(2, 2, 2).unwrap();
        let cfg = SceneGenConfig::new(10, make_pulse(3.0, 9).unwrap());
        let set = generate_scene_dataset(2, hr, scale, 1.0, 0.005, &cfg, 3).unwrap();
        for pair in &set {
            assert_eq!(pair.lr.dims(), CubeDims::new(8, 4, 4).unwrap());
            assert_eq!(pair.hr_gt.as_ref().unwrap().dims(), hr);
            let d = pair.depth_gt.as_ref().unwrap();
            assert_eq!((d.rows, d.cols), (8, 8));
        }
    }
}
