//! Deterministic linear operators of the inverse problem: block-mean
//! down-sampling, trilinear up-sampling, and the symmetry group of lateral
//! quarter-turns combined with longitudinal cyclic shifts.

use crate::cube::{CubeDims, PhotonCountingCube};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Integer decimation factors per axis. The paper-scale setting is 2 per
/// axis, an overall factor of 2^3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScaleFactor {
    pub t_scale: usize,
    pub row_scale: usize,
    pub col_scale: usize,
}

impl ScaleFactor {
    pub fn new(t_scale: usize, row_scale: usize, col_scale: usize) -> Result<Self> {
        if t_scale == 0 || row_scale == 0 || col_scale == 0 {
            return Err(Error::InvalidValue("scale factors must be >= 1".into()));
        }
        Ok(Self {
            t_scale,
            row_scale,
            col_scale,
        })
    }

    pub fn overall(&self) -> usize {
        self.t_scale * self.row_scale * self.col_scale
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.t_scale, self.row_scale, self.col_scale)
    }

    /// HR dims scaled down, checking divisibility.
    pub fn down(&self, dims: CubeDims, what: &'static str) -> Result<CubeDims> {
        if !dims.t_bins.is_multiple_of(self.t_scale)
            || !dims.rows.is_multiple_of(self.row_scale)
            || !dims.cols.is_multiple_of(self.col_scale)
        {
            return Err(Error::Indivisible {
                what,
                dims: (dims.t_bins, dims.rows, dims.cols),
                scale: self.as_tuple(),
            });
        }
        CubeDims::new(
            dims.t_bins / self.t_scale,
            dims.rows / self.row_scale,
            dims.cols / self.col_scale,
        )
    }

    /// LR dims scaled up.
    pub fn up(&self, dims: CubeDims) -> Result<CubeDims> {
        CubeDims::new(
            dims.t_bins * self.t_scale,
            dims.rows * self.row_scale,
            dims.cols * self.col_scale,
        )
    }
}

/// One element of the symmetry group: a lateral rotation by `quarter_turns`
/// multiples of 90 degrees followed by a cyclic shift of the time axis by
/// `shift_bins`. The two commute since they act on disjoint axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformSpec {
    pub quarter_turns: u8,
    pub shift_bins: usize,
}

impl TransformSpec {
    pub const IDENTITY: TransformSpec = TransformSpec {
        quarter_turns: 0,
        shift_bins: 0,
    };

    pub fn new(quarter_turns: u8, shift_bins: usize) -> Self {
        Self {
            quarter_turns: quarter_turns % 4,
            shift_bins,
        }
    }

    /// Group composition: (q1,s1) then (q2,s2) = ((q1+q2) mod 4, (s1+s2) mod T).
    pub fn compose(&self, other: &TransformSpec, t_bins: usize) -> TransformSpec {
        TransformSpec {
            quarter_turns: (self.quarter_turns + other.quarter_turns) % 4,
            shift_bins: (self.shift_bins + other.shift_bins) % t_bins,
        }
    }

    pub fn inverse(&self, t_bins: usize) -> TransformSpec {
        TransformSpec {
            quarter_turns: (4 - self.quarter_turns % 4) % 4,
            shift_bins: (t_bins - self.shift_bins % t_bins) % t_bins,
        }
    }

    /// The matching LR-grid element: lateral turns carry over, the shift
    /// scales down by the temporal decimation factor.
    pub fn to_lr(&self, t_scale: usize) -> Result<TransformSpec> {
        if !self.shift_bins.is_multiple_of(t_scale) {
            return Err(Error::InvalidValue(format!(
                "shift {} is not a multiple of the temporal scale {}",
                self.shift_bins, t_scale
            )));
        }
        Ok(TransformSpec {
            quarter_turns: self.quarter_turns,
            shift_bins: self.shift_bins / t_scale,
        })
    }
}

/// Block-mean pooling over `t_scale x row_scale x col_scale` blocks — the
/// exact trilinear decimation for factor-2 aligned grids. Linear in the input.
pub fn downsample(hr: &PhotonCountingCube, scale: ScaleFactor) -> Result<PhotonCountingCube> {
    let lr_dims = scale.down(hr.dims(), "downsample")?;
    let mut out = vec![0.0f64; lr_dims.len()];
    let hd = hr.dims();
    let inv = 1.0 / scale.overall() as f64;
    for r in 0..lr_dims.rows {
        for c in 0..lr_dims.cols {
            for t in 0..lr_dims.t_bins {
                let mut acc = 0.0;
                for dr in 0..scale.row_scale {
                    for dc in 0..scale.col_scale {
                        let base = hd.index(
                            t * scale.t_scale,
                            r * scale.row_scale + dr,
                            c * scale.col_scale + dc,
                        );
                        for dt in 0..scale.t_scale {
                            acc += hr.data()[base + dt];
                        }
                    }
                }
                out[lr_dims.index(t, r, c)] = acc * inv;
            }
        }
    }
    PhotonCountingCube::from_raw(lr_dims, out)
}

/// Per-axis interpolation taps for half-pixel-aligned up-sampling with
/// replicate (clamped) edges.
fn axis_taps(n_lr: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_hr = n_lr * factor;
    (0..n_hr)
        .map(|j| {
            let src = (j as f64 + 0.5) / factor as f64 - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let lo = (i0.max(0.0) as usize).min(n_lr - 1);
            let hi = ((i0 + 1.0).max(0.0) as usize).min(n_lr - 1);
            (lo, hi, frac)
        })
        .collect()
}

/// Trilinear interpolation with half-pixel-aligned sample positions and
/// replicate padding at the edges.
pub fn upsample_trilinear(lr: &PhotonCountingCube, scale: ScaleFactor) -> Result<PhotonCountingCube> {
    let hr_dims = scale.up(lr.dims())?;
    let ld = lr.dims();
    let t_taps = axis_taps(ld.t_bins, scale.t_scale);
    let r_taps = axis_taps(ld.rows, scale.row_scale);
    let c_taps = axis_taps(ld.cols, scale.col_scale);
    let mut out = vec![0.0f64; hr_dims.len()];
    for (r, &(r0, r1, fr)) in r_taps.iter().enumerate() {
        for (c, &(c0, c1, fc)) in c_taps.iter().enumerate() {
            let h00 = lr.histogram(r0, c0);
            let h01 = lr.histogram(r0, c1);
            let h10 = lr.histogram(r1, c0);
            let h11 = lr.histogram(r1, c1);
            let base = (r * hr_dims.cols + c) * hr_dims.t_bins;
            for (t, &(t0, t1, ft)) in t_taps.iter().enumerate() {
                let lerp_t = |h: &[f64]| h[t0] * (1.0 - ft) + h[t1] * ft;
                let v0 = lerp_t(h00) * (1.0 - fc) + lerp_t(h01) * fc;
                let v1 = lerp_t(h10) * (1.0 - fc) + lerp_t(h11) * fc;
                out[base + t] = v0 * (1.0 - fr) + v1 * fr;
            }
        }
    }
    PhotonCountingCube::from_raw(hr_dims, out)
}

/// Index permutation applying `g`: cyclic shift of the time axis by
/// `g.shift_bins`, then lateral rotation by `g.quarter_turns` (the order is
/// immaterial; the two act on disjoint axes). One quarter turn maps input
/// pixel (r, c) to output pixel (c, S-1-r).
pub fn apply_transform(x: &PhotonCountingCube, g: &TransformSpec) -> Result<PhotonCountingCube> {
    let dims = x.dims();
    if dims.rows != dims.cols {
        return Err(Error::DimMismatch(format!(
            "rotation needs a square lateral grid, got {}x{}",
            dims.rows, dims.cols
        )));
    }
    let s = dims.rows;
    let t_bins = dims.t_bins;
    let q = g.quarter_turns % 4;
    let shift = g.shift_bins % t_bins;
    let mut out = vec![0.0f64; dims.len()];
    for r in 0..s {
        for c in 0..s {
            // destination pixel after q quarter turns of (r, c)
            let (mut dr, mut dc) = (r, c);
            for _ in 0..q {
                let (nr, nc) = (dc, s - 1 - dr);
                dr = nr;
                dc = nc;
            }
            let src = x.histogram(r, c);
            let dst_base = (dr * s + dc) * t_bins;
            for (t, &v) in src.iter().enumerate() {
                out[dst_base + (t + shift) % t_bins] = v;
            }
        }
    }
    PhotonCountingCube::from_raw(dims, out)
}

/// Uniform group element: quarter turns uniform over {0..3}, shift uniform
/// over multiples of `t_scale` in [0, t_bins). Restricting shifts to the
/// temporal decimation grid keeps the down-sampling commutation exact.
pub fn random_transform(rng: &mut Rng, t_bins: usize, t_scale: usize) -> Result<TransformSpec> {
    if t_bins == 0 || t_scale == 0 || !t_bins.is_multiple_of(t_scale) {
        return Err(Error::InvalidValue(format!(
            "invalid shift grid: t_bins {t_bins}, t_scale {t_scale}"
        )));
    }
    let q = rng.next_range(4) as u8;
    let steps = t_bins / t_scale;
    let s = rng.next_range(steps as u64) as usize * t_scale;
    Ok(TransformSpec::new(q, s))
}
