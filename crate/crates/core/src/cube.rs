//! Core volumetric data types.
//!
//! A photon counting cube stores one timing histogram per lateral pixel.
//! Layout is histogram-contiguous: element (t, row, col) lives at flat index
//! `(row * cols + col) * t_bins + t`, so the per-pixel histogram is a single
//! contiguous run. Cubes are immutable once constructed and safe to share
//! across threads.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dimensions of a photon counting cube: T time bins over an S x S grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubeDims {
    pub t_bins: usize,
    pub rows: usize,
    pub cols: usize,
}

impl CubeDims {
    /// Lateral grids are square throughout; violations are rejected here so
    /// ingestion reports them instead of failing later.
    pub fn new(t_bins: usize, rows: usize, cols: usize) -> Result<Self> {
        if t_bins == 0 || rows == 0 || cols == 0 {
            return Err(Error::DimMismatch(format!(
                "all dims must be >= 1, got {t_bins}x{rows}x{cols}"
            )));
        }
        if rows != cols {
            return Err(Error::DimMismatch(format!(
                "lateral grid must be square, got {rows}x{cols}"
            )));
        }
        Ok(Self { t_bins, rows, cols })
    }

    pub fn len(&self) -> usize {
        self.t_bins * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false // all dims >= 1 by construction
    }

    #[inline]
    pub fn index(&self, t: usize, row: usize, col: usize) -> usize {
        debug_assert!(t < self.t_bins && row < self.rows && col < self.cols);
        (row * self.cols + col) * self.t_bins + t
    }

    #[inline]
    pub fn coords(&self, flat: usize) -> (usize, usize, usize) {
        let t = flat % self.t_bins;
        let pixel = flat / self.t_bins;
        (t, pixel / self.cols, pixel % self.cols)
    }
}

/// Elementwise arithmetic selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Dense T x S x S volume of photon counts or expected count rates.
///
/// Counts are stored as f64 even when integer-valued so that noiseless rate
/// cubes and noisy count cubes share one type; integerness is an invariant of
/// the sampler output, not of the type.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonCountingCube {
    dims: CubeDims,
    data: Vec<f64>,
}

impl PhotonCountingCube {
    /// Constructs a cube, validating element count and non-negativity.
    pub fn new(dims: CubeDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "expected {} elements for {}x{}x{}, got {}",
                dims.len(),
                dims.t_bins,
                dims.rows,
                dims.cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            let (t, r, c) = dims.coords(bad);
            return Err(Error::InvalidValue(format!(
                "cube element at (t={t}, row={r}, col={c}) is {}",
                data[bad]
            )));
        }
        Ok(Self { dims, data })
    }

    /// Constructs without the non-negativity check. Intermediate arithmetic
    /// (e.g. residuals) may hold signed values.
    pub fn from_raw(dims: CubeDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "expected {} elements, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: CubeDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn constant(dims: CubeDims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> CubeDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, t: usize, row: usize, col: usize) -> f64 {
        self.data[self.dims.index(t, row, col)]
    }

    /// Contiguous per-pixel histogram.
    #[inline]
    pub fn histogram(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.dims.cols + col) * self.dims.t_bins;
        &self.data[start..start + self.dims.t_bins]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Per-pixel histogram normalization: each histogram rescaled to sum 1.
    /// Errors on a zero-sum histogram, which has no normalized form.
    pub fn normalize_per_pixel(&self) -> Result<Self> {
        let mut out = self.data.clone();
        let t = self.dims.t_bins;
        for (pixel, hist) in out.chunks_mut(t).enumerate() {
            let sum: f64 = hist.iter().sum();
            if sum <= 0.0 {
                return Err(Error::InvalidValue(format!(
                    "cannot normalize zero-sum histogram at pixel {} ({},{})",
                    pixel,
                    pixel / self.dims.cols,
                    pixel % self.dims.cols
                )));
            }
            for v in hist.iter_mut() {
                *v /= sum;
            }
        }
        Self::from_raw(self.dims, out)
    }
}

/// Elementwise combination of two cubes with identical dims.
pub fn elementwise(
    a: &PhotonCountingCube,
    b: &PhotonCountingCube,
    op: ElementwiseOp,
) -> Result<PhotonCountingCube> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!(
            "elementwise operands differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if op == ElementwiseOp::Div {
        if let Some(bad) = b.data().iter().position(|&v| v <= 0.0) {
            let (t, r, c) = b.dims().coords(bad);
            return Err(Error::InvalidValue(format!(
                "division by non-positive element at (t={t}, row={r}, col={c})"
            )));
        }
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            ElementwiseOp::Div => x / y,
        })
        .collect();
    PhotonCountingCube::from_raw(a.dims(), data)
}

/// Independent Poisson draw per element: out[i] ~ Poisson(rate[i]).
/// Output elements are non-negative integers stored as reals.
pub fn sample_poisson(rate: &PhotonCountingCube, rng: &mut Rng) -> Result<PhotonCountingCube> {
    if let Some(bad) = rate.data().iter().position(|v| !v.is_finite() || *v < 0.0) {
        let (t, r, c) = rate.dims().coords(bad);
        return Err(Error::InvalidValue(format!(
            "Poisson rate at (t={t}, row={r}, col={c}) is {}",
            rate.data()[bad]
        )));
    }
    let data = rate.data().iter().map(|&r| rng.poisson(r) as f64).collect();
    PhotonCountingCube::from_raw(rate.dims(), data)
}

/// Cube of independent fair signs drawn from {-1, +1}.
pub fn sample_bernoulli_pm1(dims: CubeDims, rng: &mut Rng) -> PhotonCountingCube {
    let data = (0..dims.len()).map(|_| rng.bernoulli_pm1()).collect();
    PhotonCountingCube::from_raw(dims, data).expect("length matches by construction")
}

/// Unit carried by a depth image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DepthUnit {
    /// Time-bin index, 1-based; soft-argmax output lies in [1, T].
    Bins,
    Meters,
}

/// Per-pixel depth map. Invalid pixels (e.g. empty histograms) hold NaN and
/// are excluded from error metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub rows: usize,
    pub cols: usize,
    pub unit: DepthUnit,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(rows: usize, cols: usize, unit: DepthUnit, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DimMismatch("depth image dims must be >= 1".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "expected {} elements for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            unit,
            data,
        })
    }

    pub fn constant(rows: usize, cols: usize, unit: DepthUnit, value: f64) -> Self {
        Self::new(rows, cols, unit, vec![value; rows * cols]).expect("const image")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|v| v.is_finite()).count()
    }
}
