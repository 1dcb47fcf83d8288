//! Predictive distribution types and their pdf/cdf/quantile evaluation.
//!
//! Three families are supported: Gaussians (diagonal or full covariance),
//! per-dimension Cauchy, and grid-based CDFs produced by the nonparametric
//! calibrators. Dimensions of the latter two are independent.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::linalg;

/// Clamping constant for grid CDF values at evaluation time.
pub const CDF_EPS: f64 = 1e-7;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn std_normal_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

pub fn std_normal_log_pdf(z: f64) -> f64 {
    -0.5 * LN_2PI - 0.5 * z * z
}

fn check_level(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbability(tau))
    }
}

fn check_finite(y: f64) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("evaluation point"))
    }
}

fn check_dim(dim: usize, k: usize) -> Result<()> {
    if dim < k {
        Ok(())
    } else {
        Err(Error::InvalidDimension { index: dim, k })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GaussianScale {
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

/// Gaussian predictive distribution over K output dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    mean: Vec<f64>,
    scale: GaussianScale,
}

impl GaussianPrediction {
    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: variances.len(),
            });
        }
        if mean.is_empty() {
            return Err(Error::InvalidParameter("zero-dimensional prediction".into()));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mean"));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(
                "variances must be finite and strictly positive".into(),
            ));
        }
        Ok(Self {
            mean,
            scale: GaussianScale::Diagonal(variances),
        })
    }

    pub fn full(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if cov.nrows() != k || cov.ncols() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: cov.nrows(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidParameter("zero-dimensional prediction".into()));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mean"));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
        if !linalg::is_symmetric(&cov, 1e-9) {
            return Err(Error::InvalidParameter("covariance is not symmetric".into()));
        }
        linalg::cholesky_jittered(&cov)?;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self {
            mean,
            scale: GaussianScale::Full(cov),
        })
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &GaussianScale {
        &self.scale
    }

    pub fn has_full_covariance(&self) -> bool {
        matches!(self.scale, GaussianScale::Full(_))
    }

    pub fn variance(&self, dim: usize) -> f64 {
        match &self.scale {
            GaussianScale::Diagonal(v) => v[dim],
            GaussianScale::Full(c) => c[(dim, dim)],
        }
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.k()).map(|d| self.variance(d)).collect()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.scale {
            GaussianScale::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            GaussianScale::Full(c) => c.clone(),
        }
    }

    /// Same mean, diagonal of the covariance only.
    pub fn to_diagonal(&self) -> Self {
        Self {
            mean: self.mean.clone(),
            scale: GaussianScale::Diagonal(self.variances()),
        }
    }

    pub fn cdf(&self, y: f64, dim: usize) -> Result<f64> {
        check_dim(dim, self.k())?;
        check_finite(y)?;
        Ok(std_normal_cdf((y - self.mean[dim]) / self.variance(dim).sqrt()))
    }

    pub fn quantile(&self, tau: f64, dim: usize) -> Result<f64> {
        check_dim(dim, self.k())?;
        check_level(tau)?;
        Ok(self.mean[dim] + self.variance(dim).sqrt() * std_normal_quantile(tau))
    }

    pub fn marginal_log_density(&self, y: f64, dim: usize) -> Result<f64> {
        check_dim(dim, self.k())?;
        check_finite(y)?;
        let var = self.variance(dim);
        let z = (y - self.mean[dim]) / var.sqrt();
        Ok(std_normal_log_pdf(z) - 0.5 * var.ln())
    }

    /// Joint log density; uses the multivariate density for full covariances.
    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: y.len(),
            });
        }
        match &self.scale {
            GaussianScale::Diagonal(_) => {
                let mut total = 0.0;
                for (d, &yd) in y.iter().enumerate() {
                    total += self.marginal_log_density(yd, d)?;
                }
                Ok(total)
            }
            GaussianScale::Full(cov) => {
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("evaluation point"));
                }
                let (l, _) = linalg::cholesky_jittered(cov)?;
                let r: Vec<f64> = y.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
                let z = linalg::solve_lower(&l, &r);
                let maha: f64 = z.iter().map(|v| v * v).sum();
                Ok(-0.5 * (self.k() as f64 * LN_2PI + linalg::log_det_cholesky(&l) + maha))
            }
        }
    }
}

/// Independent per-dimension Cauchy(x0, γ).
#[derive(Debug, Clone, PartialEq)]
pub struct CauchyPrediction {
    location: Vec<f64>,
    scale: Vec<f64>,
}

impl CauchyPrediction {
    pub fn new(location: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if location.len() != scale.len() {
            return Err(Error::DimensionMismatch {
                expected: location.len(),
                got: scale.len(),
            });
        }
        if location.is_empty() {
            return Err(Error::InvalidParameter("zero-dimensional prediction".into()));
        }
        if location.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("location"));
        }
        if scale.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::InvalidParameter(
                "Cauchy scale must be finite and strictly positive".into(),
            ));
        }
        Ok(Self { location, scale })
    }

    pub fn k(&self) -> usize {
        self.location.len()
    }

    pub fn location(&self) -> &[f64] {
        &self.location
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn cdf(&self, y: f64, dim: usize) -> Result<f64> {
        check_dim(dim, self.k())?;
        check_finite(y)?;
        Ok(0.5 + ((y - self.location[dim]) / self.scale[dim]).atan() / PI)
    }

    pub fn quantile(&self, tau: f64, dim: usize) -> Result<f64> {
        check_dim(dim, self.k())?;
        check_level(tau)?;
        Ok(self.location[dim] + self.scale[dim] * (PI * (tau - 0.5)).tan())
    }

    pub fn marginal_log_density(&self, y: f64, dim: usize) -> Result<f64> {
        check_dim(dim, self.k())?;
        check_finite(y)?;
        let z = (y - self.location[dim]) / self.scale[dim];
        Ok(-(PI * self.scale[dim]).ln() - z.mul_add(z, 1.0).ln())
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: y.len(),
            });
        }
        y.iter()
            .enumerate()
            .map(|(d, &v)| self.marginal_log_density(v, d))
            .sum()
    }
}

/// One dimension of a grid CDF, linearly interpolated between grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCdf {
    support: Vec<f64>,
    cdf: Vec<f64>,
}

impl GridCdf {
    pub fn new(support: Vec<f64>, cdf: Vec<f64>) -> Result<Self> {
        if support.len() != cdf.len() {
            return Err(Error::DimensionMismatch {
                expected: support.len(),
                got: cdf.len(),
            });
        }
        if support.len() < 2 {
            return Err(Error::InvalidParameter("grid needs at least two points".into()));
        }
        if support.iter().chain(&cdf).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid CDF"));
        }
        if support.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "grid support must be strictly increasing".into(),
            ));
        }
        if cdf.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("CDF values must be nondecreasing".into()));
        }
        if cdf[0] < 0.0 || cdf[cdf.len() - 1] > 1.0 {
            return Err(Error::InvalidParameter("CDF values must lie in [0, 1]".into()));
        }
        Ok(Self { support, cdf })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn cdf_values(&self) -> &[f64] {
        &self.cdf
    }

    fn clamped(&self, g: usize) -> f64 {
        self.cdf[g].clamp(CDF_EPS, 1.0 - CDF_EPS)
    }

    fn width(&self) -> f64 {
        self.support[self.support.len() - 1] - self.support[0]
    }

    /// Density floor used inside flat cells and outside the grid.
    fn density_floor(&self) -> f64 {
        CDF_EPS / self.width()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let s = &self.support;
        let last = s.len() - 1;
        if y <= s[0] {
            return if y < s[0] { CDF_EPS } else { self.clamped(0) };
        }
        if y >= s[last] {
            return if y > s[last] { 1.0 - CDF_EPS } else { self.clamped(last) };
        }
        let g = s.partition_point(|&v| v <= y);
        let (y0, y1) = (s[g - 1], s[g]);
        let t = (y - y0) / (y1 - y0);
        let c = self.cdf[g - 1] + t * (self.cdf[g] - self.cdf[g - 1]);
        c.clamp(CDF_EPS, 1.0 - CDF_EPS)
    }

    pub fn quantile(&self, tau: f64) -> f64 {
        let s = &self.support;
        // inverts the same interpolant `cdf` uses
        let g = (0..s.len()).find(|&g| self.cdf[g] >= tau);
        match g {
            None => s[s.len() - 1],
            Some(0) => s[0],
            Some(g) => {
                let (c0, c1) = (self.cdf[g - 1], self.cdf[g]);
                s[g - 1] + (tau - c0) / (c1 - c0) * (s[g] - s[g - 1])
            }
        }
    }

    pub fn log_density(&self, y: f64) -> f64 {
        let s = &self.support;
        let floor = self.density_floor();
        if y < s[0] || y > s[s.len() - 1] {
            return floor.ln();
        }
        let g = s.partition_point(|&v| v <= y).clamp(1, s.len() - 1);
        let dens = (self.clamped(g) - self.clamped(g - 1)) / (s[g] - s[g - 1]);
        dens.max(floor).ln()
    }

    /// Moments treating cell mass as uniform and the clamped tails as point
    /// masses at the grid ends.
    pub fn mean_variance(&self) -> (f64, f64) {
        let s = &self.support;
        let last = s.len() - 1;
        let lo = self.clamped(0);
        let hi = 1.0 - self.clamped(last);
        let mut m1 = lo * s[0] + hi * s[last];
        let mut m2 = lo * s[0] * s[0] + hi * s[last] * s[last];
        for g in 1..s.len() {
            let mass = self.clamped(g) - self.clamped(g - 1);
            let mid = 0.5 * (s[g] + s[g - 1]);
            let w = s[g] - s[g - 1];
            m1 += mass * mid;
            m2 += mass * (mid * mid + w * w / 12.0);
        }
        (m1, (m2 - m1 * m1).max(0.0))
    }
}

/// Per-dimension grid CDFs; dimensions are treated as independent.
#[derive(Debug, Clone, PartialEq)]
pub struct NonparametricDistribution {
    dims: Vec<GridCdf>,
}

impl NonparametricDistribution {
    pub fn new(dims: Vec<GridCdf>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidParameter("zero-dimensional prediction".into()));
        }
        Ok(Self { dims })
    }

    pub fn k(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[GridCdf] {
        &self.dims
    }

    pub fn cdf(&self, y: f64, dim: usize) -> Result<f64> {
        check_dim(dim, self.k())?;
        check_finite(y)?;
        Ok(self.dims[dim].cdf(y))
    }

    pub fn quantile(&self, tau: f64, dim: usize) -> Result<f64> {
        check_dim(dim, self.k())?;
        check_level(tau)?;
        Ok(self.dims[dim].quantile(tau))
    }

    pub fn marginal_log_density(&self, y: f64, dim: usize) -> Result<f64> {
        check_dim(dim, self.k())?;
        check_finite(y)?;
        Ok(self.dims[dim].log_density(y))
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: y.len(),
            });
        }
        y.iter()
            .enumerate()
            .map(|(d, &v)| self.marginal_log_density(v, d))
            .sum()
    }
}

/// Any predictive distribution the calibrators consume or produce.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Gaussian(GaussianPrediction),
    Cauchy(CauchyPrediction),
    Grid(NonparametricDistribution),
}

impl From<GaussianPrediction> for Prediction {
    fn from(g: GaussianPrediction) -> Self {
        Prediction::Gaussian(g)
    }
}

impl From<CauchyPrediction> for Prediction {
    fn from(c: CauchyPrediction) -> Self {
        Prediction::Cauchy(c)
    }
}

impl From<NonparametricDistribution> for Prediction {
    fn from(n: NonparametricDistribution) -> Self {
        Prediction::Grid(n)
    }
}

impl Prediction {
    pub fn k(&self) -> usize {
        match self {
            Prediction::Gaussian(g) => g.k(),
            Prediction::Cauchy(c) => c.k(),
            Prediction::Grid(n) => n.k(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Prediction::Gaussian(_) => "gaussian",
            Prediction::Cauchy(_) => "cauchy",
            Prediction::Grid(_) => "grid",
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianPrediction> {
        match self {
            Prediction::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    pub fn cdf(&self, y: f64, dim: usize) -> Result<f64> {
        match self {
            Prediction::Gaussian(g) => g.cdf(y, dim),
            Prediction::Cauchy(c) => c.cdf(y, dim),
            Prediction::Grid(n) => n.cdf(y, dim),
        }
    }

    pub fn quantile(&self, tau: f64, dim: usize) -> Result<f64> {
        match self {
            Prediction::Gaussian(g) => g.quantile(tau, dim),
            Prediction::Cauchy(c) => c.quantile(tau, dim),
            Prediction::Grid(n) => n.quantile(tau, dim),
        }
    }

    pub fn marginal_log_density(&self, y: f64, dim: usize) -> Result<f64> {
        match self {
            Prediction::Gaussian(g) => g.marginal_log_density(y, dim),
            Prediction::Cauchy(c) => c.marginal_log_density(y, dim),
            Prediction::Grid(n) => n.marginal_log_density(y, dim),
        }
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        match self {
            Prediction::Gaussian(g) => g.log_density(y),
            Prediction::Cauchy(c) => c.log_density(y),
            Prediction::Grid(n) => n.log_density(y),
        }
    }

    /// Point estimate used for squared errors.
    pub fn center(&self, dim: usize) -> f64 {
        match self {
            Prediction::Gaussian(g) => g.mean()[dim],
            Prediction::Cauchy(c) => c.location()[dim],
            Prediction::Grid(n) => n.dims()[dim].mean_variance().0,
        }
    }

    /// Marginal variance; `None` for Cauchy.
    pub fn variance(&self, dim: usize) -> Option<f64> {
        match self {
            Prediction::Gaussian(g) => Some(g.variance(dim)),
            Prediction::Cauchy(_) => None,
            Prediction::Grid(n) => Some(n.dims()[dim].mean_variance().1),
        }
    }

    /// Dispersion statistic used for binning: standard deviation where it
    /// exists, the Cauchy scale otherwise.
    pub fn spread(&self, dim: usize) -> f64 {
        match self {
            Prediction::Cauchy(c) => c.scale()[dim],
            other => other.variance(dim).unwrap_or(f64::NAN).sqrt(),
        }
    }
}
