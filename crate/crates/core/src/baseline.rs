//! Global (input-independent) calibrators: isotonic regression on the
//! predicted CDF and scalar variance scaling. Both fit each output dimension
//! independently.

use serde::{Deserialize, Serialize};

use crate::dataset::CalibrationDataset;
use crate::dist::{GaussianPrediction, GaussianScale, GridCdf, NonparametricDistribution, Prediction, CDF_EPS};
use crate::error::{Error, Result};

/// Default number of grid points for nonparametric outputs.
pub const DEFAULT_GRID_POINTS: usize = 512;

/// Probability mass left outside the output grid on each side.
pub const GRID_TAIL: f64 = 1e-4;

/// Weighted pool-adjacent-violators. Returns the L2-optimal nondecreasing fit
/// to `values` (taken in the given order), one fitted value per input.
pub fn pav(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    // blocks of (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m1, w1, c1) = blocks[blocks.len() - 1];
            let (m0, w0, c0) = blocks[blocks.len() - 2];
            if m0 <= m1 {
                break;
            }
            blocks.pop();
            let w = w0 + w1;
            *blocks.last_mut().unwrap() = ((m0 * w0 + m1 * w1) / w, w, c0 + c1);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// A monotone map on [0, 1], piecewise linear through its breakpoints and
/// anchored at (0, 0) and (1, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl IsotonicMap {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: breakpoints.len(),
                got: values.len(),
            });
        }
        if breakpoints.is_empty() {
            return Err(Error::InvalidParameter("isotonic map needs breakpoints".into()));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !breakpoints.iter().all(in_unit) || !values.iter().all(in_unit) {
            return Err(Error::InvalidParameter("isotonic map must live in [0, 1]".into()));
        }
        if breakpoints.windows(2).any(|w| w[1] < w[0]) || values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("isotonic map must be nondecreasing".into()));
        }
        if values[values.len() - 1] <= values[0] && values.len() > 1 {
            return Err(Error::InvalidParameter(
                "degenerate isotonic map: constant values do not define a CDF".into(),
            ));
        }
        Ok(Self { breakpoints, values })
    }

    pub fn identity() -> Self {
        Self {
            breakpoints: vec![0.0, 1.0],
            values: vec![0.0, 1.0],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, p: f64) -> f64 {
        let (xs, ys) = (&self.breakpoints, &self.values);
        let g = xs.partition_point(|&x| x <= p);
        let (x0, y0) = if g == 0 { (0.0, 0.0) } else { (xs[g - 1], ys[g - 1]) };
        let (x1, y1) = if g == xs.len() { (1.0, 1.0) } else { (xs[g], ys[g]) };
        let v = if x1 > x0 { y0 + (p - x0) / (x1 - x0) * (y1 - y0) } else { y1.max(y0) };
        v.clamp(CDF_EPS, 1.0 - CDF_EPS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicCalibrator {
    pub maps: Vec<IsotonicMap>,
    pub grid_points: usize,
}

/// Fit per-dimension isotonic maps from PIT values `p_i = F_i(y_i)` to their
/// empirical CDF (mid-rank for ties).
pub fn isotonic_fit(dataset: &CalibrationDataset) -> Result<IsotonicCalibrator> {
    if dataset.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: dataset.len(),
        });
    }
    let n = dataset.len() as f64;
    let mut maps = Vec::with_capacity(dataset.k());
    for d in 0..dataset.k() {
        let mut pit = dataset
            .samples()
            .iter()
            .map(|s| Ok(s.prediction.cdf(s.ground_truth[d], d)?.clamp(CDF_EPS, 1.0 - CDF_EPS)))
            .collect::<Result<Vec<f64>>>()?;
        pit.sort_by(f64::total_cmp);
        let mut xs = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        let mut i = 0;
        while i < pit.len() {
            let mut j = i;
            while j + 1 < pit.len() && pit[j + 1] == pit[i] {
                j += 1;
            }
            // ranks i+1..=j+1, mid-rank
            let mid_rank = 0.5 * ((i + 1) + (j + 1)) as f64;
            xs.push(pit[i]);
            targets.push(mid_rank / n);
            weights.push((j - i + 1) as f64);
            i = j + 1;
        }
        let fitted = pav(&targets, &weights);
        maps.push(IsotonicMap::new(xs, fitted)?);
    }
    Ok(IsotonicCalibrator {
        maps,
        grid_points: DEFAULT_GRID_POINTS,
    })
}

/// Grid spanning the input's `[1e-4, 1 − 1e-4]` quantile range.
pub(crate) fn output_grid(prediction: &Prediction, dim: usize, points: usize) -> Result<Vec<f64>> {
    let lo = prediction.quantile(GRID_TAIL, dim)?;
    let hi = prediction.quantile(1.0 - GRID_TAIL, dim)?;
    if !(hi > lo) {
        return Err(Error::InvalidParameter("degenerate quantile range for output grid".into()));
    }
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|i| lo + i as f64 * step).collect())
}

/// Calibrated CDF `ĝ(y) = map(F(y))` on the output grid.
pub fn isotonic_apply(calibrator: &IsotonicCalibrator, prediction: &Prediction) -> Result<NonparametricDistribution> {
    if prediction.k() != calibrator.maps.len() {
        return Err(Error::DimensionMismatch {
            expected: calibrator.maps.len(),
            got: prediction.k(),
        });
    }
    let dims = calibrator
        .maps
        .iter()
        .enumerate()
        .map(|(d, map)| {
            let support = output_grid(prediction, d, calibrator.grid_points.max(2))?;
            let cdf = support
                .iter()
                .map(|&y| Ok(map.eval(prediction.cdf(y, d)?)))
                .collect::<Result<Vec<_>>>()?;
            GridCdf::new(support, cdf)
        })
        .collect::<Result<Vec<_>>>()?;
    NonparametricDistribution::new(dims)
}

/// Per-dimension variance multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceScaler {
    weights: Vec<f64>,
}

/// Lower bound on a fitted variance weight.
pub const MIN_VARIANCE_WEIGHT: f64 = 1e-8;

impl VarianceScaler {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidParameter("variance weights must be positive".into()));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Closed-form NLL minimizer `w = mean((y − μ)² / σ²)` per dimension.
pub fn variance_scaling_fit(dataset: &CalibrationDataset) -> Result<VarianceScaler> {
    dataset.ensure_nonempty()?;
    let n = dataset.len() as f64;
    let mut weights = vec![0.0; dataset.k()];
    for s in dataset.samples() {
        for (d, w) in weights.iter_mut().enumerate() {
            let var = s.prediction.variance(d);
            if !(var > 0.0) {
                return Err(Error::InvalidParameter("zero predicted variance".into()));
            }
            let r = s.ground_truth[d] - s.prediction.mean()[d];
            *w += r * r / var;
        }
    }
    for (d, w) in weights.iter_mut().enumerate() {
        *w /= n;
        if *w < MIN_VARIANCE_WEIGHT {
            log::warn!("variance scaling weight for dim {d} is {w:e}; clamped to {MIN_VARIANCE_WEIGHT:e}");
            *w = MIN_VARIANCE_WEIGHT;
        }
    }
    VarianceScaler::new(weights)
}

/// Mean unchanged, variances multiplied by `w` (full covariances by
/// `√w_i √w_j`).
pub fn variance_scaling_apply(scaler: &VarianceScaler, prediction: &GaussianPrediction) -> Result<GaussianPrediction> {
    let w = scaler.weights();
    if prediction.k() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: prediction.k(),
        });
    }
    match prediction.scale() {
        GaussianScale::Diagonal(v) => GaussianPrediction::diagonal(
            prediction.mean().to_vec(),
            v.iter().zip(w).map(|(a, b)| a * b).collect(),
        ),
        GaussianScale::Full(c) => {
            let mut out = c.clone();
            for i in 0..out.nrows() {
                for j in 0..out.ncols() {
                    out[(i, j)] *= (w[i] * w[j]).sqrt();
                }
            }
            GaussianPrediction::full(prediction.mean().to_vec(), out)
        }
    }
}
