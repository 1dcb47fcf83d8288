//! Seeded synthetic calibration problems with known ground-truth laws.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationDataset, Sample};
use crate::dist::{GaussianPrediction, Prediction};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Cosine,
    GaussianConstMiscal,
    CauchyNoise,
    CorrelatedMv,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::Cosine,
        SynthKind::GaussianConstMiscal,
        SynthKind::CauchyNoise,
        SynthKind::CorrelatedMv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Cosine => "cosine",
            SynthKind::GaussianConstMiscal => "gaussian-const-miscal",
            SynthKind::CauchyNoise => "cauchy-noise",
            SynthKind::CorrelatedMv => "correlated-mv",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown synthetic kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n: usize,
    pub seed: u64,
    /// Factor applied to the true noise standard deviation (cosine) or to
    /// the reported standard deviation's relation with the truth (others).
    pub miscal: f64,
    pub rho: f64,
    pub k: usize,
    /// Cosine only: report one global variance for every sample, so the
    /// miscalibration varies with the predicted mean alone.
    pub constant_variance: bool,
}

impl SynthConfig {
    pub fn new(kind: SynthKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            seed,
            miscal: 1.0,
            rho: 0.0,
            k: if kind == SynthKind::CorrelatedMv { 2 } else { 1 },
            constant_variance: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be ≥ 1".into()));
        }
        if !(self.miscal.is_finite() && self.miscal > 0.0) {
            return Err(Error::InvalidParameter(format!("miscalibration factor must be > 0, got {}", self.miscal)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!("ρ must lie in (−1, 1), got {}", self.rho)));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("K must be ≥ 1".into()));
        }
        Ok(())
    }
}

pub fn generate(config: &SynthConfig) -> Result<CalibrationDataset> {
    match config.kind {
        SynthKind::Cosine => gen_cosine(config),
        SynthKind::GaussianConstMiscal => gen_gaussian_const_miscal(config),
        SynthKind::CauchyNoise => gen_cauchy_noise(config),
        SynthKind::CorrelatedMv => gen_correlated_mv(config),
    }
}

/// True noise level of the cosine task; grows toward the maxima of cos.
pub fn cosine_noise_std(x: f64) -> f64 {
    0.05 + 0.45 * (1.0 + x.cos()) / 2.0
}

/// Average of [`cosine_noise_std`] over one period.
pub const COSINE_MEAN_STD: f64 = 0.275;

/// `y = cos x + s(x) ε` with `x ~ U[0, 2π]`. Predictions carry the true mean
/// and standard deviation `c · s(x)` (or `c · s̄` with `constant_variance`).
pub fn gen_cosine(config: &SynthConfig) -> Result<CalibrationDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ds = CalibrationDataset::new(1);
    for _ in 0..config.n {
        let x = rng.random_range(0.0..2.0 * PI);
        let s = cosine_noise_std(x);
        let e: f64 = rng.sample(StandardNormal);
        let y = x.cos() + s * e;
        let stated = config.miscal * if config.constant_variance { COSINE_MEAN_STD } else { s };
        ds.push(Sample {
            prediction: GaussianPrediction::diagonal(vec![x.cos()], vec![stated * stated])?,
            ground_truth: vec![y],
            image_id: None,
        })?;
    }
    Ok(ds)
}

fn random_prediction(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = (0..k).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let sd = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
    (mean, sd)
}

/// `y = μ + c σ ε`: stated standard deviations are off by the constant `c`,
/// so the ideal variance weight is `c²`.
pub fn gen_gaussian_const_miscal(config: &SynthConfig) -> Result<CalibrationDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ds = CalibrationDataset::new(config.k);
    for _ in 0..config.n {
        let (mean, sd) = random_prediction(&mut rng, config.k);
        let y = mean
            .iter()
            .zip(&sd)
            .map(|(m, s)| m + config.miscal * s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ds.push(Sample {
            prediction: GaussianPrediction::diagonal(mean, sd.iter().map(|s| s * s).collect())?,
            ground_truth: y,
            image_id: None,
        })?;
    }
    Ok(ds)
}

/// `y = μ + Cauchy(0, c σ)` with Gaussian predictions `N(μ, σ²)`.
pub fn gen_cauchy_noise(config: &SynthConfig) -> Result<CalibrationDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Cauchy::new(0.0, 1.0).expect("valid Cauchy");
    let mut ds = CalibrationDataset::new(config.k);
    for _ in 0..config.n {
        let (mean, sd) = random_prediction(&mut rng, config.k);
        let y = mean
            .iter()
            .zip(&sd)
            .map(|(m, s)| m + config.miscal * s * unit.sample(&mut rng))
            .collect();
        ds.push(Sample {
            prediction: GaussianPrediction::diagonal(mean, sd.iter().map(|s| s * s).collect())?,
            ground_truth: y,
            image_id: None,
        })?;
    }
    Ok(ds)
}

/// Residuals with equicorrelation `ρ` between all K dimensions and
/// per-sample standard deviations; predictions report the diagonal only.
pub fn gen_correlated_mv(config: &SynthConfig) -> Result<CalibrationDataset> {
    config.validate()?;
    let k = config.k;
    if k < 2 {
        return Err(Error::InvalidParameter("correlated data needs K ≥ 2".into()));
    }
    let corr = nalgebra::DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { config.rho });
    let chol = linalg::cholesky(&corr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ds = CalibrationDataset::new(k);
    for _ in 0..config.n {
        let (mean, sd) = random_prediction(&mut rng, k);
        let e: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let y = (0..k)
            .map(|i| {
                let z: f64 = (0..=i).map(|j| chol[(i, j)] * e[j]).sum();
                mean[i] + sd[i] * z
            })
            .collect();
        ds.push(Sample {
            prediction: GaussianPrediction::diagonal(mean, sd.iter().map(|s| s * s).collect())?,
            ground_truth: y,
            image_id: None,
        })?;
    }
    Ok(ds)
}

/// Fraction of samples whose target lies at or below the predicted
/// τ-quantile in dimension `dim`. Deliberately written without the metrics
/// module so it can cross-check it.
pub fn coverage_oracle(predictions: &[Prediction], targets: &[Vec<f64>], dim: usize, tau: f64) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            got: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut covered = 0u64;
    for i in 0..predictions.len() {
        let q = predictions[i].quantile(tau, dim)?;
        covered += u64::from(targets[i][dim] <= q);
    }
    Ok(covered as f64 / predictions.len() as f64)
}
