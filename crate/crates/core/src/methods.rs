//! GP recalibration heads: the likelihoods used for training and the apply
//! paths that turn posterior latent draws into calibrated distributions.
//!
//! Every head reads its latent vector `f ∈ ℝᴾ` as follows.
//!
//! | head        | P              | parameters                                   |
//! |-------------|----------------|----------------------------------------------|
//! | beta        | 3K             | `a = e^{f₀}`, `b = e^{f₁}`, `c = f₂` per dim |
//! | normal      | K              | variance weight `w = e^f` per dim            |
//! | cauchy      | K              | scale weight `w = e^f`, `γ = wσ`             |
//! | normal_mv   | K              | `Σ̂ = D_w^{½} Σ D_w^{½}`, joint density        |
//! | covariance  | K(K+1)/2 + K   | `w_L = 1 + f` on strict-lower LDL entries, `w_D = e^f` |
//!
//! In the covariance head the first K(K+1)/2 latents follow the row-major
//! lower triangle; the slots on the diagonal are carried but unused since `L`
//! keeps its unit diagonal.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{output_grid, DEFAULT_GRID_POINTS};
use crate::dataset::CalibrationDataset;
use crate::dist::{CauchyPrediction, GaussianPrediction, GridCdf, NonparametricDistribution, Prediction, CDF_EPS};
use crate::error::{Error, Result};
use crate::gp::{derive_seed, fit_svgp, GpCalibrator, GpConfig, GpPosterior, HeadKind, KernelInput, Likelihood, TrainingLog};
use crate::linalg;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Eigenvalue floor (relative to the largest) for template repair.
const TEMPLATE_EIGEN_FLOOR: f64 = 1e-6;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Beta-calibration link parameters for one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaLinkParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl BetaLinkParams {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta link needs a, b > 0, got a = {a}, b = {b}")));
        }
        if !c.is_finite() {
            return Err(Error::NonFinite("beta link offset"));
        }
        Ok(Self { a, b, c })
    }

    pub fn identity() -> Self {
        Self { a: 1.0, b: 1.0, c: 0.0 }
    }

    fn from_latent(f: &[f64]) -> Self {
        Self {
            a: f[0].exp(),
            b: f[1].exp(),
            c: f[2],
        }
    }
}

/// `g(p) = logistic(a ln p − b ln(1−p) + c)`.
pub fn beta_link(p: f64, params: &BetaLinkParams) -> f64 {
    let p = p.clamp(CDF_EPS, 1.0 - CDF_EPS);
    logistic(params.a * p.ln() - params.b * (-p).ln_1p() + params.c)
}

/// `g′(p) = g(1−g)(a/p + b/(1−p))`.
pub fn beta_link_derivative(p: f64, params: &BetaLinkParams) -> f64 {
    let p = p.clamp(CDF_EPS, 1.0 - CDF_EPS);
    let g = beta_link(p, params);
    g * (1.0 - g) * (params.a / p + params.b / (1.0 - p))
}

/// Marginal correlation matrix of normalized residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTemplate {
    rho: Vec<Vec<f64>>,
}

impl CorrelationTemplate {
    /// Validates symmetry and unit diagonal, then repairs to SPD by eigenvalue
    /// clipping and renormalization to unit diagonal.
    pub fn new(rho: DMatrix<f64>) -> Result<Self> {
        let k = rho.nrows();
        if rho.ncols() != k || k == 0 {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: rho.ncols(),
            });
        }
        if rho.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("correlation template"));
        }
        if !linalg::is_symmetric(&rho, 1e-9) {
            return Err(Error::InvalidParameter("correlation template must be symmetric".into()));
        }
        if rho.iter().any(|v| v.abs() > 1.0 + 1e-12) || (0..k).any(|i| (rho[(i, i)] - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidParameter("correlations must lie in [−1, 1] with unit diagonal".into()));
        }
        let repaired = linalg::clip_eigenvalues(&rho, TEMPLATE_EIGEN_FLOOR);
        let scale: Vec<f64> = (0..k).map(|i| repaired[(i, i)].sqrt()).collect();
        let rho = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if i == j { 1.0 } else { repaired[(i, j)] / (scale[i] * scale[j]) })
                    .collect()
            })
            .collect();
        Ok(Self { rho })
    }

    pub fn k(&self) -> usize {
        self.rho.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |i, j| self.rho[i][j])
    }

    /// `Σ_ij = ρ_ij σ_i σ_j` from the prediction's marginal variances.
    pub fn covariance_for(&self, prediction: &GaussianPrediction) -> Result<DMatrix<f64>> {
        if prediction.k() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: prediction.k(),
            });
        }
        let sd: Vec<f64> = prediction.variances().iter().map(|v| v.sqrt()).collect();
        let k = self.k();
        Ok(DMatrix::from_fn(k, k, |i, j| self.rho[i][j] * sd[i] * sd[j]))
    }
}

/// Pearson correlations of `z = (y − μ)/σ` over the dataset.
pub fn correlation_template(dataset: &CalibrationDataset) -> Result<CorrelationTemplate> {
    let k = dataset.k();
    if k < 2 {
        return Err(Error::InvalidParameter("a correlation template needs K ≥ 2".into()));
    }
    if dataset.len() < 10 {
        return Err(Error::TooFewSamples {
            needed: 10,
            got: dataset.len(),
        });
    }
    let n = dataset.len() as f64;
    let z: Vec<Vec<f64>> = dataset
        .samples()
        .iter()
        .map(|s| {
            (0..k)
                .map(|d| (s.ground_truth[d] - s.prediction.mean()[d]) / s.prediction.variance(d).sqrt())
                .collect()
        })
        .collect();
    let mean: Vec<f64> = (0..k).map(|d| z.iter().map(|r| r[d]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for row in &z {
        for i in 0..k {
            for j in 0..=i {
                cov[(i, j)] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..k {
        if !(cov[(i, i)] > 0.0) {
            return Err(Error::InvalidParameter(format!("residual column {i} has zero variance")));
        }
    }
    let rho = DMatrix::from_fn(k, k, |i, j| {
        let (a, b) = if i >= j { (i, j) } else { (j, i) };
        if i == j {
            1.0
        } else {
            (cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt()).clamp(-1.0, 1.0)
        }
    });
    CorrelationTemplate::new(rho)
}

fn residuals(dataset: &CalibrationDataset) -> Vec<Vec<f64>> {
    dataset
        .samples()
        .iter()
        .map(|s| s.ground_truth.iter().zip(s.prediction.mean()).map(|(y, m)| y - m).collect())
        .collect()
}

/// Per-dimension Gaussian likelihood with variance `e^f σ²`.
pub struct NormalLikelihood {
    resid: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
}

impl NormalLikelihood {
    pub fn new(dataset: &CalibrationDataset) -> Self {
        Self {
            resid: residuals(dataset),
            var: dataset.samples().iter().map(|s| s.prediction.variances()).collect(),
        }
    }
}

impl Likelihood for NormalLikelihood {
    fn n_latent(&self) -> usize {
        self.var.first().map_or(0, Vec::len)
    }

    fn log_lik(&self, index: usize, latent: &[f64], grad: &mut [f64]) -> f64 {
        let mut ll = 0.0;
        for (d, &f) in latent.iter().enumerate() {
            let r = self.resid[index][d];
            let v = self.var[index][d];
            let q = r * r / v * (-f).exp();
            ll += -0.5 * (LN_2PI + f + v.ln() + q);
            grad[d] = -0.5 + 0.5 * q;
        }
        ll
    }
}

/// Per-dimension Cauchy likelihood at `x0 = μ`, `γ = e^f σ`.
pub struct CauchyLikelihood {
    resid: Vec<Vec<f64>>,
    sd: Vec<Vec<f64>>,
}

impl CauchyLikelihood {
    pub fn new(dataset: &CalibrationDataset) -> Self {
        Self {
            resid: residuals(dataset),
            sd: dataset
                .samples()
                .iter()
                .map(|s| s.prediction.variances().iter().map(|v| v.sqrt()).collect())
                .collect(),
        }
    }
}

impl Likelihood for CauchyLikelihood {
    fn n_latent(&self) -> usize {
        self.sd.first().map_or(0, Vec::len)
    }

    fn log_lik(&self, index: usize, latent: &[f64], grad: &mut [f64]) -> f64 {
        let mut ll = 0.0;
        for (d, &f) in latent.iter().enumerate() {
            let gamma = f.exp() * self.sd[index][d];
            let u = self.resid[index][d] / gamma;
            let u2 = u * u;
            ll += -std::f64::consts::PI.ln() - gamma.ln() - u2.ln_1p();
            grad[d] = -1.0 + 2.0 * u2 / (1.0 + u2);
        }
        ll
    }
}

/// Joint Gaussian likelihood with `Σ̂ = D_w^{½} Σ D_w^{½}`, `w = e^f`.
pub struct NormalMvLikelihood {
    resid: Vec<Vec<f64>>,
    chol: Vec<DMatrix<f64>>,
    log_det: Vec<f64>,
}

impl NormalMvLikelihood {
    pub fn new(dataset: &CalibrationDataset) -> Result<Self> {
        let mut chol = Vec::with_capacity(dataset.len());
        let mut log_det = Vec::with_capacity(dataset.len());
        for s in dataset.samples() {
            let (l, _) = linalg::cholesky_jittered(&s.prediction.covariance())?;
            log_det.push(linalg::log_det_cholesky(&l));
            chol.push(l);
        }
        Ok(Self {
            resid: residuals(dataset),
            chol,
            log_det,
        })
    }
}

impl Likelihood for NormalMvLikelihood {
    fn n_latent(&self) -> usize {
        self.resid.first().map_or(0, Vec::len)
    }

    fn log_lik(&self, index: usize, latent: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.chol[index];
        let rt: Vec<f64> = self.resid[index]
            .iter()
            .zip(latent)
            .map(|(r, f)| r * (-0.5 * f).exp())
            .collect();
        let u = linalg::solve_lower(l, &rt);
        let z = linalg::solve_lower_transpose(l, &u);
        let maha: f64 = u.iter().map(|v| v * v).sum();
        let k = rt.len() as f64;
        for d in 0..rt.len() {
            grad[d] = -0.5 + 0.5 * rt[d] * z[d];
        }
        -0.5 * (k * LN_2PI + self.log_det[index] + latent.iter().sum::<f64>() + maha)
    }
}

/// Density of `y` under the beta-warped CDF `g(F(y))`.
pub struct BetaLikelihood {
    pit: Vec<Vec<f64>>,
    base_log_density: Vec<Vec<f64>>,
}

impl BetaLikelihood {
    pub fn new(dataset: &CalibrationDataset) -> Result<Self> {
        let k = dataset.k();
        let mut pit = Vec::with_capacity(dataset.len());
        let mut dens = Vec::with_capacity(dataset.len());
        for s in dataset.samples() {
            let mut p = Vec::with_capacity(k);
            let mut ld = Vec::with_capacity(k);
            for d in 0..k {
                p.push(s.prediction.cdf(s.ground_truth[d], d)?.clamp(CDF_EPS, 1.0 - CDF_EPS));
                ld.push(s.prediction.marginal_log_density(s.ground_truth[d], d)?);
            }
            pit.push(p);
            dens.push(ld);
        }
        Ok(Self {
            pit,
            base_log_density: dens,
        })
    }
}

impl Likelihood for BetaLikelihood {
    fn n_latent(&self) -> usize {
        3 * self.pit.first().map_or(0, Vec::len)
    }

    fn log_lik(&self, index: usize, latent: &[f64], grad: &mut [f64]) -> f64 {
        let mut ll = 0.0;
        for (d, &p) in self.pit[index].iter().enumerate() {
            let f = &latent[3 * d..3 * d + 3];
            let BetaLinkParams { a, b, c } = BetaLinkParams::from_latent(f);
            let (lp, lq) = (p.ln(), (-p).ln_1p());
            let z = a * lp - b * lq + c;
            let g = logistic(z);
            let h = a / p + b / (1.0 - p);
            ll += -softplus(-z) - softplus(z) + h.ln() + self.base_log_density[index][d];
            let slope = 1.0 - 2.0 * g;
            grad[3 * d] = a * (slope * lp + 1.0 / (p * h));
            grad[3 * d + 1] = b * (-slope * lq + 1.0 / ((1.0 - p) * h));
            grad[3 * d + 2] = slope;
        }
        ll
    }
}

/// Where the covariance head takes its base covariance from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// Estimation: a global correlation template scaled by the predicted
    /// standard deviations.
    Template(CorrelationTemplate),
    /// Recalibration: the prediction's own covariance.
    Input,
}

impl CovarianceSource {
    pub fn base_covariance(&self, prediction: &GaussianPrediction) -> Result<DMatrix<f64>> {
        match self {
            CovarianceSource::Template(t) => t.covariance_for(prediction),
            CovarianceSource::Input => Ok(prediction.covariance()),
        }
    }
}

fn strict_lower_slot(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Multivariate Gaussian likelihood of the LDL-rescaled covariance.
pub struct CovarianceLikelihood {
    k: usize,
    resid: Vec<Vec<f64>>,
    ldl: Vec<linalg::Ldl>,
}

impl CovarianceLikelihood {
    pub fn new(dataset: &CalibrationDataset, source: &CovarianceSource) -> Result<Self> {
        let ldl = dataset
            .samples()
            .iter()
            .map(|s| linalg::ldl_decompose(&source.base_covariance(&s.prediction)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            k: dataset.k(),
            resid: residuals(dataset),
            ldl,
        })
    }
}

/// `L̂` and `D̂` from base factors and a latent (or averaged weight) vector.
fn rescaled_factors(ldl: &linalg::Ldl, w_l: impl Fn(usize) -> f64, w_d: impl Fn(usize) -> f64) -> (DMatrix<f64>, Vec<f64>) {
    let k = ldl.d.len();
    let mut l = ldl.l.clone();
    for i in 0..k {
        for j in 0..i {
            l[(i, j)] *= w_l(strict_lower_slot(i, j));
        }
    }
    let d = (0..k).map(|i| ldl.d[i] * w_d(i)).collect();
    (l, d)
}

impl Likelihood for CovarianceLikelihood {
    fn n_latent(&self) -> usize {
        HeadKind::Covariance.n_latent(self.k)
    }

    fn log_lik(&self, index: usize, latent: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.k;
        let off = k * (k + 1) / 2;
        let base = &self.ldl[index];
        let (l, d) = rescaled_factors(base, |s| 1.0 + latent[s], |i| latent[off + i].exp());
        let v = linalg::solve_unit_lower(&l, &self.resid[index]);
        let scaled: Vec<f64> = v.iter().zip(&d).map(|(v, d)| v / d).collect();
        let eta = linalg::solve_unit_lower_transpose(&l, &scaled);
        let mut ll = -0.5 * k as f64 * LN_2PI;
        for i in 0..k {
            ll -= 0.5 * (d[i].ln() + v[i] * v[i] / d[i]);
            grad[off + i] = -0.5 + 0.5 * v[i] * v[i] / d[i];
            grad[strict_lower_slot(i, i)] = 0.0;
            for j in 0..i {
                grad[strict_lower_slot(i, j)] = eta[i] * base.l[(i, j)] * v[j];
            }
        }
        ll
    }
}

/// Which GP recalibration a model performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpMethod {
    Beta,
    Normal,
    NormalMv,
    Cauchy,
    CovarianceEstimation,
    CovarianceRecalibration,
}

impl GpMethod {
    pub fn head(self) -> HeadKind {
        match self {
            GpMethod::Beta => HeadKind::Beta,
            GpMethod::Normal => HeadKind::Normal,
            GpMethod::NormalMv => HeadKind::NormalMv,
            GpMethod::Cauchy => HeadKind::Cauchy,
            GpMethod::CovarianceEstimation | GpMethod::CovarianceRecalibration => HeadKind::Covariance,
        }
    }
}

/// A fitted GP calibrator together with what its head needs at apply time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub method: GpMethod,
    pub calibrator: GpCalibrator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_source: Option<CovarianceSource>,
    pub grid_points: usize,
}

pub fn kernel_inputs(dataset: &CalibrationDataset) -> Vec<KernelInput> {
    dataset
        .samples()
        .iter()
        .map(|s| KernelInput::from_prediction(&s.prediction))
        .collect()
}

/// Trains the GP calibrator for `method` on `dataset`.
pub fn gp_fit(dataset: &CalibrationDataset, method: GpMethod, config: &GpConfig) -> Result<(GpModel, TrainingLog)> {
    dataset.ensure_nonempty()?;
    let k = dataset.k();
    let inputs = kernel_inputs(dataset);
    let covariance_source = match method {
        GpMethod::CovarianceEstimation => Some(CovarianceSource::Template(correlation_template(dataset)?)),
        GpMethod::CovarianceRecalibration => Some(CovarianceSource::Input),
        _ => None,
    };
    let head = method.head();
    let (calibrator, log) = match method {
        GpMethod::Beta => fit_svgp(&inputs, &BetaLikelihood::new(dataset)?, head, k, config)?,
        GpMethod::Normal => fit_svgp(&inputs, &NormalLikelihood::new(dataset), head, k, config)?,
        GpMethod::NormalMv => fit_svgp(&inputs, &NormalMvLikelihood::new(dataset)?, head, k, config)?,
        GpMethod::Cauchy => fit_svgp(&inputs, &CauchyLikelihood::new(dataset), head, k, config)?,
        GpMethod::CovarianceEstimation | GpMethod::CovarianceRecalibration => {
            let source = covariance_source.as_ref().expect("set above");
            fit_svgp(&inputs, &CovarianceLikelihood::new(dataset, source)?, head, k, config)?
        }
    };
    Ok((
        GpModel {
            method,
            calibrator,
            covariance_source,
            grid_points: DEFAULT_GRID_POINTS,
        },
        log,
    ))
}

/// `mc_samples` posterior draws of the latent weight vector at `prediction`.
pub fn posterior_weights(
    calibrator: &GpCalibrator,
    prediction: &GaussianPrediction,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    calibrator
        .posterior()?
        .sample_latents(&KernelInput::from_prediction(prediction), mc_samples, seed)
}

fn check_head(calibrator: &GpCalibrator, head: HeadKind, k: usize) -> Result<()> {
    if calibrator.head != head {
        return Err(Error::Unsupported(format!(
            "calibrator has head {:?}, expected {:?}",
            calibrator.head, head
        )));
    }
    if calibrator.k != k {
        return Err(Error::DimensionMismatch {
            expected: calibrator.k,
            got: k,
        });
    }
    Ok(())
}

fn mean_exp(draws: &[Vec<f64>], slot: usize) -> f64 {
    draws.iter().map(|f| f[slot].exp()).sum::<f64>() / draws.len() as f64
}

fn mean_of(draws: &[Vec<f64>], slot: usize) -> f64 {
    draws.iter().map(|f| f[slot]).sum::<f64>() / draws.len() as f64
}

fn check_mc(mc_samples: usize) -> Result<()> {
    if mc_samples == 0 {
        return Err(Error::InvalidParameter("MC sample count must be ≥ 1".into()));
    }
    Ok(())
}

/// `Σ̂ = D_w^{½} Σ D_w^{½}`; reduces to `w ⊙ σ²` for diagonal inputs.
fn scale_gaussian(prediction: &GaussianPrediction, w: &[f64]) -> Result<GaussianPrediction> {
    if prediction.has_full_covariance() {
        let cov = prediction.covariance();
        let k = w.len();
        let scaled = DMatrix::from_fn(k, k, |i, j| cov[(i, j)] * (w[i] * w[j]).sqrt());
        GaussianPrediction::full(prediction.mean().to_vec(), scaled)
    } else {
        let var = prediction.variances().iter().zip(w).map(|(v, w)| v * w).collect();
        GaussianPrediction::diagonal(prediction.mean().to_vec(), var)
    }
}

fn normal_with(post: &GpPosterior<'_>, prediction: &GaussianPrediction, mc: usize, seed: u64) -> Result<GaussianPrediction> {
    let draws = post.sample_latents(&KernelInput::from_prediction(prediction), mc, seed)?;
    let w: Vec<f64> = (0..prediction.k()).map(|d| mean_exp(&draws, d)).collect();
    scale_gaussian(prediction, &w)
}

/// Variance rescaling `σ̂² = E[w] σ²`; the mean is passed through untouched.
pub fn gp_normal_apply(
    calibrator: &GpCalibrator,
    prediction: &GaussianPrediction,
    mc_samples: usize,
    seed: u64,
) -> Result<GaussianPrediction> {
    check_head(calibrator, HeadKind::Normal, prediction.k())?;
    check_mc(mc_samples)?;
    normal_with(&calibrator.posterior()?, prediction, mc_samples, seed)
}

/// Joint rescaling `Σ̂ = D_w^{½} Σ D_w^{½}` with averaged weights.
pub fn gp_normal_mv_apply(
    calibrator: &GpCalibrator,
    prediction: &GaussianPrediction,
    mc_samples: usize,
    seed: u64,
) -> Result<GaussianPrediction> {
    check_head(calibrator, HeadKind::NormalMv, prediction.k())?;
    check_mc(mc_samples)?;
    normal_with(&calibrator.posterior()?, prediction, mc_samples, seed)
}

fn cauchy_with(post: &GpPosterior<'_>, prediction: &GaussianPrediction, mc: usize, seed: u64) -> Result<CauchyPrediction> {
    let draws = post.sample_latents(&KernelInput::from_prediction(prediction), mc, seed)?;
    let gamma = (0..prediction.k())
        .map(|d| mean_exp(&draws, d) * prediction.variance(d).sqrt())
        .collect();
    CauchyPrediction::new(prediction.mean().to_vec(), gamma)
}

/// Cauchy output at `x0 = μ` with `γ̂ = E[w] σ`.
pub fn gp_cauchy_apply(
    calibrator: &GpCalibrator,
    prediction: &GaussianPrediction,
    mc_samples: usize,
    seed: u64,
) -> Result<CauchyPrediction> {
    check_head(calibrator, HeadKind::Cauchy, prediction.k())?;
    check_mc(mc_samples)?;
    cauchy_with(&calibrator.posterior()?, prediction, mc_samples, seed)
}

fn beta_with(
    post: &GpPosterior<'_>,
    prediction: &GaussianPrediction,
    mc: usize,
    seed: u64,
    grid_points: usize,
) -> Result<NonparametricDistribution> {
    let draws = post.sample_latents(&KernelInput::from_prediction(prediction), mc, seed)?;
    let wrapped = Prediction::Gaussian(prediction.clone());
    let inv = 1.0 / draws.len() as f64;
    let dims = (0..prediction.k())
        .map(|d| {
            let params: Vec<BetaLinkParams> = draws.iter().map(|f| BetaLinkParams::from_latent(&f[3 * d..])).collect();
            let support = output_grid(&wrapped, d, grid_points.max(2))?;
            let mut running: f64 = 0.0;
            let cdf = support
                .iter()
                .map(|&y| {
                    let p = prediction.cdf(y, d)?.clamp(CDF_EPS, 1.0 - CDF_EPS);
                    let (lp, lq) = (p.ln(), (-p).ln_1p());
                    let g: f64 = params.iter().map(|b| logistic(b.a * lp - b.b * lq + b.c)).sum::<f64>() * inv;
                    // guard against rounding breaking monotonicity
                    running = running.max(g.clamp(0.0, 1.0));
                    Ok(running)
                })
                .collect::<Result<Vec<_>>>()?;
            GridCdf::new(support, cdf)
        })
        .collect::<Result<Vec<_>>>()?;
    NonparametricDistribution::new(dims)
}

/// Calibrated CDF: the mean over posterior draws of `g(F(y))` on a grid.
pub fn gp_beta_apply(
    calibrator: &GpCalibrator,
    prediction: &GaussianPrediction,
    mc_samples: usize,
    seed: u64,
) -> Result<NonparametricDistribution> {
    check_head(calibrator, HeadKind::Beta, prediction.k())?;
    check_mc(mc_samples)?;
    beta_with(&calibrator.posterior()?, prediction, mc_samples, seed, DEFAULT_GRID_POINTS)
}

/// Applies averaged weights to the LDL factors of a base covariance.
pub fn rescale_covariance(base: &DMatrix<f64>, w_l: &[f64], w_d: &[f64]) -> Result<DMatrix<f64>> {
    let ldl = linalg::ldl_decompose(base)?;
    let k = ldl.d.len();
    if w_d.len() != k || w_l.len() != k * (k + 1) / 2 {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: w_d.len(),
        });
    }
    if w_d.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidParameter("diagonal weights must be positive".into()));
    }
    let (l, d) = rescaled_factors(&ldl, |s| w_l[s], |i| w_d[i]);
    Ok(linalg::compose_ldl(&l, &d))
}

fn covariance_with(
    post: &GpPosterior<'_>,
    prediction: &GaussianPrediction,
    source: &CovarianceSource,
    mc: usize,
    seed: u64,
) -> Result<GaussianPrediction> {
    let k = prediction.k();
    let off = k * (k + 1) / 2;
    let base = source.base_covariance(prediction)?;
    let draws = post.sample_latents(&KernelInput::from_prediction(prediction), mc, seed)?;
    let w_l: Vec<f64> = (0..off).map(|s| 1.0 + mean_of(&draws, s)).collect();
    let w_d: Vec<f64> = (0..k).map(|i| mean_exp(&draws, off + i)).collect();
    let cov = rescale_covariance(&base, &w_l, &w_d)?;
    GaussianPrediction::full(prediction.mean().to_vec(), cov)
}

/// Full-covariance output `Σ̂ = L̂ D̂ L̂ᵀ` from the template (estimation) or the
/// input covariance (recalibration).
pub fn covariance_head_apply(
    calibrator: &GpCalibrator,
    prediction: &GaussianPrediction,
    source: &CovarianceSource,
    mc_samples: usize,
    seed: u64,
) -> Result<GaussianPrediction> {
    check_head(calibrator, HeadKind::Covariance, prediction.k())?;
    check_mc(mc_samples)?;
    covariance_with(&calibrator.posterior()?, prediction, source, mc_samples, seed)
}

impl GpModel {
    pub fn k(&self) -> usize {
        self.calibrator.k
    }

    fn apply_with(&self, post: &GpPosterior<'_>, prediction: &GaussianPrediction, seed: u64) -> Result<Prediction> {
        let mc = self.calibrator.config.mc_samples;
        Ok(match self.method {
            GpMethod::Normal | GpMethod::NormalMv => normal_with(post, prediction, mc, seed)?.into(),
            GpMethod::Cauchy => cauchy_with(post, prediction, mc, seed)?.into(),
            GpMethod::Beta => beta_with(post, prediction, mc, seed, self.grid_points)?.into(),
            GpMethod::CovarianceEstimation | GpMethod::CovarianceRecalibration => {
                let source = self
                    .covariance_source
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParameter("covariance model without a covariance source".into()))?;
                covariance_with(post, prediction, source, mc, seed)?.into()
            }
        })
    }

    /// Calibrates every prediction; sample `i` draws from a stream derived
    /// from `(seed, i)`, so results do not depend on thread scheduling.
    pub fn apply_all(&self, predictions: &[GaussianPrediction], seed: u64) -> Result<Vec<Prediction>> {
        if let Some(p) = predictions.iter().find(|p| p.k() != self.k()) {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: p.k(),
            });
        }
        let post = self.calibrator.posterior()?;
        predictions
            .par_iter()
            .enumerate()
            .map(|(i, p)| self.apply_with(&post, p, derive_seed(seed, i as u64, 5)))
            .collect()
    }

    /// Expected latent weights `E[e^f]` at one prediction (variance or scale
    /// heads), for diagnostics.
    pub fn mean_weights(&self, prediction: &GaussianPrediction, seed: u64) -> Result<Vec<f64>> {
        let draws = posterior_weights(&self.calibrator, prediction, self.calibrator.config.mc_samples, seed)?;
        Ok((0..draws[0].len()).map(|s| mean_exp(&draws, s)).collect())
    }
}
