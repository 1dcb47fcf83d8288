//! Expected-likelihood kernel between Gaussian inputs:
//!
//! k((μᵢ, Σᵢ), (μⱼ, Σⱼ)) = θᴷ |Σᵢⱼ|^{-1/2} exp(−½ δᵀ Σᵢⱼ⁻¹ δ),
//! Σᵢⱼ = Σᵢ + Σⱼ + θ² I, δ = μᵢ − μⱼ.
//!
//! The training path works on diagonal input covariances, where the kernel
//! factorizes over dimensions and has cheap closed-form gradients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dist::GaussianPrediction;
use crate::error::{Error, Result};
use crate::linalg;

/// A Gaussian kernel input with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelInput {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl KernelInput {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: var.len(),
            });
        }
        if mean.iter().chain(&var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel input"));
        }
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidParameter("kernel input variance must be ≥ 0".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn from_prediction(p: &GaussianPrediction) -> Self {
        Self {
            mean: p.mean().to_vec(),
            var: p.variances(),
        }
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }
}

/// Gradient of `ln k` with respect to both inputs and θ.
#[derive(Debug, Clone, PartialEq)]
pub struct LogKernelGrad {
    pub mean_i: Vec<f64>,
    pub var_i: Vec<f64>,
    pub mean_j: Vec<f64>,
    pub var_j: Vec<f64>,
    pub theta: f64,
}

pub fn log_song_kernel(a: &KernelInput, b: &KernelInput, theta: f64) -> f64 {
    let k = a.k() as f64;
    let t2 = theta * theta;
    let mut acc = k * theta.ln();
    for d in 0..a.k() {
        let s = a.var[d] + b.var[d] + t2;
        let delta = a.mean[d] - b.mean[d];
        acc -= 0.5 * (s.ln() + delta * delta / s);
    }
    acc
}

/// Diagonal-input kernel value.
pub fn song_kernel(a: &KernelInput, b: &KernelInput, theta: f64) -> Result<f64> {
    if a.k() != b.k() {
        return Err(Error::DimensionMismatch {
            expected: a.k(),
            got: b.k(),
        });
    }
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::InvalidParameter(format!("lengthscale must be positive, got {theta}")));
    }
    Ok(log_song_kernel(a, b, theta).exp())
}

/// Kernel value together with `∂ ln k`.
pub fn song_kernel_with_grad(a: &KernelInput, b: &KernelInput, theta: f64) -> (f64, LogKernelGrad) {
    let kdim = a.k();
    let t2 = theta * theta;
    let mut g = LogKernelGrad {
        mean_i: vec![0.0; kdim],
        var_i: vec![0.0; kdim],
        mean_j: vec![0.0; kdim],
        var_j: vec![0.0; kdim],
        theta: kdim as f64 / theta,
    };
    let mut acc = kdim as f64 * theta.ln();
    for d in 0..kdim {
        let s = a.var[d] + b.var[d] + t2;
        let delta = a.mean[d] - b.mean[d];
        acc -= 0.5 * (s.ln() + delta * delta / s);
        let dm = -delta / s;
        let ds = 0.5 * (delta * delta / (s * s) - 1.0 / s);
        g.mean_i[d] = dm;
        g.mean_j[d] = -dm;
        g.var_i[d] = ds;
        g.var_j[d] = ds;
        g.theta += 2.0 * theta * ds;
    }
    (acc.exp(), g)
}

/// General form for full input covariances.
pub fn song_kernel_full(
    mean_i: &[f64],
    cov_i: &DMatrix<f64>,
    mean_j: &[f64],
    cov_j: &DMatrix<f64>,
    theta: f64,
) -> Result<f64> {
    let k = mean_i.len();
    if mean_j.len() != k || cov_i.nrows() != k || cov_j.nrows() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: mean_j.len(),
        });
    }
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::InvalidParameter(format!("lengthscale must be positive, got {theta}")));
    }
    if mean_i.iter().chain(mean_j).chain(cov_i.iter()).chain(cov_j.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel input"));
    }
    let mut s = cov_i + cov_j;
    for d in 0..k {
        s[(d, d)] += theta * theta;
    }
    let l = linalg::cholesky(&s)?;
    let delta: Vec<f64> = mean_i.iter().zip(mean_j).map(|(a, b)| a - b).collect();
    let z = linalg::solve_lower(&l, &delta);
    let maha: f64 = z.iter().map(|v| v * v).sum();
    Ok((k as f64 * theta.ln() - 0.5 * linalg::log_det_cholesky(&l) - 0.5 * maha).exp())
}

/// Jitter ladder for Gram matrices.
pub const JITTER_LADDER: [f64; 3] = [1e-6, 1e-5, 1e-4];

/// Pairwise kernel matrix without jitter.
pub fn kernel_matrix(inputs: &[KernelInput], theta: f64) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = log_song_kernel(&inputs[i], &inputs[j], theta).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Gram matrix with jitter, escalating from `base_jitter` up to `1e-4` until
/// the Cholesky succeeds. Jitter levels are relative to the mean diagonal so
/// they track the kernel amplitude `θᴷ`. Returns `(K + jI, L, j)` with `j`
/// the absolute amount added.
pub fn gram(
    inputs: &[KernelInput],
    theta: f64,
    base_jitter: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::InvalidParameter(format!("lengthscale must be positive, got {theta}")));
    }
    let k = kernel_matrix(inputs, theta);
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gram matrix"));
    }
    let amplitude = k.diagonal().mean();
    let mut last_err = None;
    let ladder = std::iter::once(base_jitter).chain(JITTER_LADDER.into_iter().filter(|&j| j > base_jitter));
    for rel in ladder {
        let jitter = rel * amplitude;
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        match linalg::cholesky(&kj) {
            Ok(l) => return Ok((kj, l, jitter)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("ladder is nonempty"))
}
