//! Sparse variational Gaussian process over distribution-valued inputs.
//!
//! The latent vector `f(x) ∈ ℝᴾ` is a linear model of coregionalization:
//! `f = W g` with `W = [A | diag(√λ)]`, so that `Cov(f(x), f(x')) = B k(x, x')`
//! with `B = A Aᵀ + diag(λ)`. Each of the `Q = R + P` independent latent
//! processes `g_q` has a whitened inducing posterior `N(m_q, S_q S_qᵀ)` over
//! shared inducing inputs. The ELBO is estimated with reparameterized
//! Monte-Carlo draws from the per-input marginals.

mod kernel;
mod optim;
mod svgp;

pub use kernel::{
    gram, kernel_matrix, log_song_kernel, song_kernel, song_kernel_full, song_kernel_with_grad, KernelInput,
    LogKernelGrad, JITTER_LADDER,
};
pub use optim::Adam;
pub use svgp::{
    derive_seed, elbo_mc, fit_svgp, Coregionalization, ElboGrad, GpCalibrator, GpConfig, GpPosterior, HeadKind,
    InducingSet, Likelihood, TrainingLog, MIN_LAMBDA,
};
