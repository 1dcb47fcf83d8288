use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::{gram, log_song_kernel, song_kernel_with_grad, KernelInput};
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::linalg;

/// Floor on the diagonal of the coregionalization matrix.
pub const MIN_LAMBDA: f64 = 1e-6;

/// Lengthscale floor relative to the RMS input standard deviation.
const THETA_FLOOR_REL: f64 = 1e-3;

/// Smallest marginal variance of a latent process.
const MIN_MARGINAL_VAR: f64 = 1e-12;

/// Likelihood head of a GP calibrator; fixes the latent output count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Beta,
    Normal,
    Cauchy,
    NormalMv,
    Covariance,
}

impl HeadKind {
    pub fn n_latent(self, k: usize) -> usize {
        match self {
            HeadKind::Beta => 3 * k,
            HeadKind::Normal | HeadKind::Cauchy | HeadKind::NormalMv => k,
            HeadKind::Covariance => k * (k + 1) / 2 + k,
        }
    }
}

/// Training hyperparameters. Stored with the fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub inducing: usize,
    pub epochs: usize,
    pub lr: f64,
    pub mc_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rank `R` of the low-rank part of the coregionalization matrix.
    pub rank: usize,
    /// First rung of the Gram jitter ladder.
    pub jitter: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            inducing: 50,
            epochs: 200,
            lr: 0.01,
            mc_samples: 128,
            batch_size: 256,
            seed: 42,
            rank: 1,
            jitter: 1e-6,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.inducing == 0 {
            return bad("inducing point count must be ≥ 1");
        }
        if self.mc_samples == 0 {
            return bad("MC sample count must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be ≥ 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.jitter.is_finite() && self.jitter > 0.0) {
            return bad("jitter must be positive");
        }
        Ok(())
    }
}

/// `B = A Aᵀ + diag(λ)`; `A` is P×R, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coregionalization {
    pub a: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

impl Coregionalization {
    pub fn p(&self) -> usize {
        self.lambda.len()
    }

    pub fn rank(&self) -> usize {
        self.a.first().map_or(0, Vec::len)
    }

    pub fn b(&self) -> DMatrix<f64> {
        let w = self.mixing();
        &w * w.transpose()
    }

    /// `W = [A | diag(√λ)]`, P×(R+P).
    pub fn mixing(&self) -> DMatrix<f64> {
        let (p, r) = (self.p(), self.rank());
        let mut w = DMatrix::zeros(p, r + p);
        for i in 0..p {
            for j in 0..r {
                w[(i, j)] = self.a[i][j];
            }
            w[(i, r + i)] = self.lambda[i].sqrt();
        }
        w
    }
}

/// Inducing inputs and the whitened variational posterior of each latent
/// process. `scale[q]` packs the lower triangle of `S_q` row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    pub inputs: Vec<KernelInput>,
    pub mean: Vec<Vec<f64>>,
    pub scale: Vec<Vec<f64>>,
}

fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn scale_matrix(&self, q: usize) -> DMatrix<f64> {
        let n = self.len();
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                s[(i, j)] = self.scale[q][tri_index(i, j)];
            }
        }
        s
    }
}

/// A fitted (or initialized) sparse variational GP calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpCalibrator {
    pub head: HeadKind,
    pub k: usize,
    pub theta: f64,
    pub coregionalization: Coregionalization,
    pub inducing: InducingSet,
    pub config: GpConfig,
}

/// Per-epoch ELBO trace (nats per training sample).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub initial_elbo: f64,
    pub epoch_elbo: Vec<f64>,
}

impl TrainingLog {
    /// Mean of the last `window` epochs.
    pub fn smoothed_final(&self, window: usize) -> f64 {
        let n = self.epoch_elbo.len();
        let w = window.min(n).max(1);
        if n == 0 {
            return self.initial_elbo;
        }
        self.epoch_elbo[n - w..].iter().sum::<f64>() / w as f64
    }
}

/// Log likelihood of one training sample given its latent vector.
pub trait Likelihood: Sync {
    fn n_latent(&self) -> usize;

    /// `ln p(y_index | f)`; writes `∂/∂f` into `grad` (length `n_latent`).
    fn log_lik(&self, index: usize, latent: &[f64], grad: &mut [f64]) -> f64;
}

/// splitmix64 over `(seed, a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ELBO estimate with its gradient over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ElboGrad {
    pub elbo: f64,
    pub kl: f64,
    pub grad: Vec<f64>,
}

/// Parameter-dependent quantities shared by every sample of a batch.
struct Prepared {
    theta: f64,
    w: DMatrix<f64>,
    kzz: DMatrix<f64>,
    lz: DMatrix<f64>,
    s: Vec<DMatrix<f64>>,
    m: Vec<DVector<f64>>,
}

struct SampleTerms {
    ll: f64,
    dw: DMatrix<f64>,
    dmu: Vec<f64>,
    dvar: Vec<f64>,
    a: Vec<f64>,
    c: Vec<Vec<f64>>,
    b: Vec<f64>,
    dtheta: f64,
    dz_mean: Vec<f64>,
    dz_var: Vec<f64>,
}

impl GpCalibrator {
    pub fn n_latent(&self) -> usize {
        self.coregionalization.p()
    }

    pub fn n_processes(&self) -> usize {
        self.coregionalization.rank() + self.coregionalization.p()
    }

    /// Fresh model: inducing inputs are a seeded random subsample of the
    /// training inputs; the variational posterior equals the prior.
    pub fn init(inputs: &[KernelInput], head: HeadKind, k: usize, config: &GpConfig) -> Result<Self> {
        config.validate()?;
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(bad) = inputs.iter().find(|x| x.k() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: bad.k(),
            });
        }
        let p = head.n_latent(k);
        let r = config.rank.min(p);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0, 0));
        let n_ind = config.inducing.min(inputs.len());
        let mut picks = rand::seq::index::sample(&mut rng, inputs.len(), n_ind).into_vec();
        picks.sort_unstable();
        let z: Vec<KernelInput> = picks.iter().map(|&i| inputs[i].clone()).collect();

        // lengthscale from the spread of the input means
        let n = inputs.len() as f64;
        let mut spread = 0.0;
        for d in 0..k {
            let mu = inputs.iter().map(|x| x.mean[d]).sum::<f64>() / n;
            let var = inputs.iter().map(|x| (x.mean[d] - mu).powi(2)).sum::<f64>() / n;
            let mv = inputs.iter().map(|x| x.var[d]).sum::<f64>() / n;
            spread += var.max(1e-3 * mv).max(1e-12);
        }
        let theta = 0.5 * (spread / k as f64).sqrt();

        // scale B so that the latent prior variance at the data is about one
        let kxx_mean = inputs.iter().map(|x| log_song_kernel(x, x, theta).exp()).sum::<f64>() / n;
        let lambda0 = (1.0 / kxx_mean).max(MIN_LAMBDA * 2.0);
        let q = r + p;
        let tri = n_ind * (n_ind + 1) / 2;
        let mut identity_packed = vec![0.0; tri];
        for i in 0..n_ind {
            identity_packed[tri_index(i, i)] = 1.0;
        }
        Ok(Self {
            head,
            k,
            theta,
            coregionalization: Coregionalization {
                a: vec![vec![0.0; r]; p],
                lambda: vec![lambda0; p],
            },
            inducing: InducingSet {
                inputs: z,
                mean: vec![vec![0.0; n_ind]; q],
                scale: vec![identity_packed; q],
            },
            config: config.clone(),
        })
    }

    /// `θᴷ`, the kernel amplitude at coincident point inputs.
    fn amplitude(&self) -> f64 {
        self.theta.powi(self.k as i32)
    }

    /// Flat unconstrained parameters:
    /// `[ln θ, Ã, ln λ̃, z means, ln z vars, m, S]` where `Ã = A θ^{K/2}` and
    /// `λ = λ_min + λ̃ θ^{−K}`. Measuring `B` against the amplitude-free kernel
    /// `k/θᴷ` removes the flat ridge along which `θᴷ` and `B` trade off.
    pub fn params(&self) -> Vec<f64> {
        let amp = self.amplitude();
        let mut out = vec![self.theta.ln()];
        for row in &self.coregionalization.a {
            out.extend(row.iter().map(|a| a * amp.sqrt()));
        }
        out.extend(
            self.coregionalization
                .lambda
                .iter()
                .map(|l| ((l - MIN_LAMBDA) * amp).max(1e-300).ln()),
        );
        for z in &self.inducing.inputs {
            out.extend_from_slice(&z.mean);
        }
        for z in &self.inducing.inputs {
            out.extend(z.var.iter().map(|v| v.max(1e-300).ln()));
        }
        for m in &self.inducing.mean {
            out.extend_from_slice(m);
        }
        for s in &self.inducing.scale {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("parameter vector too short");
        self.theta = next().exp();
        let amp = self.theta.powi(self.k as i32);
        for row in self.coregionalization.a.iter_mut() {
            for v in row.iter_mut() {
                *v = next() / amp.sqrt();
            }
        }
        for l in self.coregionalization.lambda.iter_mut() {
            *l = MIN_LAMBDA + next().exp() / amp;
        }
        for z in self.inducing.inputs.iter_mut() {
            for v in z.mean.iter_mut() {
                *v = next();
            }
        }
        for z in self.inducing.inputs.iter_mut() {
            for v in z.var.iter_mut() {
                *v = next().exp();
            }
        }
        for m in self.inducing.mean.iter_mut() {
            for v in m.iter_mut() {
                *v = next();
            }
        }
        for s in self.inducing.scale.iter_mut() {
            for v in s.iter_mut() {
                *v = next();
            }
        }
    }

    fn prepare(&self) -> Result<Prepared> {
        let (kzz, lz, _) = gram(&self.inducing.inputs, self.theta, self.config.jitter)?;
        Ok(Prepared {
            theta: self.theta,
            w: self.coregionalization.mixing(),
            kzz,
            lz,
            s: (0..self.n_processes()).map(|q| self.inducing.scale_matrix(q)).collect(),
            m: self.inducing.mean.iter().map(|m| DVector::from_column_slice(m)).collect(),
        })
    }

    /// `KL(q(v) ‖ N(0, I))` summed over latent processes.
    pub fn kl(&self) -> f64 {
        let n = self.inducing.len() as f64;
        let mut kl = 0.0;
        for q in 0..self.n_processes() {
            let m2: f64 = self.inducing.mean[q].iter().map(|v| v * v).sum();
            let s2: f64 = self.inducing.scale[q].iter().map(|v| v * v).sum();
            let logdet: f64 = (0..self.inducing.len())
                .map(|i| self.inducing.scale[q][tri_index(i, i)].abs().ln())
                .sum::<f64>()
                * 2.0;
            kl += 0.5 * (s2 + m2 - n - logdet);
        }
        kl
    }

    /// Read-only posterior for inference.
    pub fn posterior(&self) -> Result<GpPosterior<'_>> {
        Ok(GpPosterior {
            model: self,
            prep: self.prepare()?,
        })
    }

    /// ELBO estimate and gradient on a batch of training indices. Monte-Carlo
    /// noise for sample `i` comes from a stream seeded by `(noise_seed, i)`,
    /// so repeated calls with the same seed share random numbers.
    pub fn elbo_and_grad(
        &self,
        inputs: &[KernelInput],
        batch: &[usize],
        lik: &dyn Likelihood,
        n_total: usize,
        mc_samples: usize,
        noise_seed: u64,
    ) -> Result<ElboGrad> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if lik.n_latent() != self.n_latent() {
            return Err(Error::DimensionMismatch {
                expected: self.n_latent(),
                got: lik.n_latent(),
            });
        }
        let prep = self.prepare()?;
        let terms: Vec<SampleTerms> = batch
            .par_iter()
            .enumerate()
            .map(|(pos, &idx)| {
                let t = self.sample_terms(&prep, &inputs[idx], idx, lik, mc_samples, noise_seed);
                t.map_err(|e| match e {
                    Error::NonFiniteLikelihood { .. } => Error::NonFiniteLikelihood { index: pos },
                    other => other,
                })
            })
            .collect::<Result<_>>()?;
        Ok(self.assemble(&prep, terms, n_total as f64 / batch.len() as f64))
    }

    fn sample_terms(
        &self,
        prep: &Prepared,
        x: &KernelInput,
        index: usize,
        lik: &dyn Likelihood,
        mc_samples: usize,
        noise_seed: u64,
    ) -> Result<SampleTerms> {
        let n_ind = self.inducing.len();
        let (p, q_n) = (self.n_latent(), self.n_processes());
        let theta = prep.theta;
        let mut kzx = Vec::with_capacity(n_ind);
        let mut kgrads = Vec::with_capacity(n_ind);
        for z in &self.inducing.inputs {
            let (v, g) = song_kernel_with_grad(z, x, theta);
            kzx.push(v);
            kgrads.push(g);
        }
        let (kxx, dlnkxx_dtheta) = {
            let t2 = theta * theta;
            let mut acc = x.k() as f64 * theta.ln();
            let mut dt = x.k() as f64 / theta;
            for d in 0..x.k() {
                let s = 2.0 * x.var[d] + t2;
                acc -= 0.5 * s.ln();
                dt -= theta / s;
            }
            (acc.exp(), dt)
        };
        let a = linalg::solve_lower(&prep.lz, &kzx);
        let aa: f64 = a.iter().map(|v| v * v).sum();
        let mut mu = vec![0.0; q_n];
        let mut var = vec![0.0; q_n];
        let mut c = Vec::with_capacity(q_n);
        for q in 0..q_n {
            mu[q] = prep.m[q].as_slice().iter().zip(&a).map(|(m, a)| m * a).sum();
            let s = &prep.s[q];
            let cq: Vec<f64> = (0..n_ind)
                .map(|j| (j..n_ind).map(|l| s[(l, j)] * a[l]).sum())
                .collect();
            let cc: f64 = cq.iter().map(|v| v * v).sum();
            var[q] = (kxx - aa + cc).max(MIN_MARGINAL_VAR);
            c.push(cq);
        }
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, index as u64, 1));
        let inv_s = 1.0 / mc_samples as f64;
        let mut ll = 0.0;
        let mut dw = DMatrix::<f64>::zeros(p, q_n);
        let mut dmu = vec![0.0; q_n];
        let mut dvar = vec![0.0; q_n];
        let mut eps = vec![0.0; q_n];
        let mut g = vec![0.0; q_n];
        let mut f = vec![0.0; p];
        let mut df = vec![0.0; p];
        for _ in 0..mc_samples {
            for q in 0..q_n {
                eps[q] = rng.sample(StandardNormal);
                g[q] = mu[q] + sd[q] * eps[q];
            }
            for (i, fi) in f.iter_mut().enumerate() {
                *fi = (0..q_n).map(|q| prep.w[(i, q)] * g[q]).sum();
            }
            df.iter_mut().for_each(|v| *v = 0.0);
            let l = lik.log_lik(index, &f, &mut df);
            if !l.is_finite() || df.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLikelihood { index });
            }
            ll += l * inv_s;
            for q in 0..q_n {
                let mut dg = 0.0;
                for i in 0..p {
                    dw[(i, q)] += df[i] * g[q] * inv_s;
                    dg += prep.w[(i, q)] * df[i];
                }
                dmu[q] += dg * inv_s;
                dvar[q] += dg * eps[q] / (2.0 * sd[q]) * inv_s;
            }
        }

        // ∂/∂a of μ_q = aᵀm_q and var_q = kxx − aᵀa + ‖S_qᵀa‖²
        let mut da = vec![0.0; n_ind];
        for q in 0..q_n {
            let s = &prep.s[q];
            for l in 0..n_ind {
                let sc: f64 = (0..=l).map(|j| s[(l, j)] * c[q][j]).sum();
                da[l] += dmu[q] * prep.m[q][l] + dvar[q] * 2.0 * (sc - a[l]);
            }
        }
        let b = linalg::solve_lower_transpose(&prep.lz, &da);
        let dkxx: f64 = dvar.iter().sum();
        let mut dtheta = dkxx * kxx * dlnkxx_dtheta;
        let kdim = self.k;
        let mut dz_mean = vec![0.0; n_ind * kdim];
        let mut dz_var = vec![0.0; n_ind * kdim];
        for j in 0..n_ind {
            let coef = b[j] * kzx[j];
            let gr = &kgrads[j];
            for d in 0..kdim {
                dz_mean[j * kdim + d] += coef * gr.mean_i[d];
                dz_var[j * kdim + d] += coef * gr.var_i[d];
            }
            dtheta += coef * gr.theta;
        }
        Ok(SampleTerms {
            ll,
            dw,
            dmu,
            dvar,
            a,
            c,
            b,
            dtheta,
            dz_mean,
            dz_var,
        })
    }

    fn assemble(&self, prep: &Prepared, terms: Vec<SampleTerms>, alpha: f64) -> ElboGrad {
        let n_ind = self.inducing.len();
        let (p, r, q_n, kdim) = (self.n_latent(), self.coregionalization.rank(), self.n_processes(), self.k);
        let nb = terms.len();

        let mut ll_sum = 0.0;
        let mut dw = DMatrix::<f64>::zeros(p, q_n);
        let mut dtheta = 0.0;
        let mut dz_mean = vec![0.0; n_ind * kdim];
        let mut dz_var = vec![0.0; n_ind * kdim];
        let mut amat = DMatrix::<f64>::zeros(nb, n_ind);
        let mut bmat = DMatrix::<f64>::zeros(nb, n_ind);
        for (i, t) in terms.iter().enumerate() {
            ll_sum += t.ll;
            dw += &t.dw;
            dtheta += t.dtheta;
            for (acc, v) in dz_mean.iter_mut().zip(&t.dz_mean) {
                *acc += v;
            }
            for (acc, v) in dz_var.iter_mut().zip(&t.dz_var) {
                *acc += v;
            }
            for j in 0..n_ind {
                amat[(i, j)] = t.a[j];
                bmat[(i, j)] = t.b[j];
            }
        }

        let mut dm: Vec<DVector<f64>> = Vec::with_capacity(q_n);
        let mut ds: Vec<DMatrix<f64>> = Vec::with_capacity(q_n);
        for q in 0..q_n {
            let dmu_q = DVector::from_iterator(nb, terms.iter().map(|t| t.dmu[q]));
            dm.push(amat.tr_mul(&dmu_q) * alpha);
            let mut weighted = amat.clone();
            let mut cmat = DMatrix::<f64>::zeros(nb, n_ind);
            for (i, t) in terms.iter().enumerate() {
                let scale = 2.0 * t.dvar[q] * alpha;
                for j in 0..n_ind {
                    weighted[(i, j)] *= scale;
                    cmat[(i, j)] = t.c[q][j];
                }
            }
            ds.push(weighted.tr_mul(&cmat));
        }
        // a_i = Lz⁻¹ kzx_i  ⇒  ∂L = −Σ b_i a_iᵀ
        let dlz = -(bmat.tr_mul(&amat)) * alpha;
        let dkzz = cholesky_backward(&prep.lz, &dlz);
        for i in 0..n_ind {
            for j in 0..n_ind {
                let coef = dkzz[(i, j)] * (prep.kzz[(i, j)] - if i == j { self.jitter_of(prep, i) } else { 0.0 });
                if coef == 0.0 {
                    continue;
                }
                let (_, g) = song_kernel_with_grad(&self.inducing.inputs[i], &self.inducing.inputs[j], prep.theta);
                for d in 0..kdim {
                    dz_mean[i * kdim + d] += coef * g.mean_i[d];
                    dz_mean[j * kdim + d] += coef * g.mean_j[d];
                    dz_var[i * kdim + d] += coef * g.var_i[d];
                    dz_var[j * kdim + d] += coef * g.var_j[d];
                }
                dtheta += coef * g.theta;
            }
        }

        let dw = dw * alpha;
        let dtheta = dtheta * alpha;
        for v in dz_mean.iter_mut().chain(dz_var.iter_mut()) {
            *v *= alpha;
        }

        // KL(q ‖ prior) in whitened coordinates
        let kl = self.kl();
        for q in 0..q_n {
            dm[q] -= &prep.m[q];
            for i in 0..n_ind {
                for j in 0..=i {
                    ds[q][(i, j)] -= prep.s[q][(i, j)];
                }
                ds[q][(i, i)] += 1.0 / prep.s[q][(i, i)];
            }
        }

        // chain rule through A = Ã θ^{−K/2}, λ = λ_min + λ̃ θ^{−K}
        let amp = self.amplitude();
        let half_k = 0.5 * kdim as f64;
        let mut dlog_theta = dtheta * prep.theta;
        let mut grad_a = Vec::with_capacity(p * r);
        let mut grad_lambda = Vec::with_capacity(p);
        for i in 0..p {
            for j in 0..r {
                let a = self.coregionalization.a[i][j];
                dlog_theta -= half_k * dw[(i, j)] * a;
                grad_a.push(dw[(i, j)] / amp.sqrt());
            }
        }
        for i in 0..p {
            let lam = self.coregionalization.lambda[i];
            let dlam = dw[(i, r + i)] / (2.0 * lam.sqrt());
            dlog_theta -= 2.0 * half_k * dlam * (lam - MIN_LAMBDA);
            grad_lambda.push(dlam * (lam - MIN_LAMBDA));
        }
        let mut grad = Vec::with_capacity(self.params().len());
        grad.push(dlog_theta);
        grad.extend(grad_a);
        grad.extend(grad_lambda);
        grad.extend_from_slice(&dz_mean);
        for (j, z) in self.inducing.inputs.iter().enumerate() {
            for d in 0..kdim {
                grad.push(dz_var[j * kdim + d] * z.var[d]);
            }
        }
        for m in &dm {
            grad.extend_from_slice(m.as_slice());
        }
        for s in &ds {
            for i in 0..n_ind {
                for j in 0..=i {
                    grad.push(s[(i, j)]);
                }
            }
        }
        ElboGrad {
            elbo: alpha * ll_sum - kl,
            kl,
            grad,
        }
    }

    fn jitter_of(&self, prep: &Prepared, i: usize) -> f64 {
        prep.kzz[(i, i)] - log_song_kernel(&self.inducing.inputs[i], &self.inducing.inputs[i], prep.theta).exp()
    }
}

/// Reverse-mode step through `L = chol(A)`: given `∂/∂L` (lower), returns the
/// symmetric `∂/∂A`.
fn cholesky_backward(l: &DMatrix<f64>, dl: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut phi = l.tr_mul(&dl.lower_triangle());
    for i in 0..n {
        for j in (i + 1)..n {
            phi[(i, j)] = 0.0;
        }
        phi[(i, i)] *= 0.5;
    }
    let x = l.tr_solve_lower_triangular(&phi).expect("nonsingular Cholesky factor");
    let g = l
        .tr_solve_lower_triangular(&x.transpose())
        .expect("nonsingular Cholesky factor")
        .transpose();
    (&g + g.transpose()) * 0.5
}

/// Posterior view for inference at new inputs.
pub struct GpPosterior<'a> {
    model: &'a GpCalibrator,
    prep: Prepared,
}

impl GpPosterior<'_> {
    /// Mean and variance of each latent process `g_q` at `x`.
    pub fn process_marginals(&self, x: &KernelInput) -> Result<(Vec<f64>, Vec<f64>)> {
        let model = self.model;
        if x.k() != model.k {
            return Err(Error::DimensionMismatch {
                expected: model.k,
                got: x.k(),
            });
        }
        let theta = self.prep.theta;
        let kzx: Vec<f64> = model
            .inducing
            .inputs
            .iter()
            .map(|z| log_song_kernel(z, x, theta).exp())
            .collect();
        let kxx = log_song_kernel(x, x, theta).exp();
        let a = linalg::solve_lower(&self.prep.lz, &kzx);
        let aa: f64 = a.iter().map(|v| v * v).sum();
        let n_ind = a.len();
        let mut mu = Vec::new();
        let mut var = Vec::new();
        for q in 0..model.n_processes() {
            mu.push(self.prep.m[q].as_slice().iter().zip(&a).map(|(m, a)| m * a).sum());
            let s = &self.prep.s[q];
            let cc: f64 = (0..n_ind)
                .map(|j| (j..n_ind).map(|l| s[(l, j)] * a[l]).sum::<f64>().powi(2))
                .sum();
            var.push((kxx - aa + cc).max(0.0));
        }
        Ok((mu, var))
    }

    /// Mean and covariance of the latent vector `f(x)`.
    pub fn latent_moments(&self, x: &KernelInput) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (mu, var) = self.process_marginals(x)?;
        let w = &self.prep.w;
        let mean = (w * DVector::from_vec(mu)).as_slice().to_vec();
        let cov = w * DMatrix::from_diagonal(&DVector::from_vec(var)) * w.transpose();
        Ok((mean, cov))
    }

    /// `mc_samples` draws of `f(x)` from the marginal variational posterior.
    pub fn sample_latents(&self, x: &KernelInput, mc_samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let (mu, var) = self.process_marginals(x)?;
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let w = &self.prep.w;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 2));
        let mut g = vec![0.0; mu.len()];
        Ok((0..mc_samples)
            .map(|_| {
                for q in 0..mu.len() {
                    let e: f64 = rng.sample(StandardNormal);
                    g[q] = mu[q] + sd[q] * e;
                }
                (0..w.nrows())
                    .map(|i| (0..w.ncols()).map(|q| w[(i, q)] * g[q]).sum())
                    .collect()
            })
            .collect())
    }
}

/// Monte-Carlo ELBO estimate on a batch.
pub fn elbo_mc(
    calibrator: &GpCalibrator,
    inputs: &[KernelInput],
    batch: &[usize],
    lik: &dyn Likelihood,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(calibrator
        .elbo_and_grad(inputs, batch, lik, inputs.len(), mc_samples, seed)?
        .elbo)
}

/// Stochastic gradient ascent on the ELBO with Adam over minibatches.
pub fn fit_svgp(
    inputs: &[KernelInput],
    lik: &dyn Likelihood,
    head: HeadKind,
    k: usize,
    config: &GpConfig,
) -> Result<(GpCalibrator, TrainingLog)> {
    let mut model = GpCalibrator::init(inputs, head, k, config)?;
    if lik.n_latent() != model.n_latent() {
        return Err(Error::DimensionMismatch {
            expected: model.n_latent(),
            got: lik.n_latent(),
        });
    }
    let n = inputs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0, 3));
    let mut params = model.params();
    let mut adam = Adam::new(params.len(), config.lr);
    let mut log = TrainingLog::default();

    let all: Vec<usize> = (0..n).collect();
    let mut initial = 0.0;
    for chunk in all.chunks(config.batch_size) {
        let eg = model.elbo_and_grad(inputs, chunk, lik, n, config.mc_samples, derive_seed(config.seed, 1, 0))?;
        initial += (eg.elbo + eg.kl) * chunk.len() as f64 / n as f64;
    }
    log.initial_elbo = (initial - model.kl()) / n as f64;

    // Below this the lengthscale no longer shapes the kernel (θ² ≪ input
    // variances); stopping there keeps θᴷ and λ representable.
    let mean_var = inputs.iter().flat_map(|x| x.var.iter()).sum::<f64>() / (n * k) as f64;
    let log_theta_floor = (THETA_FLOOR_REL * mean_var.sqrt()).max(f64::MIN_POSITIVE.powf(1.0 / (4.0 * k as f64))).ln();

    let mut step: u64 = 0;
    let mut order = all;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let noise = derive_seed(config.seed, 2, step);
            let eg = match model.elbo_and_grad(inputs, chunk, lik, n, config.mc_samples, noise) {
                Ok(eg) if eg.elbo.is_finite() && eg.grad.iter().all(|g| g.is_finite()) => eg,
                Ok(_) | Err(Error::NonFiniteLikelihood { .. }) | Err(Error::NotPositiveDefinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        last_valid: Box::new(model),
                    });
                }
                Err(e) => return Err(e),
            };
            acc += eg.elbo / n as f64;
            batches += 1;
            let mut next = params.clone();
            adam.step(&mut next, &eg.grad);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    last_valid: Box::new(model),
                });
            }
            next[0] = next[0].max(log_theta_floor);
            params = next;
            model.set_params(&params);
        }
        log.epoch_elbo.push(acc / batches as f64);
        log::debug!("epoch {epoch}: elbo {:.6}", acc / batches as f64);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn head_latent_counts() {
        assert_eq!(HeadKind::Beta.n_latent(4), 12);
        assert_eq!(HeadKind::Normal.n_latent(4), 4);
        assert_eq!(HeadKind::Covariance.n_latent(4), 14);
        assert_eq!(HeadKind::Covariance.n_latent(2), 5);
    }

    #[test]
    fn cholesky_backward_matches_finite_differences() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.2, 0.4, 1.2, 3.0, -0.5, 0.4, -0.5, 2.5]);
        let weights = DMatrix::from_row_slice(3, 3, &[0.3, 0.0, 0.0, -1.1, 0.7, 0.0, 0.2, 0.5, -0.9]);
        let loss = |a: &DMatrix<f64>| linalg::cholesky(a).unwrap().component_mul(&weights).sum();
        let l = linalg::cholesky(&a).unwrap();
        let g = cholesky_backward(&l, &weights);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..=i {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[(i, j)] += h;
                am[(i, j)] -= h;
                if i != j {
                    ap[(j, i)] += h;
                    am[(j, i)] -= h;
                }
                let fd = (loss(&ap) - loss(&am)) / (2.0 * h);
                let an = if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] };
                assert_relative_eq!(an, fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn coregionalization_is_spd_with_floor() {
        let c = Coregionalization {
            a: vec![vec![1.0], vec![1.0], vec![-1.0]],
            lambda: vec![MIN_LAMBDA; 3],
        };
        let eig = nalgebra::SymmetricEigen::new(c.b());
        assert!(eig.eigenvalues.min() >= MIN_LAMBDA * (1.0 - 1e-6));
    }

    /// Independent Gaussian observations of every latent output.
    struct ToyLik {
        y: Vec<Vec<f64>>,
    }

    impl Likelihood for ToyLik {
        fn n_latent(&self) -> usize {
            self.y[0].len()
        }

        fn log_lik(&self, index: usize, latent: &[f64], grad: &mut [f64]) -> f64 {
            let mut ll = 0.0;
            for (p, (&f, &y)) in latent.iter().zip(&self.y[index]).enumerate() {
                let r = y - f.tanh();
                ll -= 0.5 * r * r / 0.3;
                grad[p] = r / 0.3 * (1.0 - f.tanh().powi(2));
            }
            ll
        }
    }

    pub(super) fn toy_model() -> (GpCalibrator, Vec<KernelInput>) {
        let inputs: Vec<KernelInput> = (0..5)
            .map(|i| {
                let t = i as f64;
                KernelInput::new(vec![t.sin(), 0.3 * t], vec![0.1 + 0.05 * t, 0.2]).unwrap()
            })
            .collect();
        let config = GpConfig {
            inducing: 3,
            rank: 1,
            ..GpConfig::default()
        };
        let mut model = GpCalibrator::init(&inputs, HeadKind::Normal, 2, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = model.params();
        for v in params.iter_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        model.set_params(&params);
        (model, inputs)
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let (model, inputs) = toy_model();
        let lik = ToyLik {
            y: (0..5).map(|i| vec![0.2 * i as f64 - 0.4, 0.5 - 0.1 * i as f64]).collect(),
        };
        let batch: Vec<usize> = (0..5).collect();
        let base = model.elbo_and_grad(&inputs, &batch, &lik, 5, 64, 99).unwrap();
        let params = model.params();
        assert_eq!(base.grad.len(), params.len());
        let h = 1e-5;
        for i in 0..params.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut p = params.clone();
                p[i] += delta;
                m.set_params(&p);
                m.elbo_and_grad(&inputs, &batch, &lik, 5, 64, 99).unwrap().elbo
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = base.grad[i];
            let scale = fd.abs().max(an.abs()).max(1e-4);
            assert!((an - fd).abs() <= 1e-4 * scale, "param {i}: analytic {an}, numeric {fd}");
        }
    }

    #[test]
    fn kl_vanishes_at_prior() {
        let (model, inputs) = toy_model();
        let fresh = GpCalibrator::init(&inputs, HeadKind::Normal, 2, &model.config).unwrap();
        assert!(fresh.kl().abs() < 1e-12);
        assert!(model.kl() > 0.0);
    }

    #[test]
    fn seeds_are_decorrelated() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 1, 0), derive_seed(1, 0, 1));
        assert_eq!(derive_seed(7, 3, 4), derive_seed(7, 3, 4));
    }
}
