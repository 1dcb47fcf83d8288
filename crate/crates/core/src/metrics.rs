//! Regression miscalibration measures: NLL, Pinball loss, UCE, ENCE, the
//! NEES/χ² machinery and the quantile calibration error (QCE), plus
//! reliability curves.
//!
//! All binned metrics use equal-frequency bins over a per-sample dispersion
//! statistic. Empty bins (only possible with tied statistics) carry zero
//! weight in UCE/QCE and are skipped in the ENCE average. Per-dimension
//! metrics are averaged over dimensions without weighting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::Serialize;
use statrs::function::gamma::gamma_lr;

use crate::dist::Prediction;
use crate::error::{Error, Result};
use crate::linalg;

/// Strictly increasing quantile levels in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidParameter("empty quantile grid".into()));
        }
        if let Some(&bad) = levels.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::InvalidProbability(bad));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "quantile levels must be strictly increasing".into(),
            ));
        }
        Ok(Self { levels })
    }

    /// `start, start+step, …` up to and including `stop` (with rounding slack).
    pub fn from_range(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || stop < start {
            if (stop - start).abs() < 1e-12 {
                return Self::new(vec![start]);
            }
            return Err(Error::InvalidParameter(format!(
                "bad level range {start}:{stop}:{step}"
            )));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        let levels = (0..=n)
            .map(|i| {
                let t = start + i as f64 * step;
                // snap to the decimal grid so 0.05·3 prints as 0.15
                (t * 1e10).round() / 1e10
            })
            .collect();
        Self::new(levels)
    }

    /// τ ∈ {0.05, 0.10, …, 0.95}.
    pub fn standard() -> Self {
        Self::from_range(0.05, 0.95, 0.05).expect("static grid")
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

/// Equal-frequency bins over a scalar statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct BinningScheme {
    edges: Vec<f64>,
}

impl BinningScheme {
    /// Edges at the empirical `m/M` quantiles of `values`; duplicate edges
    /// from ties are merged, so fewer than `bins` bins may result.
    pub fn equal_frequency(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidParameter("bin count must be positive".into()));
        }
        if values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("binning statistic"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut edges: Vec<f64> = (0..bins).map(|m| sorted[m * n / bins]).collect();
        edges.push(sorted[n - 1]);
        edges.dedup();
        if edges.len() == 1 {
            // all values identical: one closed bin
            edges.push(edges[0]);
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin `m` covers `[e_m, e_{m+1})`; the last bin is closed.
    pub fn assign(&self, v: f64) -> usize {
        let last = self.n_bins() - 1;
        let idx = self.edges.partition_point(|&e| e <= v);
        idx.saturating_sub(1).min(last)
    }

    fn groups(&self, values: &[f64]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_bins()];
        for (i, &v) in values.iter().enumerate() {
            out[self.assign(v)].push(i);
        }
        out
    }
}

fn check_aligned(predictions: &[Prediction], targets: &[Vec<f64>]) -> Result<usize> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            got: targets.len(),
        });
    }
    let first = predictions.first().ok_or(Error::EmptyDataset)?;
    let k = first.k();
    for (p, y) in predictions.iter().zip(targets) {
        if p.k() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: p.k(),
            });
        }
        if y.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: y.len(),
            });
        }
    }
    Ok(k)
}

fn check_level(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbability(tau))
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

/// Mean joint negative log likelihood in nats per sample.
pub fn nll(predictions: &[Prediction], targets: &[Vec<f64>]) -> Result<f64> {
    check_aligned(predictions, targets)?;
    let mut total = 0.0;
    for (p, y) in predictions.iter().zip(targets) {
        total -= p.log_density(y)?;
    }
    Ok(total / predictions.len() as f64)
}

/// Mean marginal negative log likelihood of one dimension.
pub fn nll_marginal(predictions: &[Prediction], targets: &[Vec<f64>], dim: usize) -> Result<f64> {
    check_aligned(predictions, targets)?;
    let mut total = 0.0;
    for (p, y) in predictions.iter().zip(targets) {
        total -= p.marginal_log_density(y[dim], dim)?;
    }
    Ok(total / predictions.len() as f64)
}

/// ρ_τ(u) = τ·u for u ≥ 0, (τ − 1)·u otherwise.
pub fn pinball_term(tau: f64, residual: f64) -> f64 {
    if residual >= 0.0 {
        tau * residual
    } else {
        (tau - 1.0) * residual
    }
}

/// Pinball loss of one dimension at level τ.
pub fn pinball_marginal(
    predictions: &[Prediction],
    targets: &[Vec<f64>],
    dim: usize,
    tau: f64,
) -> Result<f64> {
    check_aligned(predictions, targets)?;
    check_level(tau)?;
    let mut total = 0.0;
    for (p, y) in predictions.iter().zip(targets) {
        total += pinball_term(tau, y[dim] - p.quantile(tau, dim)?);
    }
    Ok(total / predictions.len() as f64)
}

/// Pinball loss at τ averaged over samples and dimensions.
pub fn pinball(predictions: &[Prediction], targets: &[Vec<f64>], tau: f64) -> Result<f64> {
    let k = check_aligned(predictions, targets)?;
    let per_dim = (0..k)
        .map(|d| pinball_marginal(predictions, targets, d, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(per_dim.into_iter()))
}

/// Pinball loss averaged over the quantile grid.
pub fn mean_pinball(predictions: &[Prediction], targets: &[Vec<f64>], grid: &QuantileGrid) -> Result<f64> {
    let vals = grid
        .levels()
        .iter()
        .map(|&t| pinball(predictions, targets, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(vals.into_iter()))
}

struct VarianceBins {
    weight: Vec<f64>,
    mse: Vec<f64>,
    mv: Vec<f64>,
}

fn variance_bins(
    predictions: &[Prediction],
    targets: &[Vec<f64>],
    dim: usize,
    bins: usize,
) -> Result<VarianceBins> {
    check_aligned(predictions, targets)?;
    let mut vars = Vec::with_capacity(predictions.len());
    let mut sq = Vec::with_capacity(predictions.len());
    for (p, y) in predictions.iter().zip(targets) {
        let v = p.variance(dim).ok_or_else(|| {
            Error::Unsupported("UCE/ENCE need a predicted variance; Cauchy has none".into())
        })?;
        vars.push(v);
        let r = y[dim] - p.center(dim);
        sq.push(r * r);
    }
    let scheme = BinningScheme::equal_frequency(&vars, bins)?;
    let n = predictions.len() as f64;
    let mut out = VarianceBins {
        weight: Vec::new(),
        mse: Vec::new(),
        mv: Vec::new(),
    };
    for g in scheme.groups(&vars) {
        if g.is_empty() {
            continue;
        }
        out.weight.push(g.len() as f64 / n);
        out.mse.push(mean(g.iter().map(|&i| sq[i])));
        out.mv.push(mean(g.iter().map(|&i| vars[i])));
    }
    Ok(out)
}

/// Uncertainty calibration error of one dimension.
pub fn uce_marginal(predictions: &[Prediction], targets: &[Vec<f64>], dim: usize, bins: usize) -> Result<f64> {
    let b = variance_bins(predictions, targets, dim, bins)?;
    Ok((0..b.weight.len())
        .map(|m| b.weight[m] * (b.mse[m] - b.mv[m]).abs())
        .sum())
}

/// Expected normalized calibration error of one dimension.
pub fn ence_marginal(predictions: &[Prediction], targets: &[Vec<f64>], dim: usize, bins: usize) -> Result<f64> {
    let b = variance_bins(predictions, targets, dim, bins)?;
    let terms: Vec<f64> = (0..b.weight.len())
        .map(|m| {
            let rmv = b.mv[m].sqrt();
            (b.mse[m].sqrt() - rmv).abs() / rmv
        })
        .collect();
    Ok(mean(terms.into_iter()))
}

pub fn uce(predictions: &[Prediction], targets: &[Vec<f64>], bins: usize) -> Result<f64> {
    let k = check_aligned(predictions, targets)?;
    let v = (0..k)
        .map(|d| uce_marginal(predictions, targets, d, bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(v.into_iter()))
}

pub fn ence(predictions: &[Prediction], targets: &[Vec<f64>], bins: usize) -> Result<f64> {
    let k = check_aligned(predictions, targets)?;
    let v = (0..k)
        .map(|d| ence_marginal(predictions, targets, d, bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(v.into_iter()))
}

/// Squared Mahalanobis distance `(y − μ)ᵀ Σ⁻¹ (y − μ)` via a Cholesky solve.
pub fn nees(mean: &[f64], cov: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    if y.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            got: y.len(),
        });
    }
    let (l, _) = linalg::cholesky_jittered(cov)?;
    let r: Vec<f64> = y.iter().zip(mean).map(|(a, b)| a - b).collect();
    Ok(linalg::solve_lower(&l, &r).iter().map(|z| z * z).sum())
}

/// Standardized generalized variance `det(Σ)^{1/K}`.
pub fn sgv(cov: &DMatrix<f64>) -> Result<f64> {
    let l = linalg::cholesky(cov)?;
    Ok((linalg::log_det_cholesky(&l) / cov.nrows() as f64).exp())
}

pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(0.5 * dof as f64, 0.5 * x)
    }
}

/// Inverse χ²_K CDF by bisection on the regularized lower incomplete gamma.
pub fn chi2_quantile(dof: usize, tau: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidParameter("χ² needs at least one degree of freedom".into()));
    }
    check_level(tau)?;
    let mut hi = dof as f64 + 1.0;
    while chi2_cdf(dof, hi) < tau {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(dof, mid) < tau {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn binned_deviation(stat: &[f64], accepted: &[bool], tau: f64, bins: usize) -> Result<f64> {
    let scheme = BinningScheme::equal_frequency(stat, bins)?;
    let n = stat.len() as f64;
    let mut total = 0.0;
    for g in scheme.groups(stat) {
        if g.is_empty() {
            continue;
        }
        let freq = g.iter().filter(|&&i| accepted[i]).count() as f64 / g.len() as f64;
        total += g.len() as f64 / n * (freq - tau).abs();
    }
    Ok(total)
}

/// Multivariate QCE at level τ for Gaussian predictions, binned over √SGV.
pub fn qce(predictions: &[Prediction], targets: &[Vec<f64>], tau: f64, bins: usize) -> Result<f64> {
    let k = check_aligned(predictions, targets)?;
    check_level(tau)?;
    let threshold = chi2_quantile(k, tau)?;
    let mut stat = Vec::with_capacity(predictions.len());
    let mut accepted = Vec::with_capacity(predictions.len());
    for (p, y) in predictions.iter().zip(targets) {
        let g = p.as_gaussian().ok_or_else(|| {
            Error::Unsupported(format!(
                "multivariate QCE is defined for Gaussian predictions only, got {}",
                p.family()
            ))
        })?;
        let cov = g.covariance();
        stat.push(sgv(&cov)?.sqrt());
        accepted.push(nees(g.mean(), &cov, y)? <= threshold);
    }
    binned_deviation(&stat, &accepted, tau, bins)
}

/// Univariate QCE of one dimension. Gaussians use the NEES test; other
/// families use the equivalent central τ-interval membership. Bins are formed
/// over the marginal standard deviation (Cauchy: scale).
pub fn qce_marginal(
    predictions: &[Prediction],
    targets: &[Vec<f64>],
    dim: usize,
    tau: f64,
    bins: usize,
) -> Result<f64> {
    check_aligned(predictions, targets)?;
    check_level(tau)?;
    let threshold = chi2_quantile(1, tau)?;
    let lo_level = 0.5 * (1.0 - tau);
    let hi_level = 0.5 * (1.0 + tau);
    let mut stat = Vec::with_capacity(predictions.len());
    let mut accepted = Vec::with_capacity(predictions.len());
    for (p, y) in predictions.iter().zip(targets) {
        stat.push(p.spread(dim));
        let yd = y[dim];
        let ok = match p {
            Prediction::Gaussian(g) => {
                let z = (yd - g.mean()[dim]) / g.variance(dim).sqrt();
                z * z <= threshold
            }
            other => other.quantile(lo_level, dim)? <= yd && yd <= other.quantile(hi_level, dim)?,
        };
        accepted.push(ok);
    }
    binned_deviation(&stat, &accepted, tau, bins)
}

pub fn mean_qce(predictions: &[Prediction], targets: &[Vec<f64>], grid: &QuantileGrid, bins: usize) -> Result<f64> {
    let v = grid
        .levels()
        .iter()
        .map(|&t| qce(predictions, targets, t, bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(v.into_iter()))
}

pub fn mean_qce_marginal(
    predictions: &[Prediction],
    targets: &[Vec<f64>],
    dim: usize,
    grid: &QuantileGrid,
    bins: usize,
) -> Result<f64> {
    let v = grid
        .levels()
        .iter()
        .map(|&t| qce_marginal(predictions, targets, dim, t, bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(v.into_iter()))
}

/// `(τ, fraction of samples with y ≤ q_τ)` for one dimension.
pub fn reliability_curve(
    predictions: &[Prediction],
    targets: &[Vec<f64>],
    dim: usize,
    grid: &QuantileGrid,
) -> Result<Vec<(f64, f64)>> {
    check_aligned(predictions, targets)?;
    let n = predictions.len() as f64;
    grid.levels()
        .iter()
        .map(|&tau| {
            let mut hits = 0usize;
            for (p, y) in predictions.iter().zip(targets) {
                if y[dim] <= p.quantile(tau, dim)? {
                    hits += 1;
                }
            }
            Ok((tau, hits as f64 / n))
        })
        .collect()
}

/// Mean absolute gap between a reliability curve and the diagonal.
pub fn mean_coverage_error(curve: &[(f64, f64)]) -> f64 {
    mean(curve.iter().map(|(t, c)| (c - t).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Nll,
    Pinball,
    Qce,
    Uce,
    Ence,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Nll, Metric::Pinball, Metric::Qce, Metric::Uce, Metric::Ence];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Nll => "nll",
            Metric::Pinball => "pinball",
            Metric::Qce => "qce",
            Metric::Uce => "uce",
            Metric::Ence => "ence",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub bins: usize,
    pub grid: QuantileGrid,
    pub metrics: Vec<Metric>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 20,
            grid: QuantileGrid::standard(),
            metrics: Metric::ALL.to_vec(),
        }
    }
}

/// Flat metric map keyed `<metric>.dim<d>`, `<metric>.mean` and, where a joint
/// quantity exists, `<metric>.joint`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

pub fn evaluate(predictions: &[Prediction], targets: &[Vec<f64>], cfg: &EvalConfig) -> Result<MetricReport> {
    let k = check_aligned(predictions, targets)?;
    let mut report = MetricReport::default();
    report.notes.push(format!(
        "binning: equal-frequency, M = {}; empty bins get zero weight (UCE/QCE) and are skipped (ENCE)",
        cfg.bins
    ));
    let has_cauchy = predictions.iter().any(|p| matches!(p, Prediction::Cauchy(_)));
    let all_gaussian = predictions.iter().all(|p| p.as_gaussian().is_some());

    let put_dims = |report: &mut MetricReport, name: &str, vals: Vec<f64>| {
        for (d, v) in vals.iter().enumerate() {
            report.metrics.insert(format!("{name}.dim{d}"), *v);
        }
        report.metrics.insert(format!("{name}.mean"), mean(vals.into_iter()));
    };

    for &metric in &cfg.metrics {
        match metric {
            Metric::Nll => {
                let v = (0..k)
                    .map(|d| nll_marginal(predictions, targets, d))
                    .collect::<Result<Vec<_>>>()?;
                put_dims(&mut report, "nll", v);
                report.metrics.insert("nll.joint".into(), nll(predictions, targets)?);
            }
            Metric::Pinball => {
                let v = (0..k)
                    .map(|d| {
                        let per_tau = cfg
                            .grid
                            .levels()
                            .iter()
                            .map(|&t| pinball_marginal(predictions, targets, d, t))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(mean(per_tau.into_iter()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                put_dims(&mut report, "pinball", v);
            }
            Metric::Qce => {
                let v = (0..k)
                    .map(|d| mean_qce_marginal(predictions, targets, d, &cfg.grid, cfg.bins))
                    .collect::<Result<Vec<_>>>()?;
                put_dims(&mut report, "qce", v);
                if all_gaussian {
                    report
                        .metrics
                        .insert("qce.joint".into(), mean_qce(predictions, targets, &cfg.grid, cfg.bins)?);
                } else {
                    report
                        .notes
                        .push("qce.joint omitted: multivariate QCE is defined for Gaussian predictions only".into());
                }
            }
            Metric::Uce | Metric::Ence if has_cauchy => {
                let note = format!(
                    "{metric} omitted: the Cauchy distribution has no variance defined"
                );
                if !report.notes.contains(&note) {
                    report.notes.push(note);
                }
            }
            Metric::Uce => {
                let v = (0..k)
                    .map(|d| uce_marginal(predictions, targets, d, cfg.bins))
                    .collect::<Result<Vec<_>>>()?;
                put_dims(&mut report, "uce", v);
            }
            Metric::Ence => {
                let v = (0..k)
                    .map(|d| ence_marginal(predictions, targets, d, cfg.bins))
                    .collect::<Result<Vec<_>>>()?;
                put_dims(&mut report, "ence", v);
            }
        }
    }
    Ok(report)
}
