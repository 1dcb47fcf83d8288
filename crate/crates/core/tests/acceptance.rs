//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use recal::baseline::{isotonic_apply, isotonic_fit, pav, variance_scaling_apply, variance_scaling_fit};
use recal::dist::std_normal_quantile;
use recal::gp::{GpCalibrator, GpConfig, Likelihood};
use recal::linalg::{ldl_decompose, relative_frobenius};
use recal::methods::{
    correlation_template, gp_fit, kernel_inputs, BetaLikelihood, CauchyLikelihood, CovarianceLikelihood,
    CovarianceSource, GpMethod, NormalLikelihood, NormalMvLikelihood,
};
use recal::metrics::{chi2_quantile, mean_coverage_error, mean_qce_marginal, nees, nll, reliability_curve, QuantileGrid};
use recal::synth::{generate, SynthConfig, SynthKind};
use recal::{CalibrationDataset, GaussianPrediction, Method, ModelFile, Prediction, Sample};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussians(ds: &CalibrationDataset) -> Vec<GaussianPrediction> {
    ds.samples().iter().map(|s| s.prediction.clone()).collect()
}

fn cosine(seed: u64, miscal: f64, constant_variance: bool) -> CalibrationDataset {
    let mut cfg = SynthConfig::new(SynthKind::Cosine, 8000, seed);
    cfg.miscal = miscal;
    cfg.constant_variance = constant_variance;
    generate(&cfg).unwrap()
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn criterion_1() -> Option<Outcome> {
    println!(
        "[criterion 1] NOT RUN: detector benchmark numbers need trained detectors and the BDD/COCO datasets; \
         substituted by criteria 2-10"
    );
    None
}

fn criterion_2() -> Outcome {
    let ds = cosine(7, 2.0, false);
    let (train, eval) = ds.split_at(4000);
    let grid = QuantileGrid::standard();
    let y = eval.ground_truths();
    let before = mean_coverage_error(&reliability_curve(&eval.predictions(), &y, 0, &grid).map_err(e)?);
    let start = Instant::now();
    let model = ModelFile::fit(&train, Method::GpNormal, &GpConfig::default()).map_err(e)?;
    let out = model.apply(&gaussians(&eval)).map_err(e)?;
    let elapsed = start.elapsed();
    let after = mean_coverage_error(&reliability_curve(&out, &y, 0, &grid).map_err(e)?);
    check(
        before > 0.10 && after < 0.03 && elapsed < Duration::from_secs(300),
        format!("coverage error before {before:.4} (> 0.10), after {after:.4} (< 0.03), fit+apply {elapsed:.1?} (< 5 min)"),
    )
}

fn criterion_3() -> Outcome {
    let ds = cosine(7, 2.0, false);
    let cal = isotonic_fit(&ds).map_err(e)?;
    let out = ds
        .predictions()
        .iter()
        .map(|p| isotonic_apply(&cal, p).map(Prediction::from))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let q = mean_qce_marginal(&out, &ds.ground_truths(), 0, &QuantileGrid::standard(), 20).map_err(e)?;
    check(q < 0.02, format!("isotonic mean QCE {q:.4} (< 0.02), fitted and scored on all 8000 samples"))
}

/// Golden-section minimizer of the Gaussian NLL in `ln w` for one dimension.
fn numeric_variance_weight(ds: &CalibrationDataset, dim: usize) -> f64 {
    let terms: Vec<(f64, f64)> = ds
        .samples()
        .iter()
        .map(|s| {
            let r = s.ground_truth[dim] - s.prediction.mean()[dim];
            (s.prediction.variance(dim), r * r)
        })
        .collect();
    let nll = |lw: f64| -> f64 {
        let w = lw.exp();
        terms.iter().map(|(v, r2)| (w * v).ln() + r2 / (w * v)).sum()
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-25.0, 25.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    while b - a > 1e-10 {
        if nll(c) < nll(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - phi * (b - a);
        d = a + phi * (b - a);
    }
    (0.5 * (a + b)).exp()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=3);
        let n = rng.random_range(5..300);
        let spread = rng.random_range(0.2..5.0);
        let samples = (0..n)
            .map(|_| {
                let mean: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
                let var: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..4.0)).collect();
                let gt = mean
                    .iter()
                    .zip(&var)
                    .map(|(m, v)| m + spread * v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Sample {
                    prediction: GaussianPrediction::diagonal(mean, var).unwrap(),
                    ground_truth: gt,
                    image_id: None,
                }
            })
            .collect();
        let ds = CalibrationDataset::from_samples(k, samples).map_err(e)?;
        let fit = variance_scaling_fit(&ds).map_err(e)?;
        for d in 0..k {
            let numeric = numeric_variance_weight(&ds, d);
            worst = worst.max((fit.weights()[d] - numeric).abs() / numeric);
        }
    }
    let mut cfg = SynthConfig::new(SynthKind::GaussianConstMiscal, 10_000, 4);
    cfg.miscal = 2.0;
    let w = variance_scaling_fit(&generate(&cfg).map_err(e)?).map_err(e)?.weights()[0];
    check(
        worst < 1e-3 && (3.8..=4.2).contains(&w),
        format!("closed form vs numeric: worst relative gap {worst:.2e} (< 1e-3) over 100 datasets; w = {w:.4} at c = 2 (in [3.8, 4.2])"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let n = 10_000;
    let threshold = chi2_quantile(2, 0.9).map_err(e)?;
    let (mut sum, mut inside) = (0.0, 0usize);
    for _ in 0..n {
        let mean = vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let (s0, s1): (f64, f64) = (rng.random_range(0.3..3.0), rng.random_range(0.3..3.0));
        let rho: f64 = rng.random_range(-0.9..0.9);
        let cov = DMatrix::from_row_slice(2, 2, &[s0 * s0, rho * s0 * s1, rho * s0 * s1, s1 * s1]);
        let (z0, z1): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let y = [mean[0] + s0 * z0, mean[1] + s1 * (rho * z0 + (1.0 - rho * rho).sqrt() * z1)];
        let eps = nees(&mean, &cov, &y).map_err(e)?;
        sum += eps;
        inside += usize::from(eps <= threshold);
    }
    let mean_nees = sum / n as f64;
    let freq = inside as f64 / n as f64;
    // χ²₂ is exponential with mean 2: its 0.9-quantile is −2 ln 0.1.
    let closed = -2.0 * 0.1f64.ln();
    let mut worst = (threshold - closed).abs();
    for &tau in QuantileGrid::standard().levels() {
        let z = std_normal_quantile(0.5 + tau / 2.0);
        worst = worst.max((chi2_quantile(1, tau).map_err(e)? - z * z).abs());
    }
    check(
        (mean_nees - 2.0).abs() < 0.1 && (freq - 0.9).abs() < 0.01 && worst < 1e-6,
        format!("mean NEES {mean_nees:.4}, freq(ε ≤ χ²₂(0.9)) {freq:.4}, worst χ² quantile gap {worst:.1e}"),
    )
}

fn criterion_6() -> Outcome {
    let mut cfg = SynthConfig::new(SynthKind::CorrelatedMv, 10_000, 6);
    cfg.rho = 0.8;
    let ds = generate(&cfg).map_err(e)?;
    let (train, eval) = ds.split_at(5000);
    let model = ModelFile::fit(&train, Method::GpCovEst, &GpConfig::default()).map_err(e)?;
    let out = model.apply(&gaussians(&eval)).map_err(e)?;
    let mut rho_sum = 0.0;
    for p in &out {
        let c = p.as_gaussian().ok_or("non-Gaussian output")?.covariance();
        rho_sum += c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt();
    }
    let rho_hat = rho_sum / out.len() as f64;
    let y = eval.ground_truths();
    let calibrated = nll(&out, &y).map_err(e)?;
    let diagonal = nll(&eval.predictions(), &y).map_err(e)?;
    let gain = diagonal - calibrated;
    check(
        (rho_hat - 0.8).abs() <= 0.1 && gain >= 0.2,
        format!("mean output correlation {rho_hat:.4} (0.8 ± 0.1); NLL {calibrated:.4} vs diagonal {diagonal:.4}, gain {gain:.4} (≥ 0.2)"),
    )
}

fn criterion_7() -> Outcome {
    let mut cfg = SynthConfig::new(SynthKind::CauchyNoise, 5000, 3);
    cfg.miscal = 2.0;
    let ds = generate(&cfg).map_err(e)?;
    let (train, eval) = ds.split_at(2500);
    let config = GpConfig::default();
    let (cauchy, _) = gp_fit(&train, GpMethod::Cauchy, &config).map_err(e)?;
    let (normal, _) = gp_fit(&train, GpMethod::Normal, &config).map_err(e)?;
    let preds = gaussians(&eval);
    let y = eval.ground_truths();
    let nll_c = nll(&cauchy.apply_all(&preds, 1).map_err(e)?, &y).map_err(e)?;
    let nll_n = nll(&normal.apply_all(&preds, 1).map_err(e)?, &y).map_err(e)?;
    let nll_raw = nll(&eval.predictions(), &y).map_err(e)?;
    let mut w = 0.0;
    for p in &preds {
        w += cauchy.mean_weights(p, 3).map_err(e)?[0];
    }
    w /= preds.len() as f64;
    check(
        nll_c < nll_n && nll_c < nll_raw && (1.7..=2.3).contains(&w),
        format!("NLL GP-Cauchy {nll_c:.3} < GP-Normal {nll_n:.3} and uncalibrated {nll_raw:.3}; mean scale weight {w:.3} (in [1.7, 2.3])"),
    )
}

fn criterion_8() -> Outcome {
    let ds = cosine(11, 1.0, true);
    let (train, eval) = ds.split_at(4000);
    let (gp, _) = gp_fit(&train, GpMethod::Normal, &GpConfig::default()).map_err(e)?;
    let vs = variance_scaling_fit(&train).map_err(e)?;
    let preds = gaussians(&eval);
    let y = eval.ground_truths();
    let nll_gp = nll(&gp.apply_all(&preds, 1).map_err(e)?, &y).map_err(e)?;
    let vs_out = preds
        .iter()
        .map(|p| variance_scaling_apply(&vs, p).map(Prediction::from))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let nll_vs = nll(&vs_out, &y).map_err(e)?;
    check(
        nll_vs - nll_gp >= 0.05,
        format!("NLL GP-Normal {nll_gp:.4} vs variance scaling {nll_vs:.4}, gap {:.4} (≥ 0.05)", nll_vs - nll_gp),
    )
}

/// Worst relative gap between the analytic ELBO gradient and central
/// differences under frozen Monte-Carlo noise.
fn gradient_gap(ds: &CalibrationDataset, method: GpMethod, lik: &dyn Likelihood) -> Result<f64, String> {
    let inputs = kernel_inputs(ds);
    let config = GpConfig {
        inducing: 3,
        ..GpConfig::default()
    };
    let mut model = GpCalibrator::init(&inputs, method.head(), ds.k(), &config).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = model.params();
    for v in params.iter_mut() {
        *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    model.set_params(&params);
    let batch: Vec<usize> = (0..ds.len()).collect();
    let elbo = |p: &[f64]| -> Result<f64, String> {
        let mut m = model.clone();
        m.set_params(p);
        Ok(m.elbo_and_grad(&inputs, &batch, lik, ds.len(), 32, 77).map_err(e)?.elbo)
    };
    let grad = model.elbo_and_grad(&inputs, &batch, lik, ds.len(), 32, 77).map_err(e)?.grad;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut up = params.clone();
        let mut down = params.clone();
        up[i] += h;
        down[i] -= h;
        let fd = (elbo(&up)? - elbo(&down)?) / (2.0 * h);
        let scale = fd.abs().max(grad[i].abs()).max(1e-4);
        worst = worst.max((grad[i] - fd).abs() / scale);
    }
    Ok(worst)
}

fn five_samples(full: bool) -> CalibrationDataset {
    let samples = (0..5)
        .map(|i| {
            let t = i as f64;
            let mean = vec![t.sin(), 0.4 * t - 1.0];
            let var = [0.3 + 0.1 * t, 0.5 + 0.05 * t];
            let prediction = if full {
                let c = 0.3 * (var[0] * var[1]).sqrt();
                GaussianPrediction::full(mean, DMatrix::from_row_slice(2, 2, &[var[0], c, c, var[1]])).unwrap()
            } else {
                GaussianPrediction::diagonal(mean, var.to_vec()).unwrap()
            };
            Sample {
                prediction,
                ground_truth: vec![0.3 * t - 0.5, (1.3 * t).cos()],
                image_id: None,
            }
        })
        .collect();
    CalibrationDataset::from_samples(2, samples).unwrap()
}

fn criterion_9() -> Outcome {
    let diag = five_samples(false);
    let full = five_samples(true);
    // The template is fixed during training, so it may come from other data.
    let mut template_cfg = SynthConfig::new(SynthKind::CorrelatedMv, 200, 19);
    template_cfg.rho = 0.5;
    let template_data = generate(&template_cfg).map_err(e)?;
    let template = CovarianceSource::Template(correlation_template(&template_data).map_err(e)?);
    let cases: Vec<(&str, &CalibrationDataset, GpMethod, Box<dyn Likelihood>)> = vec![
        ("normal", &diag, GpMethod::Normal, Box::new(NormalLikelihood::new(&diag))),
        ("normal-mv", &full, GpMethod::NormalMv, Box::new(NormalMvLikelihood::new(&full).map_err(e)?)),
        ("cauchy", &diag, GpMethod::Cauchy, Box::new(CauchyLikelihood::new(&diag))),
        ("beta", &diag, GpMethod::Beta, Box::new(BetaLikelihood::new(&diag).map_err(e)?)),
        (
            "cov-est",
            &diag,
            GpMethod::CovarianceEstimation,
            Box::new(CovarianceLikelihood::new(&diag, &template).map_err(e)?),
        ),
        (
            "cov-recal",
            &full,
            GpMethod::CovarianceRecalibration,
            Box::new(CovarianceLikelihood::new(&full, &CovarianceSource::Input).map_err(e)?),
        ),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, ds, method, lik) in &cases {
        let gap = gradient_gap(ds, *method, lik.as_ref())?;
        ok &= gap <= 1e-4;
        parts.push(format!("{name} {gap:.1e}"));
    }
    check(ok, format!("worst relative gradient gap per head (≤ 1e-4): {}", parts.join(", ")))
}

/// Smallest weighted squared error over nondecreasing fits, by enumerating
/// every split of the sequence into contiguous blocks.
fn exhaustive_isotonic_sse(values: &[f64]) -> f64 {
    let n = values.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << (n - 1)) {
        let (mut means, mut sse, mut start) = (Vec::new(), 0.0, 0);
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let m = values[start..end].iter().sum::<f64>() / (end - start) as f64;
                sse += values[start..end].iter().map(|v| (v - m).powi(2)).sum::<f64>();
                means.push(m);
                start = end;
            }
        }
        if means.windows(2).all(|w| w[0] <= w[1] + 1e-12) {
            best = best.min(sse);
        }
    }
    best
}

fn criterion_10(suite_start: Instant) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut failures = Vec::new();

    let mut ldl_worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let m = DMatrix::from_fn(k, k, |_, _| rng.random_range(-2.0..2.0));
        let a = &m * m.transpose() + DMatrix::identity(k, k) * 0.01;
        ldl_worst = ldl_worst.max(relative_frobenius(&ldl_decompose(&a).map_err(e)?.reconstruct(), &a));
    }
    if ldl_worst >= 1e-9 {
        failures.push(format!("LDL round-trip {ldl_worst:.1e}"));
    }

    let mut pav_worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=8);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fit = pav(&v, &vec![1.0; n]);
        let sse: f64 = fit.iter().zip(&v).map(|(f, x)| (f - x).powi(2)).sum();
        if fit.windows(2).any(|w| w[0] > w[1]) {
            failures.push("PAV output not monotone".into());
        }
        pav_worst = pav_worst.max(sse - exhaustive_isotonic_sse(&v));
    }
    if pav_worst > 1e-9 {
        failures.push(format!("PAV suboptimal by {pav_worst:.1e}"));
    }

    let small = GpConfig {
        inducing: 10,
        epochs: 3,
        mc_samples: 16,
        batch_size: 64,
        seed: 21,
        ..GpConfig::default()
    };
    let mut uni_cfg = SynthConfig::new(SynthKind::Cosine, 200, 12);
    uni_cfg.miscal = 2.0;
    let uni = generate(&uni_cfg).map_err(e)?;
    let mut mv_cfg = SynthConfig::new(SynthKind::CorrelatedMv, 200, 13);
    mv_cfg.rho = 0.5;
    let mv = generate(&mv_cfg).map_err(e)?;
    let mv_full = CalibrationDataset::from_samples(
        2,
        mv.samples()
            .iter()
            .map(|s| Sample {
                prediction: GaussianPrediction::full(s.prediction.mean().to_vec(), {
                    let mut c = s.prediction.covariance();
                    let off = 0.2 * (c[(0, 0)] * c[(1, 1)]).sqrt();
                    c[(0, 1)] = off;
                    c[(1, 0)] = off;
                    c
                })
                .unwrap(),
                ..s.clone()
            })
            .collect(),
    )
    .map_err(e)?;
    for method in Method::ALL {
        let ds = match method {
            Method::GpCovEst => &mv,
            Method::GpNormalMv | Method::GpCovRecal => &mv_full,
            _ => &uni,
        };
        let a = ModelFile::fit(ds, method, &small).map_err(e)?;
        let b = ModelFile::fit(ds, method, &small).map_err(e)?;
        if a.to_json().map_err(e)? != b.to_json().map_err(e)? {
            failures.push(format!("{method}: refit differs"));
        }
        let preds = gaussians(ds);
        let out_a = a.apply(&preds[..20]).map_err(e)?;
        let out_b = b.apply(&preds[..20]).map_err(e)?;
        if out_a != out_b {
            failures.push(format!("{method}: apply differs"));
        }
        for p in &out_a {
            let probes: Vec<f64> = (-60..=60).map(|i| i as f64 * 0.1).collect();
            for d in 0..p.k() {
                let c: Vec<f64> = probes.iter().map(|&y| p.cdf(y, d).unwrap()).collect();
                if c.windows(2).any(|w| w[0] > w[1]) {
                    failures.push(format!("{method}: CDF not monotone"));
                }
            }
            if let Some(g) = p.as_gaussian() {
                if g.covariance().symmetric_eigen().eigenvalues.min() <= 0.0 {
                    failures.push(format!("{method}: covariance not SPD"));
                }
            }
        }
    }

    let total = suite_start.elapsed();
    if total >= Duration::from_secs(15 * 60) {
        failures.push(format!("suite took {total:.0?}"));
    }
    failures.dedup();
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "LDL worst {ldl_worst:.1e} (< 1e-9), PAV optimal on 500 sets, all 8 fit methods bitwise deterministic \
                 with monotone CDFs and SPD covariances; suite time {total:.0?} (< 15 min)"
            )
        } else {
            failures.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, outcome: Outcome| match outcome {
        Ok(d) => println!("[criterion {n}] PASS: {d}"),
        Err(d) => {
            failed += 1;
            println!("[criterion {n}] FAIL: {d}");
        }
    };
    criterion_1();
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());
    report(8, criterion_8());
    report(9, criterion_9());
    report(10, criterion_10(start));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
