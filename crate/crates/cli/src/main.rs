//! `recal`: fit, apply and evaluate post-hoc uncertainty calibrators.
//!
//! Exit codes: 0 on success, 2 for usage or input-data problems, 3 when a fit
//! or evaluation fails numerically.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recal::detection::{
    corners_to_center, half_split, match_detections, DetectionRecord, GroundTruthRecord, MatchConfig, SplitMode,
};
use recal::io::{read_dataset, read_jsonl, read_predictions, write_dataset, write_predictions, PredictionFile};
use recal::metrics::{evaluate, nll, reliability_curve, EvalConfig, Metric, QuantileGrid};
use recal::synth::{generate, SynthConfig, SynthKind};
use recal::{Error, GpConfig, Method, ModelFile};

#[derive(Parser)]
#[command(name = "recal", version, about = "Post-hoc recalibration of probabilistic regression outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a calibrator on a JSON-lines training set and write the model.
    Fit(FitArgs),
    /// Calibrate every line of a JSON-lines file with a fitted model.
    Apply(ApplyArgs),
    /// Compute calibration metrics for predictions with ground truth.
    Eval(EvalArgs),
    /// Match detections to ground truth by IoU.
    Match(MatchArgs),
    /// Generate a synthetic calibration dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 50)]
    inducing: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long = "mc-samples", default_value_t = 128)]
    mc_samples: usize,
    #[arg(long = "batch-size", default_value_t = 256)]
    batch_size: usize,
    /// Rank of the low-rank part of the coregionalization matrix.
    #[arg(long, default_value_t = 1)]
    rank: usize,
    #[arg(long, env = "RECAL_SEED", default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Quantile levels as start:stop:step.
    #[arg(long, default_value = "0.05:0.95:0.05")]
    levels: String,
    /// Comma-separated subset of nll,pinball,qce,uce,ence.
    #[arg(long, default_value = "nll,pinball,qce,uce,ence")]
    metrics: String,
    /// Report destination; defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Reliability curve CSV (`tau,coverage`); with K > 1 one file per
    /// dimension named `<stem>.dim<d>.csv`.
    #[arg(long = "reliability-csv")]
    reliability_csv: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long = "ground-truth")]
    ground_truth: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Allow matches across categories.
    #[arg(long = "any-category")]
    any_category: bool,
    /// Boxes (and detection variances) are given as x1,y1,x2,y2.
    #[arg(long)]
    corners: bool,
    /// Matched pairs; required unless --split-half.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long = "split-half")]
    split_half: bool,
    #[arg(long, requires = "split_half")]
    train: Option<PathBuf>,
    #[arg(long = "eval", requires = "split_half")]
    eval_out: Option<PathBuf>,
    #[arg(long, env = "RECAL_SEED", default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long, env = "RECAL_SEED", default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    miscal: f64,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    /// Output dimension; defaults to 2 for correlated-mv and 1 otherwise.
    #[arg(long)]
    k: Option<usize>,
    /// Cosine only: state one global variance for all samples.
    #[arg(long = "constant-variance")]
    constant_variance: bool,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } | Error::NotPositiveDefinite { .. } | Error::NonFiniteLikelihood { .. } => 3,
        _ => 2,
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    let method: Method = args.method.parse()?;
    let train = read_dataset(open(&args.input)?)?;
    let config = GpConfig {
        inducing: args.inducing,
        epochs: args.epochs,
        lr: args.lr,
        mc_samples: args.mc_samples,
        batch_size: args.batch_size,
        seed: args.seed,
        rank: args.rank,
        ..GpConfig::default()
    };
    let model = ModelFile::fit(&train, method, &config)?;
    let inputs: Vec<_> = train.samples().iter().map(|s| s.prediction.clone()).collect();
    let train_nll = nll(&model.apply(&inputs)?, &train.ground_truths())?;
    let mut out = create(&args.output)?;
    out.write_all(model.to_json()?.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    if let Some(log) = &model.training_log {
        println!("initial_elbo_per_sample: {}", log.initial_elbo);
        println!("final_elbo_per_sample: {}", log.smoothed_final(10));
    }
    println!("train_nll: {train_nll}");
    Ok(())
}

fn cmd_apply(args: ApplyArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.model)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", args.model.display()))))?;
    let model = ModelFile::from_json(&text)?;
    let mut input = read_predictions(open(&args.input)?)?;
    let gaussians = input
        .predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.as_gaussian().cloned().ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("calibrators take Gaussian inputs, got {}", p.family()),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(i) = gaussians.iter().position(|g| g.k() != model.k) {
        return Err(Error::Parse {
            line: i + 1,
            msg: format!("model expects K = {}, line has K = {}", model.k, gaussians[i].k()),
        });
    }
    input.predictions = model.apply(&gaussians)?;
    write_predictions(sink(args.output.as_deref())?, &input)
}

fn parse_levels(text: &str) -> Result<QuantileGrid, Error> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::InvalidParameter(format!("levels must look like start:stop:step, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    QuantileGrid::from_range(nums[0], nums[1], nums[2])
}

fn reliability_paths(base: &Path, k: usize) -> Vec<PathBuf> {
    if k == 1 {
        return vec![base.to_path_buf()];
    }
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (0..k).map(|d| base.with_file_name(format!("{stem}.dim{d}.csv"))).collect()
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let metrics = args
        .metrics
        .split(',')
        .map(|m| m.trim().parse::<Metric>())
        .collect::<Result<Vec<_>, _>>()?;
    let grid = parse_levels(&args.levels)?;
    if args.bins == 0 {
        return Err(Error::InvalidParameter("--bins must be ≥ 1".into()));
    }
    let file: PredictionFile = read_predictions(open(&args.input)?)?;
    if file.predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let targets = file.targets()?;
    let cfg = EvalConfig {
        bins: args.bins,
        grid: grid.clone(),
        metrics: metrics.clone(),
    };
    let report = evaluate(&file.predictions, &targets, &cfg)?;
    let json = serde_json::json!({
        "metrics": report.metrics,
        "notes": report.notes,
        "config": {
            "bins": args.bins,
            "levels": grid.levels(),
            "metrics": metrics.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "samples": file.predictions.len(),
        },
    });
    let mut out = sink(args.output.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &json)?;
    out.write_all(b"\n")?;
    out.flush()?;
    if let Some(base) = &args.reliability_csv {
        let k = file.predictions[0].k();
        for (d, path) in reliability_paths(base, k).into_iter().enumerate() {
            let curve = reliability_curve(&file.predictions, &targets, d, &grid)?;
            let mut w = create(&path)?;
            writeln!(w, "tau,coverage")?;
            for (tau, cov) in curve {
                writeln!(w, "{tau},{cov}")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_match(args: MatchArgs) -> Result<(), Error> {
    let mut dets: Vec<DetectionRecord> = read_jsonl(open(&args.detections)?)?;
    let mut gts: Vec<GroundTruthRecord> = read_jsonl(open(&args.ground_truth)?)?;
    if args.corners {
        dets = dets
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                d.into_center_format().map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        for g in gts.iter_mut() {
            g.bbox = corners_to_center(g.bbox);
        }
    }
    let config = MatchConfig {
        iou_threshold: args.iou,
        category_strict: !args.any_category,
        split: if args.split_half { SplitMode::Half } else { SplitMode::None },
    };
    let (dataset, report) = match_detections(&dets, &gts, &config)?;
    eprintln!("{}", serde_json::to_string(&report)?);
    match config.split {
        SplitMode::None => {
            let path = args
                .output
                .ok_or_else(|| Error::InvalidParameter("--output is required without --split-half".into()))?;
            write_dataset(create(&path)?, &dataset)
        }
        SplitMode::Half => {
            let (train_path, eval_path) = match (args.train, args.eval_out) {
                (Some(t), Some(e)) => (t, e),
                _ => return Err(Error::InvalidParameter("--split-half needs --train and --eval".into())),
            };
            let (train, eval) = half_split(&dataset, args.seed)?;
            write_dataset(create(&train_path)?, &train)?;
            write_dataset(create(&eval_path)?, &eval)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let kind: SynthKind = args.kind.parse()?;
    let mut cfg = SynthConfig::new(kind, args.n, args.seed);
    cfg.miscal = args.miscal;
    cfg.rho = args.rho;
    cfg.constant_variance = args.constant_variance;
    if let Some(k) = args.k {
        cfg.k = k;
    }
    let ds = generate(&cfg)?;
    write_dataset(sink(args.output.as_deref())?, &ds)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Match(a) => cmd_match(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
