use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn recal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recal"))
        .args(args)
        .env_remove("RECAL_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = recal(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn synth(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let out = p(dir, name);
    let mut args = vec!["synth", "--output", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

const SMALL_GP: [&str; 10] = [
    "--inducing",
    "8",
    "--epochs",
    "3",
    "--mc-samples",
    "8",
    "--batch-size",
    "64",
    "--seed",
    "5",
];

#[test]
fn synth_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let args = ["--kind", "cosine", "--n", "8000", "--seed", "7", "--miscal", "2.0"];
    let a = synth(&dir, "a.jsonl", &args);
    let b = synth(&dir, "b.jsonl", &args);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(lines(&a).len(), 8000);

    let mv = synth(&dir, "mv.jsonl", &["--kind", "correlated-mv", "--rho", "0.8", "--n", "10000"]);
    let recs = lines(&mv);
    assert_eq!(recs.len(), 10000);
    assert_eq!(recs[0]["mean"].as_array().unwrap().len(), 2);
}

#[test]
fn fit_var_scaling_smoke() {
    let dir = TempDir::new().unwrap();
    let train = synth(&dir, "t.jsonl", &["--kind", "gaussian-const-miscal", "--n", "2000", "--miscal", "2"]);
    let model = p(&dir, "m.json");
    let out = ok(&["fit", "--method", "var-scaling", "--input", s(&train), "--output", s(&model)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("train_nll:"));
    let m: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(m["method"], "var-scaling");
    let w = m["payload"]["weights"][0].as_f64().unwrap();
    assert!((3.5..4.5).contains(&w), "w = {w}");
}

#[test]
fn identity_scaler_passes_fields_through() {
    let dir = TempDir::new().unwrap();
    let model = p(&dir, "id.json");
    fs::write(
        &model,
        r#"{"format_version":1,"method":"var-scaling","k":2,"seed":0,"payload":{"kind":"variance_scaling","weights":[1.0,1.0]}}"#,
    )
    .unwrap();
    let input = p(&dir, "in.jsonl");
    fs::write(
        &input,
        "{\"mean\":[1.0,2.0],\"var\":[0.5,3.0],\"gt\":[1.5,1.0],\"image_id\":\"a\"}\n\
         {\"mean\":[-1.0,0.25],\"var\":[2.0,0.125]}\n",
    )
    .unwrap();
    let output = p(&dir, "out.jsonl");
    ok(&["apply", "--model", s(&model), "--input", s(&input), "--output", s(&output)]);
    let got = lines(&output);
    let want = lines(&input);
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        for key in ["mean", "var", "gt", "image_id"] {
            assert_eq!(g.get(key), w.get(key), "field {key}");
        }
    }
}

#[test]
fn gp_beta_outputs_grid_cdfs() {
    let dir = TempDir::new().unwrap();
    let train = synth(&dir, "t.jsonl", &["--kind", "cosine", "--n", "200", "--miscal", "2"]);
    let model = p(&dir, "m.json");
    let mut args = vec!["fit", "--method", "gp-beta", "--input", s(&train), "--output", s(&model)];
    args.extend_from_slice(&SMALL_GP);
    ok(&args);
    let output = p(&dir, "out.jsonl");
    ok(&["apply", "--model", s(&model), "--input", s(&train), "--output", s(&output)]);
    let recs = lines(&output);
    assert_eq!(recs.len(), 200);
    for r in &recs {
        assert_eq!(r["family"], "grid");
        let cdf = r["cdf"][0].as_array().unwrap();
        let vals: Vec<f64> = cdf.iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn gp_fit_is_deterministic_and_honours_env_seed() {
    let dir = TempDir::new().unwrap();
    let train = synth(&dir, "t.jsonl", &["--kind", "cosine", "--n", "300", "--miscal", "2"]);
    let a = p(&dir, "a.json");
    let b = p(&dir, "b.json");
    for out in [&a, &b] {
        let mut args = vec!["fit", "--method", "gp-normal", "--input", s(&train), "--output", s(out)];
        args.extend_from_slice(&SMALL_GP);
        ok(&args);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let c = p(&dir, "c.json");
    let status = Command::new(env!("CARGO_BIN_EXE_recal"))
        .args(["fit", "--method", "gp-normal", "--input", s(&train), "--output", s(&c)])
        .args(["--inducing", "8", "--epochs", "1", "--mc-samples", "4"])
        .env("RECAL_SEED", "9")
        .status()
        .unwrap();
    assert!(status.success());
    let m: Value = serde_json::from_str(&fs::read_to_string(&c).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
}

#[test]
fn data_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let missing = p(&dir, "nope.jsonl");
    let model = p(&dir, "m.json");
    let out = recal(&["fit", "--method", "isotonic", "--input", s(&missing), "--output", s(&model)]);
    assert_eq!(code(&out), 2);

    let train = synth(&dir, "t.jsonl", &["--kind", "gaussian-const-miscal", "--n", "50"]);
    let out = recal(&["fit", "--method", "gp-foo", "--input", s(&train), "--output", s(&model)]);
    assert_eq!(code(&out), 2);

    let truncated = p(&dir, "trunc.jsonl");
    let text = fs::read_to_string(&train).unwrap();
    let mut kept: Vec<&str> = text.lines().take(3).collect();
    let cut = &kept[2][..kept[2].len() / 2];
    kept[2] = cut;
    fs::write(&truncated, kept.join("\n")).unwrap();
    ok(&["fit", "--method", "var-scaling", "--input", s(&train), "--output", s(&model)]);
    let out = recal(&["apply", "--model", s(&model), "--input", s(&truncated)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let mv = synth(&dir, "mv.jsonl", &["--kind", "correlated-mv", "--n", "10"]);
    let out = recal(&["apply", "--model", s(&model), "--input", s(&mv)]);
    assert_eq!(code(&out), 2);

    let out = recal(&["eval", "--input", s(&train), "--metrics", "nll,brier"]);
    assert_eq!(code(&out), 2);

    let out = recal(&["fit", "--method", "isotonic"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn numerical_failure_exits_3() {
    let dir = TempDir::new().unwrap();
    let train = synth(&dir, "t.jsonl", &["--kind", "cauchy-noise", "--n", "300", "--miscal", "1000"]);
    let model = p(&dir, "m.json");
    let out = recal(&[
        "fit", "--method", "gp-normal", "--input", s(&train), "--output", s(&model), "--lr", "1e300",
        "--inducing", "8", "--epochs", "5", "--mc-samples", "4",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_report_and_reliability_csv() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.jsonl", &["--kind", "correlated-mv", "--n", "8000", "--rho", "0.0"]);
    let report = p(&dir, "r.json");
    let csv = p(&dir, "rel.csv");
    ok(&["eval", "--input", s(&data), "--output", s(&report), "--reliability-csv", s(&csv)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["nll.dim0", "nll.joint", "pinball.dim1", "qce.dim0", "qce.joint", "uce.dim1", "ence.mean"] {
        assert!(r["metrics"][key].is_number(), "missing {key}");
    }
    assert!(r["metrics"]["qce.mean"].as_f64().unwrap() < 0.03);
    assert_eq!(r["config"]["bins"], 20);
    assert_eq!(r["config"]["levels"].as_array().unwrap().len(), 19);
    for d in 0..2 {
        let text = fs::read_to_string(dir.path().join(format!("rel.dim{d}.csv"))).unwrap();
        let mut rows = text.lines();
        assert_eq!(rows.next(), Some("tau,coverage"));
        assert_eq!(rows.count(), 19);
    }

    let again = p(&dir, "r2.json");
    ok(&["eval", "--input", s(&data), "--output", s(&again)]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&again).unwrap());

    let single = p(&dir, "single.json");
    ok(&["eval", "--input", s(&data), "--levels", "0.5:0.5:0.1", "--output", s(&single)]);
    let r: Value = serde_json::from_str(&fs::read_to_string(&single).unwrap()).unwrap();
    assert_eq!(r["config"]["levels"], serde_json::json!([0.5]));
    assert!(r["metrics"]["qce.mean"].is_number());
}

#[test]
fn eval_notes_missing_variance_for_cauchy() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "c.jsonl");
    fs::write(
        &data,
        "{\"family\":\"cauchy\",\"location\":[0.0],\"scale\":[1.0],\"gt\":[0.3]}\n\
         {\"family\":\"cauchy\",\"location\":[1.0],\"scale\":[2.0],\"gt\":[-4.0]}\n\
         {\"family\":\"cauchy\",\"location\":[2.0],\"scale\":[0.5],\"gt\":[2.1]}\n",
    )
    .unwrap();
    let out = ok(&["eval", "--input", s(&data), "--bins", "1"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r["metrics"].get("uce.mean").is_none());
    assert!(r["metrics"].get("ence.mean").is_none());
    let notes = r["notes"].to_string();
    assert!(notes.contains("no variance defined"));
    assert!(r["metrics"]["nll.mean"].is_number());
}

#[test]
fn match_split_half_keeps_images_apart() {
    let dir = TempDir::new().unwrap();
    let mut dets = String::new();
    let mut gts = String::new();
    for img in 0..10 {
        for j in 0..3 {
            let x = 20.0 * j as f64 + 10.0;
            gts.push_str(&format!(
                "{{\"image_id\":\"img{img}\",\"category\":\"car\",\"box\":[{x},10.0,8.0,6.0]}}\n"
            ));
            dets.push_str(&format!(
                "{{\"image_id\":\"img{img}\",\"category\":\"car\",\"box_mean\":[{},10.5,8.2,5.9],\"box_var\":[1.0,1.0,2.0,2.0],\"score\":0.9}}\n",
                x + 0.3
            ));
        }
    }
    let det_path = p(&dir, "det.jsonl");
    let gt_path = p(&dir, "gt.jsonl");
    fs::write(&det_path, dets).unwrap();
    fs::write(&gt_path, gts).unwrap();
    let train = p(&dir, "train.jsonl");
    let eval = p(&dir, "eval.jsonl");
    ok(&[
        "match", "--detections", s(&det_path), "--ground-truth", s(&gt_path), "--iou", "0.5", "--split-half",
        "--train", s(&train), "--eval", s(&eval),
    ]);
    let ids = |path: &Path| -> std::collections::BTreeSet<String> {
        lines(path).iter().map(|r| r["image_id"].as_str().unwrap().to_string()).collect()
    };
    let (a, b) = (ids(&train), ids(&eval));
    assert_eq!(a.len(), 5);
    assert_eq!(b.len(), 5);
    assert!(a.is_disjoint(&b));
    assert_eq!(lines(&train).len() + lines(&eval).len(), 30);

    let all = p(&dir, "all.jsonl");
    ok(&["match", "--detections", s(&det_path), "--ground-truth", s(&gt_path), "--output", s(&all)]);
    assert_eq!(lines(&all).len(), 30);
}
