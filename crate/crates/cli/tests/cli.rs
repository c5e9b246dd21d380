use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sgi_core::{load_image, render_model, save_image, Image};
use tempfile::TempDir;

const TRAIN: &[&str] = &["--gaussians", "100", "--k", "10", "--steps", "120", "--levels", "2", "--seed", "5"];

fn sgi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgi"))
        .args(args)
        .env("SGI_THREADS", "1")
        .output()
        .expect("run sgi")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let mut data = Vec::with_capacity(24 * 16 * 3);
    for y in 0..16 {
        for x in 0..24 {
            data.extend([x as f32 / 23.0, y as f32 / 15.0, ((x * y) % 7) as f32 / 6.0]);
        }
    }
    let img = Image::from_data(24, 16, data).unwrap();
    let path = dir.path().join("in.png");
    save_image(&img, &path).unwrap();
    (dir, path)
}

fn encode(input: &Path, output: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["encode", "--input", s(input), "--output", s(output)];
    args.extend_from_slice(TRAIN);
    args.extend_from_slice(extra);
    sgi(&args)
}

#[test]
fn encode_decode_eval_round_trip() {
    let (dir, input) = setup();
    let stream = dir.path().join("a.sgi");
    let log = dir.path().join("log.csv");
    let summary = dir.path().join("summary.json");
    let out = encode(&input, &stream, &["--train-log", s(&log), "--train-summary", s(&summary)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gaussians=100"), "{stdout}");
    assert!(stdout.contains("psnr"), "{stdout}");

    let bytes = std::fs::read(&stream).unwrap();
    assert_eq!(&bytes[..4], b"SGI1");
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert!(log_text.lines().count() >= 2);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&summary).unwrap()).unwrap();
    assert!(summary.is_object());

    let png = dir.path().join("out.png");
    let out = sgi(&["decode", "--input", s(&stream), "--output", s(&png)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let decoded = load_image(&png).unwrap();
    assert_eq!((decoded.width, decoded.height), (24, 16));

    let model = sgi_core::decode_model(&bytes).unwrap();
    let reference = dir.path().join("reference.png");
    save_image(&render_model(&model).unwrap(), &reference).unwrap();
    assert_eq!(std::fs::read(&png).unwrap(), std::fs::read(&reference).unwrap());

    let png2 = dir.path().join("out2.png");
    assert!(sgi(&["decode", "--input", s(&stream), "--output", s(&png2)]).status.success());
    assert_eq!(std::fs::read(&png).unwrap(), std::fs::read(&png2).unwrap());

    let big = dir.path().join("big.png");
    let out = sgi(&["decode", "--input", s(&stream), "--output", s(&big), "--scale", "2"]);
    assert!(out.status.success());
    let big = load_image(&big).unwrap();
    assert_eq!((big.width, big.height), (48, 32));

    let report = dir.path().join("report.json");
    let out = sgi(&["eval", "--image", s(&input), "--stream", s(&stream), "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(report["bytes_total"].as_u64().unwrap(), bytes.len() as u64);
    assert_eq!(report["width"].as_u64().unwrap(), 24);
    let bpp = report["bpp"].as_f64().unwrap();
    assert!((bpp - bytes.len() as f64 * 8.0 / (24.0 * 16.0)).abs() < 1e-9);
    let per_component: u64 = report["bytes_per_component"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(per_component, bytes.len() as u64);
}

#[test]
fn encoding_is_deterministic() {
    let (dir, input) = setup();
    let a = dir.path().join("a.sgi");
    let b = dir.path().join("b.sgi");
    assert!(encode(&input, &a, &[]).status.success());
    assert!(encode(&input, &b, &[]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let (dir, input) = setup();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "gaussians = 100\nk = 10\nsteps = 120\nlevels = 2\nseed = 5\nlambda = 0.5\n").unwrap();
    let stream = dir.path().join("a.sgi");
    let out = sgi(&["encode", "--input", s(&input), "--output", s(&stream), "--config", s(&cfg), "--lambda", "0.001"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let direct = dir.path().join("b.sgi");
    assert!(encode(&input, &direct, &["--lambda", "0.001"]).status.success());
    assert_eq!(std::fs::read(&stream).unwrap(), std::fs::read(&direct).unwrap());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let (dir, input) = setup();
    let csv = dir.path().join("sweep.csv");
    let mut args = vec!["sweep", "--image", s(&input), "--vary", "lambda", "--values", "0,0.01", "--out", s(&csv)];
    args.extend_from_slice(TRAIN);
    let out = sgi(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[0].contains("psnr") && lines[0].contains("bytes"));
}

#[test]
fn exit_codes() {
    let (dir, input) = setup();
    assert_eq!(sgi(&[]).status.code(), Some(1));
    assert_eq!(sgi(&["encode", "--input", s(&input)]).status.code(), Some(1));
    assert_eq!(sgi(&["--help"]).status.code(), Some(0));

    let stream = dir.path().join("a.sgi");
    let missing = dir.path().join("missing.png");
    assert_eq!(encode(&missing, &stream, &[]).status.code(), Some(2));
    let out = sgi(&["encode", "--input", s(&input), "--output", s(&stream), "--gaussians", "5", "--k", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    assert!(encode(&input, &stream, &[]).status.success());
    let mut bytes = std::fs::read(&stream).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let corrupt = dir.path().join("corrupt.sgi");
    std::fs::write(&corrupt, &bytes).unwrap();
    let png = dir.path().join("x.png");
    assert_eq!(sgi(&["decode", "--input", s(&corrupt), "--output", s(&png)]).status.code(), Some(4));
    std::fs::write(&corrupt, &bytes[..10]).unwrap();
    assert_eq!(sgi(&["decode", "--input", s(&corrupt), "--output", s(&png)]).status.code(), Some(4));
    assert!(!png.exists());
}
