use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use toothloc::data::{read_annotation, DatasetManifest, GrayImage, SplitFractions};
use toothloc_cli::RunConfig;

fn toothloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toothloc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = toothloc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `root`, relative path and bytes, sorted.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A 12-scene dataset shared by the read-only tests.
fn dataset() -> &'static Path {
    static DIR: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        ok(&["--out", p(&data), "synthesize", "--count", "12"]);
        (dir, data)
    })
    .1
}

fn quick_train(out: &Path, extra: &[&str]) {
    let mut args = vec!["--out", p(out), "train", "--data", p(dataset()), "--backbone", "tiny", "--iterations", "4"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synthesize_writes_count_pairs_and_manifest() {
    let data = dataset();
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 12);
    assert_eq!(fs::read_dir(data.join("annotations")).unwrap().count(), 12);
    let m = DatasetManifest::load(data).unwrap();
    assert_eq!(m.train.len() + m.val.len() + m.test.len(), 12);
    assert!(data.join("config.toml").exists());
}

#[test]
fn synthesize_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--out", p(&a), "--seed", "5", "synthesize", "--count", "4"]);
    ok(&["--out", p(&b), "--seed", "5", "synthesize", "--count", "4"]);
    assert_eq!(tree(&a), tree(&b));
    let c = dir.path().join("c");
    ok(&["--out", p(&c), "--seed", "6", "synthesize", "--count", "4"]);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn default_split_of_818() {
    assert_eq!(RunConfig::default().dataset.split.counts(818).unwrap(), [574, 162, 82]);
    let stems: Vec<String> = (0..818).map(|i| format!("s{i}")).collect();
    let m = DatasetManifest::split(stems, &SplitFractions::default()).unwrap();
    assert_eq!((m.train.len(), m.val.len(), m.test.len()), (574, 162, 82));
}

#[test]
fn zero_iterations_writes_the_initial_model() {
    let dir = TempDir::new().unwrap();
    ok(&["--out", p(dir.path()), "train", "--data", p(dataset()), "--backbone", "tiny", "--iterations", "0"]);
    assert!(dir.path().join("checkpoint.tpckpt").exists());
    assert!(dir.path().join("model.json").exists());
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    toothloc::pipeline::load_model(dir.path()).unwrap();
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn no_dr_zeroes_the_dr_column() {
    let dir = TempDir::new().unwrap();
    let (on, off) = (dir.path().join("on"), dir.path().join("off"));
    quick_train(&on, &[]);
    quick_train(&off, &["--no-dr"]);
    let on = column(&fs::read_to_string(on.join("metrics.csv")).unwrap(), "dr");
    let off = column(&fs::read_to_string(off.join("metrics.csv")).unwrap(), "dr");
    assert_eq!(off, vec![0.0; 4]);
    assert!(on.iter().all(|v| *v > 0.0));
}

#[test]
fn ground_truth_as_predictions_scores_perfectly() {
    let dir = TempDir::new().unwrap();
    let data = dataset();
    ok(&["--out", p(dir.path()), "eval", "--data", p(data), "--predictions", p(&data.join("annotations"))]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["detection"]["ap50"], 1.0);
    assert_eq!(report["identification"]["precision"], 1.0);
    assert_eq!(report["identification"]["recall"], 1.0);
    assert!(dir.path().join("report.csv").exists());
    assert!(dir.path().join("confusion.png").exists());
}

#[test]
fn model_eval_report_is_bounded() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("model");
    quick_train(&model, &[]);
    let out = dir.path().join("eval");
    ok(&["--out", p(&out), "eval", "--data", p(dataset()), "--model", p(&model), "--split", "train"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    for v in [
        &report["detection"]["ap"],
        &report["detection"]["ap50"],
        &report["detection"]["ap75"],
        &report["identification"]["precision"],
        &report["identification"]["recall"],
    ] {
        let v = v.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    assert!(report["fps"].as_f64().unwrap() > 0.0);
    assert_eq!(report["split"], "train");
    let m = DatasetManifest::load(dataset()).unwrap();
    assert_eq!(fs::read_dir(out.join("overlays")).unwrap().count(), m.train.len().min(16));
}

#[test]
fn empty_split_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[dataset.split]\ntrain = 1.0\nval = 0.0\ntest = 0.0\n").unwrap();
    ok(&["--config", p(&cfg), "--out", p(&data), "synthesize", "--count", "2"]);
    let out = toothloc(&["--out", p(&dir.path().join("e")), "eval", "--data", p(&data), "--predictions", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty split"));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(toothloc(&["frobnicate"]).status.code(), Some(1));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rat = 1.0\n").unwrap();
    let out = toothloc(&["--config", p(&cfg), "--out", p(dir.path()), "synthesize", "--count", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = toothloc(&["--out", p(dir.path()), "train", "--data", p(dataset()), "--backbone", "vast"]);
    assert_eq!(out.status.code(), Some(1));
    let out = toothloc(&["--out", p(dir.path()), "train", "--data", p(&dir.path().join("nowhere"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_reports_injected_faults() {
    let dir = TempDir::new().unwrap();
    let (good, bad) = (dir.path().join("good"), dir.path().join("bad"));
    let out = ok(&["--out", p(&good), "gradcheck"]);
    let table = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(!table.contains("FAIL") && table.contains("dr_loss"));
    assert_eq!(fs::read_to_string(good.join("gradcheck.txt")).unwrap(), table);
    let out = toothloc(&["--out", p(&bad), "gradcheck", "--fault-dr-scale", "1.01"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    let again = ok(&["--out", p(&good), "gradcheck"]);
    assert_eq!(String::from_utf8_lossy(&again.stdout), table);
}

#[test]
fn snapshot_reruns_reproduce_training() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    quick_train(&a, &["--no-offset", "--seed", "3"]);
    let snapshot = a.join("config.toml");
    ok(&["--config", p(&snapshot), "--out", p(&b), "train", "--data", p(dataset())]);
    for f in ["checkpoint.tpckpt", "model.json", "metrics.csv", "validation.csv", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cfg = RunConfig::load(&snapshot).unwrap();
    assert_eq!(cfg.train.seed, 3);
    assert!(!cfg.train.use_offset);
    assert_eq!(cfg.train.model.backbone.name, "tiny");
}

#[test]
fn infer_emits_32_unique_ids_in_source_pixels() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("model");
    quick_train(&model, &[]);
    let input = dir.path().join("input");
    fs::create_dir_all(&input).unwrap();
    GrayImage::new(384, 256).save(input.join("black.png")).unwrap();
    fs::copy(dataset().join("images/scene_00000.png"), input.join("scene.png")).unwrap();
    let out = dir.path().join("out");
    ok(&["--out", p(&out), "infer", "--model", p(&model), "--input", p(&input)]);
    for stem in ["black", "scene"] {
        let doc = read_annotation(&out.join(format!("predictions/{stem}.json"))).unwrap();
        assert!(doc.predicted);
        let mut ids: Vec<u32> = doc.teeth.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (1..=32).collect::<Vec<_>>());
        assert!(out.join(format!("overlays/{stem}.png")).exists());
    }
    let overlay = image::open(out.join("overlays/black.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (384, 256));
    let boxes = fs::read_to_string(out.join("boxes.csv")).unwrap();
    assert_eq!(boxes.lines().count(), 1 + 64);
    // the half-size source halves every coordinate
    let black: Vec<f64> = boxes.lines().filter(|l| l.starts_with("black,")).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    let doc = read_annotation(&out.join("predictions/black.json")).unwrap();
    for (w, t) in black.iter().zip(&doc.teeth) {
        assert!((w * 2.0 - t.w).abs() < 1e-9);
    }
}
