use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surfmetric"))
        .args(args)
        .output()
        .expect("spawn surfmetric")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn class_dirs(root: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

/// One 96-pixel class: 2 train images (1 for training, 1 for the prototype),
/// 2 good and 2 defective test images.
fn small_dataset(dir: &Path, seed: &str) {
    ok(&run(&[
        "synth",
        "--out",
        s(dir),
        "--seed",
        seed,
        "--classes",
        "1",
        "--side",
        "96",
        "--train-good",
        "2",
        "--test-good",
        "2",
        "--defects-per-type",
        "2",
        "--defect-kinds",
        "blob",
    ]));
}

#[test]
fn synth_is_deterministic_and_refuses_a_non_empty_directory() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_dataset(&a, "4");
    small_dataset(&b, "4");
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 2 + 2 + 2 * 2);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }

    let again = run(&["synth", "--out", s(&a), "--classes", "1", "--side", "96"]);
    assert_eq!(again.status.code(), Some(1));
    assert_eq!(files(&a), fa);
}

#[test]
fn unknown_config_key_is_a_usage_error_before_any_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "epochs = 2\nlearning_rate = 0.1\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "index",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--data",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!out_dir.exists());
}

#[test]
fn missing_dataset_and_bad_arguments_exit_with_usage_code() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["index", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn unreadable_dataset_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "index",
        "--data",
        s(&tmp.path().join("does-not-exist")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_without_checkpoints_fails_before_writing() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "1");
    let out_dir = tmp.path().join("eval");
    let out = run(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoints",
        s(&tmp.path().join("none")),
        "--out",
        s(&out_dir),
        "--repetitions",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
    assert!(!out_dir.exists());
}

#[test]
fn zero_epoch_training_is_reproducible_and_writes_an_empty_history() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "2");
    let train = |dir: &Path| {
        ok(&run(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(dir),
            "--seed",
            "9",
            "--epochs",
            "0",
            "--repetitions",
            "2",
            "--target-side",
            "96",
        ]));
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&a);
    train(&b);
    for name in ["rep0.ckpt", "rep1.ckpt", "index.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_ne!(
        fs::read(a.join("rep0.ckpt")).unwrap(),
        fs::read(a.join("rep1.ckpt")).unwrap()
    );
    let loss = fs::read_to_string(a.join("rep0_loss.csv")).unwrap();
    assert_eq!(loss.trim(), "epoch,mean_loss,triplets,batches");
}

#[test]
fn train_eval_score_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "3");
    let class = class_dirs(&data).remove(0);
    let run_dir = tmp.path().join("run");
    let common = ["--seed", "5", "--threads", "1", "--target-side", "96"];

    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run_dir),
        "--epochs",
        "1",
        "--batch",
        "4",
        "--repetitions",
        "1",
    ];
    args.extend(common);
    ok(&run(&args));
    let loss = fs::read_to_string(run_dir.join("rep0_loss.csv")).unwrap();
    let rows: Vec<&str> = loss.lines().collect();
    assert_eq!(rows.len(), 2);
    // One training image at one scale gives 8 patches, so 8 triplets in 2 batches.
    assert!(
        rows[1].starts_with("1,") && rows[1].ends_with(",8,2"),
        "{}",
        rows[1]
    );

    let mut args = vec![
        "eval",
        "--data",
        s(&data),
        "--out",
        s(&run_dir),
        "--repetitions",
        "1",
        "--heatmaps",
    ];
    args.extend(common);
    ok(&run(&args));
    let report = fs::read_to_string(run_dir.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("class,defect_type,repetition,auc"));
    let cell = lines.next().unwrap();
    assert!(cell.starts_with(&format!("{class},blob,0,")), "{cell}");
    let auc: f64 = cell.rsplit(',').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(report.contains("ALL,ALL,mean_of_class_means,"));

    let scores = fs::read_to_string(run_dir.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 4);
    let heatmaps = files(&run_dir.join("heatmaps"));
    assert_eq!(
        heatmaps
            .iter()
            .filter(|p| p.extension().unwrap() == "png")
            .count(),
        4
    );
    assert_eq!(
        heatmaps
            .iter()
            .filter(|p| p.extension().unwrap() == "txt")
            .count(),
        4
    );

    // The prototype was built from the one reserved image, so scoring it gives ~0.
    let index: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("index.json")).unwrap()).unwrap();
    let proto_img = index["classes"][0]["prototype_good"][0]
        .as_str()
        .unwrap()
        .to_string();
    let proto = run_dir
        .join("prototypes/rep0")
        .join(format!("{class}.proto"));
    let ckpt = run_dir.join("rep0.ckpt");
    let score_dir = tmp.path().join("score");
    let mut args = vec![
        "score",
        "--checkpoint",
        s(&ckpt),
        "--prototype",
        s(&proto),
        "--image",
        proto_img.as_str(),
        "--out",
        s(&score_dir),
    ];
    args.extend(common);
    let out = run(&args);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(v.len(), 2);
    assert!(v[0] <= v[1] && v[1] < 1e-3, "{v:?}");
    let stem = Path::new(&proto_img).file_stem().unwrap().to_string_lossy();
    assert!(score_dir.join(format!("{stem}_heatmap.png")).is_file());
}
