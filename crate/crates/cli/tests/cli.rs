use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_tyrist");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).expect("error line is JSON")
}

const SMALL_MODEL: &str =
    "stem_stride = 1\nwidth_multiple = 0.25\nactive_heads = P2, P3\npan_mode = partial\nca_blocks_on_p2 = 1\n";

/// Synthesizes a small dataset and trains one epoch on it.
fn trained(dir: &Path) {
    ok(
        dir,
        &[
            "synth",
            "--out",
            "data",
            "--seed",
            "5",
            "--train_count",
            "8",
            "--val_count",
            "4",
        ],
    );
    fs::write(dir.join("model.cfg"), SMALL_MODEL).unwrap();
    ok(
        dir,
        &[
            "train",
            "--model-config",
            "model.cfg",
            "--data",
            "data",
            "--out",
            "run",
            "--epochs",
            "1",
            "--lr",
            "1e-3",
        ],
    );
}

#[test]
fn landscape_matches_hand_computed_iou() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &[
            "landscape",
            "--gt",
            "10,10,4,4",
            "--offsets",
            "0,1,2,3",
            "--kind",
            "iou",
            "--out",
            "land",
        ],
    );
    let csv = fs::read_to_string(tmp.path().join("land/landscape.csv")).unwrap();
    let value = |dx: &str, dy: &str| -> f64 {
        csv.lines()
            .find_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0] == dx && f[1] == dy).then(|| f[2].parse().unwrap())
            })
            .unwrap()
    };
    assert_eq!(csv.lines().count(), 17);
    assert!((value("0", "0") - 1.0).abs() < 1e-12);
    assert!((value("1", "1") - 9.0 / 23.0).abs() < 1e-12);
    assert!((value("2", "2") - 4.0 / 28.0).abs() < 1e-12);
    assert!(tmp.path().join("land/manifest.json").exists());
}

#[test]
fn stride_one_stem_costs_four_times_the_flops() {
    let tmp = tempfile::tempdir().unwrap();
    let base = "active_heads = P3, P4, P5\nenable_p2_head = false\nca_blocks_on_p2 = 0\n";
    fs::write(tmp.path().join("s1.cfg"), format!("stem_stride = 1\n{base}")).unwrap();
    fs::write(tmp.path().join("s2.cfg"), format!("stem_stride = 2\n{base}")).unwrap();
    ok(
        tmp.path(),
        &[
            "flops",
            "--model-config",
            "s1.cfg",
            "--compare",
            "s2.cfg",
            "--input-size",
            "128",
            "--out",
            "f",
        ],
    );
    let report = json(&tmp.path().join("f/flops.json"));
    let ratio = report["ratio"].as_f64().unwrap();
    assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    assert_eq!(report["model"]["params"], report["compare"]["params"]);
}

#[test]
fn trim_then_eval_matches_eval_restricted_to_p2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    let out = ok(
        d,
        &[
            "trim",
            "--checkpoint",
            "run/checkpoint.tyrk",
            "--keep-heads",
            "P2",
            "--out",
            "trimmed",
            "--input-size",
            "128",
        ],
    );
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["after"]["flops"].as_u64() < report["before"]["flops"].as_u64());
    assert!(report["after"]["params"].as_u64() < report["before"]["params"].as_u64());
    assert_eq!(report["after"]["heads"], "P2");

    ok(
        d,
        &[
            "eval",
            "--checkpoint",
            "trimmed/trimmed.tyrk",
            "--data",
            "data",
            "--out",
            "e_trim",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.tyrk",
            "--data",
            "data",
            "--heads",
            "P2",
            "--out",
            "e_p2",
        ],
    );
    for f in ["detections.csv", "eval.json", "pr.csv"] {
        assert_eq!(
            fs::read(d.join("e_trim").join(f)).unwrap(),
            fs::read(d.join("e_p2").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn train_writes_history_config_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    let history = fs::read_to_string(d.join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    let rec: Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert!(rec["loss_total"].as_f64().unwrap().is_finite());
    // the flag overrode the default
    assert!(fs::read_to_string(d.join("run/train.cfg"))
        .unwrap()
        .contains("epochs = 1"));

    let m = json(&d.join("run/manifest.json"));
    assert_eq!(m["command"], "train");
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
    assert!(m["config"]["model"].as_str().unwrap().contains("stem_stride = 1"));
}

#[test]
fn flags_override_config_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("ds.cfg"),
        "train_count = 5\nval_count = 2\nimage_size = 64\nsize_min = 2\nsize_max = 2\n",
    )
    .unwrap();
    ok(d, &["synth", "--config", "ds.cfg", "--val_count", "3", "--out", "a"]);
    let count = |p: &str| fs::read_dir(d.join(p)).unwrap().count();
    assert_eq!(count("a/train/images"), 5);
    assert_eq!(count("a/val/images"), 3);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b", "c"] {
        let seed = if out == "c" { "8" } else { "7" };
        ok(
            d,
            &[
                "synth",
                "--out",
                out,
                "--seed",
                seed,
                "--train_count",
                "3",
                "--val_count",
                "1",
            ],
        );
    }
    let hash = |p: &str| json(&d.join(p).join("manifest.json"))["outputs"].clone();
    assert_eq!(hash("a").as_array().unwrap().len(), 3);
    let labels = |p: &str| fs::read(d.join(p).join("train/labels/000000.txt")).unwrap();
    let image = |p: &str| fs::read(d.join(p).join("train/images/000000.pgm")).unwrap();
    assert_eq!(labels("a"), labels("b"));
    assert_eq!(image("a"), image("b"));
    assert_ne!(image("a"), image("c"));
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let out = run(
        d,
        &[
            "eval",
            "--checkpoint",
            "missing.tyrk",
            "--data",
            "nowhere",
            "--out",
            "x",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["class"], "missing_file");

    fs::write(d.join("bad.cfg"), "stem_stride = 3\n").unwrap();
    let out = run(d, &["flops", "--model-config", "bad.cfg", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["class"], "config");

    fs::write(d.join("garbled.cfg"), "this is not a config\n").unwrap();
    let out = run(d, &["synth", "--config", "garbled.cfg", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("garbled.cfg:1"));

    fs::write(d.join("junk.tyrk"), b"not a checkpoint").unwrap();
    let out = run(
        d,
        &["trim", "--checkpoint", "junk.tyrk", "--keep-heads", "P2", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(3));

    ok(d, &["synth", "--out", "data", "--train_count", "4", "--val_count", "0"]);
    fs::write(d.join("model.cfg"), SMALL_MODEL).unwrap();
    let out = run(
        d,
        &[
            "train",
            "--model-config",
            "model.cfg",
            "--data",
            "data",
            "--out",
            "nan",
            "--epochs",
            "3",
            "--lr",
            "1e30",
            "--batch_size",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
    let err = error_line(&out);
    assert_eq!(err["class"], "runtime");
    assert!(err["message"].as_str().unwrap().contains("first non-finite layer"));
}
