use std::path::Path;
use std::process::{Command, Output};

fn a4unet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a4unet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("A4UNET_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn help_documents_the_commands() {
    let dir = tempfile::tempdir().unwrap();
    let o = a4unet(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = text(&o);
    for cmd in ["scan", "train", "eval", "predict", "ablate", "describe", "synth"] {
        assert!(s.contains(cmd), "{cmd} missing from help");
    }
    let o = a4unet(&["train", "--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = text(&o);
    for flag in ["--data-root", "--manifest", "--epochs", "--lr", "--batch-size", "--no-dlka", "--resume", "--config"] {
        assert!(s.contains(flag), "{flag} missing from train help");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(a4unet(&["train", "--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(a4unet(&["describe", "--input-size", "100"], dir.path()).status.code(), Some(1));
    let o = a4unet(&["scan"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("--data-root"));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = a4unet(&["scan", "--data-root", dir.path().to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("no subjects found"));
    let o = a4unet(
        &["predict", "--checkpoint", "missing.safetensors", "--input", "."],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("missing.safetensors"));
}

#[test]
fn describe_reports_stages() {
    let dir = tempfile::tempdir().unwrap();
    let o = a4unet(&["describe", "--preset", "tiny", "--json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["input_shape"], serde_json::json!([1, 4, 32, 32]));
    assert_eq!(v["label"], "A4-Unet");
    let o = a4unet(&["describe", "--preset", "tiny", "--no-sspp", "--no-cam", "--no-dlka"], dir.path());
    assert!(text(&o).contains("ResUnet (baseline)"));
}

#[test]
fn synth_scan_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let ok = |args: &[&str]| {
        let o = a4unet(args, cwd);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", text(&o));
        text(&o)
    };
    ok(&["synth", "--out", "data", "--subjects", "4", "--shape", "20,20,3", "--seed", "1"]);
    let s = ok(&["scan", "--data-root", "data", "--out", "manifest.jsonl", "--train-frac", "0.5", "--val-frac", "0.5"]);
    assert!(s.contains("4 subjects, 12 slices (2 train / 2 val / 0 test)"), "{s}");

    let train = [
        "train", "--manifest", "manifest.jsonl", "--preset", "tiny", "--epochs", "2", "--batch-size", "4", "--lr", "1e-3",
        "--runs", "1", "--out-dir", "run",
    ];
    let s = ok(&train);
    assert!(s.contains("run 0: 2 epochs"), "{s}");
    assert!(cwd.join("run/last.safetensors").is_file());

    ok(&[
        "eval", "--manifest", "manifest.jsonl", "--checkpoint", "run/last.safetensors", "--report", "report.txt",
    ]);
    let report = std::fs::read_to_string(cwd.join("report.txt")).unwrap();
    assert!(report.contains("[aggregate]") && report.contains("dsc = "), "{report}");

    let o = a4unet(
        &["eval", "--manifest", "manifest.jsonl", "--checkpoint", "run/last.safetensors", "--preset", "default"],
        cwd,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("model.input_size"), "{}", text(&o));

    let s = ok(&[
        "predict", "--checkpoint", "run/last.safetensors", "--input", "data/BraTS20_Training_001", "--out-dir", "pred",
        "--slice", "1", "--overlay",
    ]);
    assert!(s.contains("1 mask(s), 1 overlay(s)"), "{s}");
    let s = ok(&[
        "predict", "--checkpoint", "run/last.safetensors", "--input", "data/BraTS20_Training_001", "--out-dir", "vol",
    ]);
    assert!(s.contains("3 mask(s)"), "{s}");
    assert!(cwd.join("vol/BraTS20_Training_001_pred.nii.gz").is_file());
}
