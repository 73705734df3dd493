mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{model_dir, sample_images, validate};
use exemplar_core::checkpoint::Checkpoint;
use exemplar_core::progressive::stage_file_name;
use serde_json::Value;

fn exemplar(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_exemplar"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn summary(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        vec![],
        vec!["frobnicate"],
        vec!["explain", "--bogus-flag"],
        vec!["evaluate", "--metric", "accuracy-ish"],
        vec!["train-pgaae", "--plan", "7x28"],
        vec!["train-pgaae", "--plan", "7:20", "--out", "/nonexistent/never"],
        vec!["--config", "/no/such/config.toml", "evaluate", "--metric", "rmse"],
    ] {
        let out = exemplar(&args, &[]);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = exemplar(
        &[
            "explain",
            "--image",
            s(&dir.path().join("missing.png")),
            "--model-dir",
            s(model_dir()),
            "--out",
            s(&dir.path().join("e.json")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = exemplar(&["evaluate", "--metric", "rmse", "--model-dir", s(dir.path())], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_reads_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let perfect = dir.path().join("perfect.csv");
    std::fs::write(&perfect, "truth,prediction\nNV,NV\nBCC,BCC\nMEL,MEL\nNV,NV\n").unwrap();
    let out = exemplar(&["evaluate", "--metric", "balanced-accuracy", "--predictions", s(&perfect)], &[]);
    let v = summary(&out);
    assert_eq!(v["metric"], "balanced-accuracy");
    assert_eq!(v["value"], 1.0);
    assert_eq!(v["count"], 4);

    // Columns in any order; a constant predictor over four classes scores 1/4.
    let constant = dir.path().join("constant.csv");
    std::fs::write(&constant, "prediction,truth\nA,A\nA,B\nA,C\nA,D\nA,D\n").unwrap();
    let v = summary(&exemplar(&["evaluate", "--metric", "balanced-accuracy", "--predictions", s(&constant)], &[]));
    assert_eq!(v["value"], 0.25);
}

#[test]
fn train_pgaae_writes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m1");
    let v = summary(&exemplar(
        &["train-pgaae", "--plan", "7:28", "--out", s(&out), "--images", "48", "--epochs", "1", "--latent-dim", "4"],
        &[("EXEMPLAR_DESK__PROGRESSIVE__EVAL_IMAGES", "8")],
    ));
    let stages = v["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 3);
    for (i, res) in [7usize, 14, 28].into_iter().enumerate() {
        let path = out.join("stages").join(stage_file_name(i + 1, res));
        let c = Checkpoint::load(&path).unwrap();
        assert_eq!(c.kind(), Some("aae"));
        assert_eq!(c.meta["stage_index"], i + 1);
        assert_eq!(c.meta["resolution"], res);
        assert_eq!(stages[i]["resolution"], res);
    }
    assert!(out.join("aae.safetensors").is_file());

    let v = summary(&exemplar(
        &["evaluate", "--metric", "rmse", "--model-dir", s(&out)],
        &[("EXEMPLAR_DESK__IMAGES", "40")],
    ));
    assert_eq!(v["count"], 8);
    assert!(v["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn train_classifier_takes_environment_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("settings.toml");
    std::fs::write(&cfg, "[desk]\nimages = 200\n\n[desk.classifier]\nresolution = 8\nfilters = [4]\n").unwrap();
    let out = dir.path().join("m");
    let v = summary(&exemplar(
        &["--config", s(&cfg), "train-classifier", "--out", s(&out), "--epochs", "1"],
        &[("EXEMPLAR_DESK__IMAGES", "60")],
    ));
    assert_eq!(v["train_images"].as_u64().unwrap() + v["val_images"].as_u64().unwrap(), 60);
    let c = Checkpoint::load(&out.join("classifier.safetensors")).unwrap();
    assert_eq!(c.meta["spec"]["resolution"], 8);
    let v = summary(&exemplar(
        &["--config", s(&cfg), "evaluate", "--metric", "balanced-accuracy", "--model-dir", s(&out)],
        &[],
    ));
    assert_eq!(v["count"], 40);
    assert!((0.0..=1.0).contains(&v["value"].as_f64().unwrap()));
}

#[test]
fn explain_writes_a_schema_valid_reproducible_file() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("f.png");
    std::fs::write(&image, sample_images(8)[7].to_png_bytes().unwrap()).unwrap();
    let run = |out: &Path| {
        summary(&exemplar(
            &["explain", "--image", s(&image), "--model-dir", s(model_dir()), "--seed", "7", "--out", s(out)],
            &[],
        ))
    };
    let a = dir.path().join("a/exp.json");
    let b = dir.path().join("b/exp.json");
    let v = run(&a);
    run(&b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let record: Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    let errs = validate("explanation.json", &record);
    assert!(errs.is_empty(), "{errs:?}");
    assert_eq!(record["seeds"]["explain"], 7);
    assert_eq!(v["status"], record["status"]);
    assert_eq!(v["exemplars"], record["exemplars"].as_array().unwrap().len());
    let root = a.parent().unwrap();
    assert!(root.join(record["input"].as_str().unwrap()).is_file());
    for r in record["exemplars"].as_array().unwrap() {
        assert!(root.join(r.as_str().unwrap()).is_file());
    }

    let report = dir.path().join("report.html");
    let v = summary(&exemplar(&["export-report", "--explanation", s(&a), "--out", s(&report)], &[]));
    assert_eq!(v["out"], s(&report));
    let html = std::fs::read_to_string(&report).unwrap();
    assert!(html.contains(record["label"]["code"].as_str().unwrap()));
    assert!(html.contains("data:image/png;base64,"));
    assert!(!html.contains("missing artifacts/"));
}

#[test]
fn explain_settings_come_from_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("f.png");
    std::fs::write(&image, sample_images(8)[7].to_png_bytes().unwrap()).unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[explain]\nexemplars = 1\n").unwrap();
    let out = dir.path().join("e.json");
    let v = summary(&exemplar(
        &["--config", s(&cfg), "explain", "--image", s(&image), "--model-dir", s(model_dir()), "--out", s(&out)],
        &[],
    ));
    assert!(v["exemplars"].as_u64().unwrap() <= 1);
}
