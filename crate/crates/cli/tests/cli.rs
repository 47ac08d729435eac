use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use msml::dataset::{self, Fold};
use msml::experiment;
use msml::metrics::build_report;
use msml::model::{ensemble_fuse, load_checkpoint, lr_schedule, Head, DEFAULT_LEARNING_RATE};

fn msml(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msml"))
        .args(args)
        .current_dir(cwd)
        .env("MSML_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small dataset plus a one-epoch config in a fresh directory.
fn smoke_setup(epochs: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.conf"),
        "num_samples = 64\nnum_groups = 16\nseed = 5\n",
    )
    .unwrap();
    let out = msml(&["gen-data", "--spec", "spec.conf", "--out", "data"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = format!(r#"{{"data_dir": "data", "out_dir": "run", "epochs": {epochs}, "seed": 2}}"#);
    fs::write(dir.path().join("config.json"), cfg).unwrap();
    dir
}

fn train(dir: &Path, config: &str) -> Output {
    msml(&["train", "--config", config], dir)
}

#[test]
fn gen_data_writes_files_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.conf"), "# defaults otherwise\nseed = 11\n").unwrap();
    for out in ["a", "b"] {
        let o = msml(&["gen-data", "--spec", "spec.conf", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in [
        "images.bin",
        "labels.csv",
        "splits.csv",
        "manifest.json",
        "generator.conf",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    let expected = dataset::GeneratorSpec {
        seed: 11,
        ..Default::default()
    };
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["generator"], serde_json::to_value(&expected).unwrap());
    let resolved = fs::read_to_string(dir.path().join("a/generator.conf")).unwrap();
    assert_eq!(dataset::parse_generator_spec(&resolved).unwrap(), expected);
}

#[test]
fn invalid_spec_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.conf"),
        "seed = 1\nclass_prevalence = 0.2, 1.5, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1\n",
    )
    .unwrap();
    let o = msml(&["gen-data", "--spec", "spec.conf", "--out", "data"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn smoke_training_run() {
    let dir = smoke_setup(1);
    let start = Instant::now();
    let o = train(dir.path(), "config.json");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    let history = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert!(dir.path().join("run/checkpoint.bin").exists());
    let resolved: experiment::ExperimentConfig =
        serde_json::from_slice(&fs::read(dir.path().join("run/config.json")).unwrap()).unwrap();
    assert_eq!(resolved.epochs, 1);
    assert_eq!(resolved.seed, 2);
}

#[test]
fn history_lr_column_follows_schedule() {
    let dir = smoke_setup(4);
    let o = train(dir.path(), "config.json");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (epoch, row) in rows.iter().enumerate() {
        let lr: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(lr, lr_schedule(DEFAULT_LEARNING_RATE, epoch));
    }
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("config.json"),
        r#"{"data_dir": "nowhere", "out_dir": "run", "epochs": 1}"#,
    )
    .unwrap();
    assert_eq!(code(&train(dir.path(), "config.json")), 2);
    fs::write(dir.path().join("bad.json"), r#"{"epochz": 1}"#).unwrap();
    assert_eq!(code(&train(dir.path(), "bad.json")), 2);
}

#[test]
fn diverging_training_exits_3_with_epoch_and_step() {
    let dir = smoke_setup(1);
    let cfg = r#"{"data_dir": "data", "out_dir": "run", "epochs": 1, "learning_rate": 1e200}"#;
    fs::write(dir.path().join("nan.json"), cfg).unwrap();
    let o = train(dir.path(), "nan.json");
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 0, step"), "{}", stderr(&o));
}

fn eval(dir: &Path, head: &str, out: &str) -> Output {
    msml(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "data",
            "--split",
            "test",
            "--head",
            head,
            "--out",
            out,
        ],
        dir,
    )
}

#[test]
fn eval_is_reproducible_and_matches_recomputation() {
    let dir = smoke_setup(1);
    assert_eq!(code(&train(dir.path(), "config.json")), 0);
    for (head, out) in [
        ("fused", "a.json"),
        ("fused", "b.json"),
        ("ce", "ce.json"),
        ("fce", "fce.json"),
    ] {
        let o = eval(dir.path(), head, out);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.json")).unwrap());
    assert!(dir.path().join("a.config.json").exists());

    // Recompute the fused report from the library: mean of CE and FCE probabilities.
    let ckpt = load_checkpoint(&dir.path().join("run/checkpoint.bin")).unwrap();
    let data_dir = dir.path().join("data");
    let samples = dataset::load(&data_dir).unwrap();
    let splits = dataset::read_splits(&data_dir).unwrap();
    let mut test: Vec<_> = splits.take(Fold::Test, &samples).into_iter().cloned().collect();
    ckpt.norm.apply_all(&mut test).unwrap();
    let probs = |h| experiment::score(&ckpt.model, &test, h).unwrap();
    let rows = |sm: &msml::metrics::ScoreMatrix| {
        (0..sm.num_samples())
            .map(|i| (0..sm.num_classes()).map(|c| sm.score(i, c)).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    let fused = ensemble_fuse(&[rows(&probs(Head::Ce)), rows(&probs(Head::Fce))]).unwrap();
    let expected = build_report(&experiment::score_matrix(fused, &test).unwrap()).to_json();
    assert_eq!(String::from_utf8(a).unwrap(), expected);
}

#[test]
fn invalid_head_exits_2() {
    let dir = smoke_setup(1);
    assert_eq!(code(&train(dir.path(), "config.json")), 0);
    assert_eq!(code(&eval(dir.path(), "softmax", "r.json")), 2);
}

#[test]
fn identical_configs_give_identical_bytes() {
    let dir = smoke_setup(2);
    let mut ckpts = Vec::new();
    let mut reports = Vec::new();
    for run in ["r1", "r2"] {
        let cfg = format!(r#"{{"data_dir": "data", "out_dir": "{run}", "epochs": 2, "seed": 9}}"#);
        fs::write(dir.path().join(format!("{run}.json")), cfg).unwrap();
        assert_eq!(code(&train(dir.path(), &format!("{run}.json"))), 0);
        let ckpt = format!("{run}/checkpoint.bin");
        let report = format!("{run}/report.json");
        let o = msml(
            &[
                "eval",
                "--checkpoint",
                &ckpt,
                "--data",
                "data",
                "--head",
                "fce",
                "--out",
                &report,
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        ckpts.push(fs::read(dir.path().join(ckpt)).unwrap());
        reports.push(fs::read(dir.path().join(report)).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn gradcheck_scopes_pass_and_mutation_is_caught() {
    for scope in ["layers", "losses", "bilinear", "model"] {
        let start = Instant::now();
        let o = msml(&["gradcheck", "--scope", scope], &std::env::temp_dir());
        assert_eq!(code(&o), 0, "{scope}: {}", String::from_utf8_lossy(&o.stdout));
        assert!(start.elapsed() < Duration::from_secs(120));
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert!(stdout.contains("rel_err"));
    }
    let o = msml(
        &["gradcheck", "--scope", "losses", "--perturb", "1e-3"],
        &std::env::temp_dir(),
    );
    assert_eq!(code(&o), 1);
    assert_eq!(
        code(&msml(&["gradcheck", "--scope", "everything"], &std::env::temp_dir())),
        2
    );
}
