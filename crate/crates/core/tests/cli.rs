use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aepoison"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawning the binary")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["gen", "--bogus"])), 1);
    assert_eq!(code(&run(&["poison", "--algo", "newton"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["gen", "--spec", "/nonexistent.json", "--out-dir", out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": 7, "waveform": "sine"}"#).unwrap();
    assert_eq!(code(&run(&["gen", "--spec", bad.to_str().unwrap(), "--out-dir", out])), 2);
    let missing = dir.path().join("missing.json");
    fs::write(&missing, r#"{"waveform": "sine"}"#).unwrap();
    assert_eq!(code(&run(&["gen", "--spec", missing.to_str().unwrap(), "--out-dir", out])), 2);
}

#[test]
fn generate_attack_train_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.to_str().unwrap();
    let cfg = configs();
    let c = |name: &str| cfg.join(name).to_str().unwrap().to_string();

    for seed in ["1", "2", "3"] {
        let name = format!("train{seed}.csv");
        let o = run(&["gen", "--spec", &c("signal.json"), "--seed", seed, "--output", &name, "--out-dir", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        code(&run(&["gen", "--spec", &c("signal.json"), "--seed", "9", "--clean", "--output", "test.csv", "--out-dir", out])),
        0
    );
    let test = d.join("test.csv");
    let o = run(&[
        "attack",
        "--series",
        test.to_str().unwrap(),
        "--spec",
        &c("attack.json"),
        "--signal",
        &c("signal.json"),
        "--out-dir",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let range: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("range.json")).unwrap()).unwrap();
    assert_eq!(range["end"].as_u64().unwrap() - range["start"].as_u64().unwrap(), 5);

    let mut args = vec!["train".to_string()];
    for s in ["train1.csv", "train2.csv", "train3.csv"] {
        args.push("--series".into());
        args.push(d.join(s).to_str().unwrap().into());
    }
    args.extend(["--config".into(), c("train.json"), "--out-dir".into(), out.into()]);
    let o = bin().args(&args).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let model = d.join("model.json");
    let score = |series: &Path, threshold: &str| {
        let o = run(&[
            "score",
            "--model",
            model.to_str().unwrap(),
            "--series",
            series.to_str().unwrap(),
            "--threshold",
            threshold,
            "--out-dir",
            out,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
        r["alert_count"].as_u64().unwrap()
    };
    assert_eq!(score(&test, "0.2"), 0);
    assert!(score(&d.join("attacked.csv"), "0.2") > 0);
    assert!(score(&test, "0.001") > 0);
}

#[test]
fn poison_writes_result_and_points() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let sc = configs().join("scenario_single.json");
    let o = run(&["poison", "--algo", "interp", "--scenario", sc.to_str().unwrap(), "--out-dir", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("success"));
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    assert_eq!(r["success"], true);
    let n = r["points"].as_array().unwrap().len();
    assert!(n > 0);
    assert!(dir.path().join(format!("dp_{:04}.csv", n - 1)).exists());
    assert!(!dir.path().join(format!("dp_{n:04}.csv")).exists());

    let both = run(&["poison", "--scenario", "a.json", "--problem", "b.json"]);
    assert_eq!(code(&both), 1);
    assert_eq!(code(&run(&["poison", "--out-dir", out])), 2);
}

#[test]
fn grid_exports_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let spec = dir.path().join("grid.json");
    fs::write(
        &spec,
        r#"{
  "schema_version": 1,
  "scenario": {"setting": "single-sequence", "period": 50, "eval_noise_std": 0.0,
               "learning_rate": 1.0, "train_iterations": 60, "stop_loss": 0.0001, "init_scale": 0.05},
  "axes": {"training_size": [4], "magnitude": [0.2, 0.3]}
}"#,
    )
    .unwrap();
    let args = ["grid", "--spec", spec.to_str().unwrap(), "--out-dir", out, "--workers", "2"];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(first.lines().count(), 3);
    let journal = fs::read_to_string(dir.path().join("journal.jsonl")).unwrap();

    // A second invocation finds everything in the journal.
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(fs::read_to_string(dir.path().join("journal.jsonl")).unwrap(), journal);
    assert_eq!(fs::read_to_string(dir.path().join("records.csv")).unwrap(), first);
}

#[test]
fn ingest_normalizes_selected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let input = dir.path().join("raw.csv");
    fs::write(&input, "time,a,b\n0,1,10\n1,2,20\n2,3,30\n").unwrap();
    let o = run(&["ingest", "--input", input.to_str().unwrap(), "--features", "b,a", "--out-dir", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let norm = fs::read_to_string(dir.path().join("normalized.csv")).unwrap();
    assert_eq!(norm.lines().count(), 4);
    assert!(dir.path().join("stats.json").exists());
    let o = run(&["ingest", "--input", input.to_str().unwrap(), "--features", "zzz", "--out-dir", out]);
    assert_eq!(code(&o), 2);
}
