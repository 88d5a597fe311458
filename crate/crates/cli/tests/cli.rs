use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cipo-lab"))
        .args(args)
        .output()
        .expect("spawn cipo-lab")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

const SMALL: &str = "prompts = 30\nbatch_prompts = 6\nsteps = 6\neval_samples = 8\neval_k = [1, 4, 8]\n";

#[test]
fn run_eval_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let run_dir = tmp.path().join("run");
    let run = run_dir.to_str().unwrap();

    let out = lab(&["run", "--config", &config, "--preset", "cipo", "--seed", "4", "--out", run]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.toml", "bank.txt", "metrics.jsonl", "metrics.csv", "timings.csv", "params.txt", "eval.json", "replay.jsonl"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);

    let params = run_dir.join("params.txt");
    let out = lab(&["eval", "--checkpoint", params.to_str().unwrap(), "--k", "1,4", "--samples", "8"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["pass1"].as_f64().is_some());
    assert_eq!(report["pass_at_k"].as_array().unwrap().len(), 2);

    let export = tmp.path().join("corrections.jsonl");
    let out = lab(&["export-corrections", "--run", run, "--step", "3", "--out", export.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&export).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let prompt = record["prompt"].as_str().unwrap();
        assert!(prompt.contains("correctness unknown"));
        assert!(prompt.contains("<candidate_solution>") && prompt.contains("</candidate_solution>"));
        assert!(record["metadata"]["verdict"].is_u64());
    }

    // step 1 of a lagged run replays nothing
    let out = lab(&["export-corrections", "--run", run, "--step", "1", "--out", export.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn sweep_writes_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("sweep");
    let out = lab(&[
        "sweep", "--config", &config, "--seeds", "2", "--presets", "grpo,cipo",
        "--out", out_dir.to_str().unwrap(), "--sequential",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out_dir.join("comparison.md").exists());
    assert!(out_dir.join("cipo").join("seed-1").join("metrics.jsonl").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("| grpo |"));
}

#[test]
fn configuration_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out_dir = out_dir.to_str().unwrap();

    let unknown = write_config(tmp.path(), "steps = 5\nlearning_rat = 0.1\n");
    let out = lab(&["run", "--config", &unknown, "--out", out_dir]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let invalid = write_config(tmp.path(), "rho0 = 0.95\n");
    let out = lab(&["run", "--config", &invalid, "--out", out_dir]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rho0"));

    assert_eq!(code(&lab(&["run", "--preset", "ppo", "--out", out_dir])), 1);
    assert_eq!(code(&lab(&["run"])), 1);
    assert_eq!(code(&lab(&["frobnicate"])), 1);
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&lab(&["run", "--config", missing.to_str().unwrap(), "--out", out_dir])), 1);
    assert_eq!(code(&lab(&["--help"])), 0);
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &format!("{SMALL}learning_rate = 1e308\n"));
    let run_dir = tmp.path().join("run");
    let out = lab(&["run", "--config", &config, "--out", run_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("divergence.json").exists());
}
