use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "data.count=20",
    "data.frames=4",
    "net.width=8",
    "net.layers=1",
    "net.hidden=16",
    "teacher.epochs=1",
    "teacher.sample_steps=4",
    "distill.steps=2",
    "distill.batch=2",
    "distill.eval_every=1",
    "grpo.iterations=1",
    "grpo.group=2",
    "grpo.groups_per_iter=1",
    "grpo.eval_every=1",
    "grpo.task=all",
    "latency.runs=2",
    "latency.warmup=1",
];

fn dragflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dragflow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dragflow(args);
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tiny(cmd: &[&str], run: &Path) -> Vec<String> {
    let mut v: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
    v.extend(["--run-dir".into(), run.display().to_string()]);
    for s in TINY {
        v.extend(["--set".into(), s.to_string()]);
    }
    v
}

fn run_tiny(cmd: &[&str], run: &Path) -> Output {
    let args = tiny(cmd, run);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn report(run: &Path) -> Value {
    let text = std::fs::read_to_string(run.join("report.jsonl")).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    for out in [&a, &b] {
        let run = dir.path().join(out.file_stem().unwrap());
        ok(&["gen-data", "--count", "100", "--seed", "7", "--frames", "5", "--out", out.to_str().unwrap(), "--run-dir", run.to_str().unwrap()]);
        assert!(run.join("config.txt").exists() && run.join("summary.txt").exists());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let index: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.bin.index.json")).unwrap()).unwrap();
    assert_eq!(index["count"], 100);
}

#[test]
fn default_run_directory_is_named_by_time_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let set = format!("runs_dir={}", runs.display());
    ok(&["gen-data", "--count", "10", "--seed", "3", "--set", &set]);
    let names: Vec<String> = std::fs::read_dir(&runs).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.len(), 1);
    assert!(names[0].ends_with("-s3"), "{}", names[0]);
    assert!(runs.join(&names[0]).join("data.bin").exists());
}

#[test]
fn unknown_keys_and_missing_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 1\nteacher.epoch = 3\n").unwrap();
    let out = dragflow(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher.epoch"));

    let out = dragflow(&["gen-data", "--set", "net.sides=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("net.sides"));

    let run = dir.path().join("r");
    let missing = dir.path().join("nowhere.ckpt");
    let out = dragflow(&["eval", "--checkpoint", missing.to_str().unwrap(), "--run-dir", run.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.ckpt"));
}

#[test]
fn every_subcommand_runs_on_a_tiny_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| -> PathBuf { dir.path().join(n) };
    let s = |p: &PathBuf| p.display().to_string();

    run_tiny(&["gen-data", "--out", &s(&d("data.bin"))], &d("data"));
    let data = s(&d("data.bin"));

    run_tiny(&["train-teacher", "--data", &data], &d("teacher"));
    let teacher = d("teacher").join("teacher.ckpt");
    assert!(teacher.exists());
    assert!(report(&d("teacher"))["eval"]["rmse_cells"].as_f64().unwrap().is_finite());
    let log = std::fs::read_to_string(d("teacher").join("log.jsonl")).unwrap();
    assert!(log.lines().count() > 1);

    // same seed, same checkpoint
    run_tiny(&["train-teacher", "--data", &data], &d("teacher2"));
    assert_eq!(std::fs::read(&teacher).unwrap(), std::fs::read(d("teacher2").join("teacher.ckpt")).unwrap());

    run_tiny(&["distill", "--teacher", &s(&teacher), "--data", &data], &d("dmd"));
    run_tiny(&["distill", "--teacher", &s(&teacher), "--data", &data, "--objective", "teacher-forcing"], &d("tf"));
    let student = d("dmd").join("student-dmd.ckpt");
    let forced = d("tf").join("student-teacher-forcing.ckpt");
    assert!(student.exists() && forced.exists());

    // eval of a student before any RL: finite metrics
    run_tiny(&["eval", "--checkpoint", &s(&student), "--data", &data], &d("eval"));
    let eval = report(&d("eval"))["eval"].clone();
    for k in ["mean_reward", "mean_motion_reward", "rmse_cells", "smoothness", "frame_ms"] {
        assert!(eval[k].as_f64().unwrap().is_finite(), "{k}");
    }
    run_tiny(&["eval", "--checkpoint", &s(&student), "--data", &data], &d("eval2"));
    let again = report(&d("eval2"))["eval"].clone();
    for k in ["mean_reward", "mean_motion_reward", "rmse_cells", "smoothness"] {
        assert_eq!(eval[k], again[k], "{k}");
    }

    run_tiny(&["grpo", "--student", &s(&student), "--data", &data], &d("grpo"));
    let policy = d("grpo").join("policy.ckpt");
    assert!(policy.exists());

    run_tiny(
        &["ablate", "--full", &s(&policy), "--without-rl", &s(&student), "--without-self-rollout", &s(&forced), "--teacher", &s(&teacher), "--data", &data],
        &d("ablate"),
    );
    let rows = report(&d("ablate"))["rows"].as_array().unwrap().clone();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "w/o RL", "w/o Self-Rollout", "teacher"]);

    let out = run_tiny(&["bench-latency", "--student", &s(&student), "--teacher", &s(&teacher), "--data", &data], &d("latency"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("first-frame latency"));
    let r = report(&d("latency"));
    assert_eq!(r["reports"][0]["first_frame_evals"], 3);
    assert_eq!(r["reports"][1]["first_frame_evals"], 4 * 5);

    run_tiny(&["generate", "--checkpoint", &s(&student), "--points", "0.2,0.2;0.3,0.25;0.4,0.3"], &d("gen"));
    let video: Value = serde_json::from_str(&std::fs::read_to_string(d("gen").join("video.json")).unwrap()).unwrap();
    assert_eq!(video.as_array().unwrap().len(), 3);
}
