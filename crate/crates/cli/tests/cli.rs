use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use std::io::Write;
use zerodesk::pipeline::RunConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_zerodesk"));
    c.env_remove("RUN_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 10] = [
    "--set",
    "total_env_steps=40",
    "--set",
    "eval_every=20",
    "--set",
    "eval_episodes=2",
    "--set",
    "search.num_simulations=6",
    "--set",
    "trainer.batch_size=8",
];

fn train_tiny(dir: &Path, extra: &[&str]) -> PathBuf {
    let run_dir = dir.join("run");
    let mut args = vec!["train", "--run-dir", run_dir.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    run_dir
}

#[test]
fn train_writes_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(dir.path(), &["--seed", "0", "--env", "kinrow3"]);
    let metrics = fs::read_to_string(run_dir.join("seed_0/metrics.csv")).unwrap();
    assert!(metrics.starts_with("eval_point,env_steps,seed,"));
    assert!(metrics.lines().count() >= 3);
    let manifest = fs::read_to_string(run_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\":\"completed\""));
    assert!(manifest.contains("\"version\":\"v"));
    assert!(run_dir.join("config.toml").exists());
}

#[test]
fn run_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("from_env");
    let mut args = vec!["train", "--seed", "4"];
    args.extend(TINY);
    let o = bin().args(&args).env("RUN_DIR", &run_dir).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run_dir.join("seed_4/metrics.csv").exists());
}

#[test]
fn unknown_override_key_exits_2() {
    let o = run(&["train", "--set", "serch.sims=5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("serch.sims"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "total_env_steps = 10\n[search]\nnum_sims = 3\n").unwrap();
    let o = run(&["train", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("num_sims"), "{}", stderr(&o));

    let o = run(&["train", "--set", "search.noise_weight=3.0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("search:"), "{}", stderr(&o));

    let o = run(&["train", "--set", "algorithm=\"stochastic\""]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("env:"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_1_with_manifest_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let run_dir = blocker.join("run");
    let mut args = vec!["train", "--run-dir", run_dir.to_str().unwrap()];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("manifest.json"), "{}", stderr(&o));
}

#[test]
fn printed_config_round_trips() {
    for env in ["kinrow3", "gridmaze", "2048", "pendulum"] {
        let o = run(&["config", "--env", env, "--algorithm", "muzero_ssl"]);
        assert_eq!(code(&o), 0);
        let cfg: RunConfig = toml::from_str(&stdout(&o)).unwrap();
        let again: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
        cfg.resolve().unwrap();
    }
    assert_eq!(code(&run(&["config", "--algorithm", "nope"])), 2);
}

#[test]
fn eval_reports_episodes_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(dir.path(), &["--seed", "0"]);
    let seed_dir = run_dir.join("seed_0");
    let out = dir.path().join("eval.csv");
    let args = ["eval", seed_dir.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()];
    let first = run(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let rows = fs::read_to_string(&out).unwrap();
    assert_eq!(rows.lines().count(), 21, "header plus 20 episodes");
    let second = run(&args);
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(rows, fs::read_to_string(&out).unwrap());
    assert!(stdout(&first).contains("win"));

    let five = run(&["eval", seed_dir.to_str().unwrap(), "--episodes", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&five), 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 6);

    let mismatch = run(&["eval", seed_dir.to_str().unwrap(), "--env", "connect4"]);
    assert_eq!(code(&mismatch), 2);
}

fn play(ckpt: &Path, seed: &str, input: &str) -> Output {
    let mut child = bin()
        .args(["play", ckpt.to_str().unwrap(), "--seed", seed])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn play_reprompts_and_exits_on_eof() {
    let dir = tempfile::tempdir().unwrap();
    let seed_dir = train_tiny(dir.path(), &["--seed", "0"]).join("seed_0");
    let o = play(&seed_dir, "1", "9\nabc\n4\n");
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("illegal move `9`"));
    assert!(text.contains("illegal move `abc`"));
    assert!(text.contains("agent plays"));
    assert!(text.trim_end().ends_with("bye"));
    // The first board after the rejected inputs is still empty.
    assert_eq!(text.matches(". . .\n. . .\n. . .").count(), 1);

    let script = "0\n1\n2\n3\n4\n5\n6\n7\n8\n";
    let a = play(&seed_dir, "2", script);
    let b = play(&seed_dir, "2", script);
    assert_eq!(stdout(&a), stdout(&b));
    for line in stdout(&a).lines().filter_map(|l| l.strip_prefix("agent plays ")) {
        assert!(line.parse::<usize>().unwrap() < 9);
    }
}

#[test]
fn probe_uses_random_play_or_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let seed_dir = train_tiny(dir.path(), &["--seed", "0", "--set", "algorithm=\"muzero\""]).join("seed_0");
    let o = run(&["probe", seed_dir.to_str().unwrap(), "--random", "150"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("n 150"));
    let empty = dir.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    let o = run(&["probe", seed_dir.to_str().unwrap(), empty.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn export_is_tidy_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train_tiny(dir.path(), &["--seed", "0", "--seed", "1"]);
    let out = dir.path().join("tidy.csv");
    let args = ["export", run_dir.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(code(&run(&args)), 0);
    let first = fs::read_to_string(&out).unwrap();
    assert_eq!(code(&run(&args)), 0);
    assert_eq!(first, fs::read_to_string(&out).unwrap());
    let mut lines = first.lines();
    assert_eq!(
        lines.next().unwrap(),
        "env_steps,seed,mean_return,std_return,cosine,loss_total,loss_policy,loss_value,loss_reward,\
         loss_consistency,loss_entropy,loss_chance"
    );
    let evals: usize = [0, 1]
        .iter()
        .map(|s| {
            fs::read_to_string(run_dir.join(format!("seed_{s}/metrics.csv")))
                .unwrap()
                .lines()
                .count()
                - 1
        })
        .sum();
    assert_eq!(lines.count(), evals);
    assert_eq!(code(&run(&["export", dir.path().to_str().unwrap()])), 2);
}
