use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--override",
    "budget_episodes=8",
    "--override",
    "num_rollout_threads=4",
    "--override",
    "ppo_epochs=1",
    "--override",
    "policy_hidden_shape=8",
    "--override",
    "v_hidden_shape=8",
    "--override",
    "embed_dim=8",
    "--override",
    "num_heads=2",
    "--override",
    "reward_model.depth=1",
    "--override",
    "reward_model.batch_size=4",
    "--override",
    "update_epochs=1",
    "--override",
    "update_freq=4",
    "--override",
    "eval_episodes=2",
];

fn tar2(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tar2"))
        .args(args)
        .env("TAR2_OUT_DIR", out_root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn help_and_version_exit_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tar2(&["--help"], dir.path())), 0);
    assert_eq!(code(&tar2(&["--version"], dir.path())), 0);
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--override", "nope=1"],
        vec!["train", "--override", "gamma"],
        vec!["train", "--config", "/definitely/missing.toml"],
        vec!["train", "--seeds", "x"],
        vec!["train", "--mode", "arel"],
        vec!["ablate", "--arms", "tar2,bogus"],
        vec!["sweep", "--grid", "tar2"],
        vec!["frobnicate"],
    ] {
        let o = tar2(&args, dir.path());
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn runtime_faults_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let o = tar2(&["eval", "--checkpoint", missing.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn train_uses_the_output_root_and_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let o = tar2(&with_tiny(&["train", "--seeds", "3,7", "--mode", "tar2", "--override", "entropy_pen=5e-3"]), dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("train/default_tar2");
    for f in ["summary.json", "seed_3/metrics.jsonl", "seed_7/checkpoint.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let config = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("entropy_pen = 0.005"));
    assert!(config.contains("seeds = [3, 7]"));

    let ckpt = run.join("seed_3/checkpoint.bin");
    let eval_out = dir.path().join("ev");
    let o = tar2(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "3", "--out", eval_out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(eval_out.join("heatmap.csv").exists());
}

#[test]
fn seed_count_and_explicit_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("explicit");
    let o = tar2(
        &with_tiny(&["train", "--config", "keytreasure_uniform", "--seeds", "2", "--out", out.to_str().unwrap()]),
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("seed_0").exists() && out.join("seed_1").exists() && !out.join("seed_2").exists());
}

#[test]
fn resume_needs_exactly_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = tar2(&with_tiny(&["train", "--seeds", "2", "--resume", "x.bin"]), dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn ablate_writes_a_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let o = tar2(&with_tiny(&["ablate", "--arms", "uniform,no_normalization"]), dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("ablate/default_tar2/ranking.csv").exists());
}

#[test]
fn sweep_over_a_grid_file() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "[grid]\nentropy_pen = [5e-3, 1e-2]\n").unwrap();
    let o = tar2(&with_tiny(&["sweep", "--mode", "uniform", "--grid", grid.to_str().unwrap()]), dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("sweep/default_uniform/sweep.json").exists());
}

#[test]
fn quick_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = tar2(&["verify", "--quick", "--out", out.to_str().unwrap()], dir.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 8);
    assert!(out.join("verify.json").exists());
}
