use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_moe-rl-lab");

const TINY: &str = r#"
schema_version = 1
seed = 3
steps = 2
checkpoint_every = 1

[task]
kind = "copy"
vocab_size = 6
payload_len = 2

[policy]
vocab_size = 6
d_model = 8
d_hidden = 8
num_experts = 4
top_k = 2
max_positions = 8

[rollout]
prompts_per_step = 2
group_size = 4

[optimizer]
kind = "adam"
lr = 1e-2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("MOE_RL_LAB_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_names_the_path() {
    let o = run(&["train", "--config", "/no/such/file.toml", "--out", "/tmp/unused"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/file.toml"), "{}", stderr(&o));
}

#[test]
fn train_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for name in ["manifest.json", "summary.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    for step in 0..=2 {
        assert!(out.join(format!("checkpoints/step_{step:06}.ckpt")).exists());
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", &config, "--out", out.to_str().unwrap(), "--seed", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["seed"], 11);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &TINY.replace("lr = 1e-2", "lr = 1e-2\nmomentum = 0.9"));
    let o = run(&["train", "--config", &config, "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));
}

#[test]
fn verify_all_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "all", "--out", dir.path().to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("verify.json").exists());
}

#[test]
fn injected_fault_fails_verification() {
    let o = run(&["verify", "autodiff", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn unknown_suite_lists_the_valid_ones() {
    let o = run(&["verify", "bogus"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("order-study") && err.contains("replay-identity"), "{err}");
}

#[test]
fn sweep_over_minibatches() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = run(&[
        "sweep", "--config", &config, "--out", out.to_str().unwrap(), "--axis", "N", "--values", "1,2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = |n: &str| std::fs::read_to_string(out.join(n).join("metrics.jsonl")).unwrap().lines().count();
    assert_eq!(lines("1"), 2);
    assert_eq!(lines("2"), 4);
    assert!(out.join("sweep_summary.json").exists());
    assert!(out.join("sweep_summary.txt").exists());
}

#[test]
fn sweep_rejects_bad_values_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = run(&[
        "sweep", "--config", &config, "--out", out.to_str().unwrap(), "--axis", "N", "--values", "1,3",
    ]);
    assert!(!o.status.success());
    assert!(!out.join("1").exists());
    let o = run(&["sweep", "--config", &config, "--out", out.to_str().unwrap(), "--axis", "replay", "--values", ""]);
    assert!(!o.status.success());
}

#[test]
fn dump_rollouts_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let run_dir = dir.path().join("run");
    assert!(run(&["train", "--config", &config, "--out", run_dir.to_str().unwrap()]).status.success());
    let ckpt = run_dir.join("checkpoints/step_000002.ckpt");
    let out = dir.path().join("dump");
    let o = run(&[
        "dump-rollouts",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("rollouts.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 8);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["mu_old_log_probs"].is_array());
}

#[test]
fn bad_worker_count_is_an_error() {
    let o = Command::new(BIN)
        .args(["verify", "autodiff"])
        .env("MOE_RL_LAB_WORKERS", "0")
        .output()
        .unwrap();
    assert!(!o.status.success());
}
