#![allow(dead_code)]

pub mod qp_oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_shac-koopman"))
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// A configuration small enough to run every command in seconds.
pub const TINY_CONFIG: &str = r#"
episode_len = 12

[si]
seeds = [0, 1]
dataset_seed = 7

[si.train]
epochs = 2
batches_per_epoch = 2
batch = 16
horizon = 4

[si.dataset]
n_traj = 4
n_train = 3
days = 0.5

[shac]
horizon = 2
n_envs = 2
total_steps = 8
critic_hidden = [8]
critic_iterations = 1
critic_minibatches = 1

[ppo]
rollout = 4
n_envs = 2
minibatch = 4
epochs = 1
total_steps = 8
critic_hidden = [8]

[prices]
train_hours = 60
test_hours = 6

[grad_study]
n_gradients = 2
critic_updates = 1
ppo_batch = 4
"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

/// Runs every subcommand into `root/<command>`; returns the summaries in order.
pub fn run_all_commands(root: &Path, config: &Path) -> Vec<(String, String)> {
    let cfg = config.to_str().unwrap();
    let d = |name: &str| root.join(name).to_str().unwrap().to_string();
    let si_model = root.join("train-si").join("si_model.ckpt");
    let dataset = root.join("gen-data").join("dataset.ckpt");
    let prices = root.join("prices.csv");
    fs::create_dir_all(root).unwrap();
    fs::write(&prices, "timestamp,price\n2022-05-01T00:00,41.5\n2022-05-01T01:00,38.0\n2022-05-01T02:00,55.25\n").unwrap();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", vec![]),
        ("train-si", vec!["--dataset".into(), dataset.to_str().unwrap().into()]),
        ("train-shac", vec!["--model".into(), si_model.to_str().unwrap().into()]),
        ("train-ppo", vec!["--model".into(), si_model.to_str().unwrap().into()]),
        ("evaluate", vec!["--model".into(), si_model.to_str().unwrap().into(), "--prices".into(), prices.to_str().unwrap().into()]),
        ("grad-study", vec!["--model".into(), si_model.to_str().unwrap().into()]),
        ("report", vec!["--inputs".into(), d("evaluate"), d("train-si")]),
    ];
    let mut out = Vec::new();
    for (cmd, extra) in steps {
        let mut args = vec![cmd.to_string(), "--config".into(), cfg.into(), "--run-dir".into(), d(cmd)];
        args.extend(extra);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = cli(&refs);
        assert!(
            o.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        out.push((cmd.to_string(), fs::read_to_string(root.join(cmd).join("summary.json")).unwrap()));
    }
    out
}
