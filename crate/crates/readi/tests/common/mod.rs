#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A model and data small enough for a full pipeline in a few seconds.
pub const TINY: &str = r#"
seed = 0
workers = 1
levels = [0.06]

[data]
n_train = 24
n_adapt = 12
n_test = 12

[data.scene]
world = 32.0
image_size = 16
origin = [16.0, 16.0]
separation = 9.0
objects = [1, 3]
ground_points = 20

[model]
image_size = 16
patch = 4
feat = 8
heads = 2
head_dim = 4
blocks = 1
ffn_hidden = 8
world = 32.0
cam_channels = 4
lidar_channels = 4
lidar_blocks = 1
fuse_channels = 4
fuse_blocks = 1

[base]
epochs = 1
batch_size = 8

[adapt.train]
epochs = 1
batch_size = 8

[contrastive]
drop_p = 0.5

[contrastive.train]
epochs = 1
batch_size = 8

[ablation]
seeds = 1

# Heads dominate a model this small, so no delta fits in 5%.
[store]
budget = 0.5

[cross_domain]
gamma = 0.25
fog = 0.1
lambda_step = 0.5

[eigen]
samples = 2
random_draws = 2
random_tokens = 20
random_feat = 16
random_head_dim = 4
"#;

pub const FOG_KEY: &str = "e0.b0.f2.s0.m11";
pub const BRIGHT_KEY: &str = "e2.b0.f0.s0.m11";

pub fn readi(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_readi")).current_dir(cwd).args(args).output().expect("spawn readi")
}

/// Run and require success, returning stdout.
pub fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = readi(cwd, args);
    assert!(
        out.status.success(),
        "readi {args:?} exited with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn code(cwd: &Path, args: &[&str]) -> i32 {
    readi(cwd, args).status.code().expect("exit code")
}

pub fn write_tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// The tiny end-to-end workflow through every subcommand, with results
/// under `results/` in `dir`. Returns the stdout of each step.
pub fn workflow(dir: &Path) -> Vec<String> {
    let cfg = write_tiny(dir);
    let c = cfg.to_str().unwrap();
    let mut log = Vec::new();
    let mut run = |args: &[&str]| log.push(ok(dir, args));
    run(&["datagen", "--n", "24", "--seed", "1", "--out", "train.rds", "--config", c]);
    run(&["datagen", "--n", "12", "--seed", "3", "--out", "test.rds", "--config", c]);
    run(&["simulate", "--fog", "0.1", "--seed", "5", "--in", "train.rds", "--out", "fog.rds", "--config", c]);
    run(&["simulate", "--gamma", "0.25", "--seed", "7", "--in", "train.rds", "--out", "bright.rds", "--config", c]);
    run(&["train-base", "--data", "train.rds", "--out", "base.rdm", "--config", c, "--results", "results/train"]);
    run(&["contrastive-pretrain", "--model", "base.rdm", "--data", "train.rds", "--out", "contrastive.rdm", "--config", c, "--results", "results/contrastive"]);
    run(&[
        "adapt", "--model", "base.rdm", "--data", "fog.rds", "--out", "fog.rdv", "--key", FOG_KEY, "--scope", "lidar", "--test", "test.rds", "--config", c,
        "--results", "results/adapt_fog",
    ]);
    run(&[
        "adapt", "--model", "base.rdm", "--data", "bright.rds", "--out", "bright.rdv", "--key", BRIGHT_KEY, "--scope", "camera", "--config", c,
        "--results", "results/adapt_bright",
    ]);
    run(&["eval", "--model", "base.rdm", "--data", "test.rds", "--variant", "fog.rdv", "--variant", "bright.rdv", "--config", c, "--results", "results/eval"]);
    run(&["eigen", "--model", "base.rdm", "--data", "test.rds", "--config", c, "--results", "results/eigen"]);
    run(&["variant", "--dir", "store", "register", "fog.rdv", "--base", "base.rdm", "--config", c]);
    run(&["variant", "--dir", "store", "register", "bright.rdv"]);
    run(&["variant", "--dir", "store", "activate", BRIGHT_KEY]);
    run(&["variant", "--dir", "store", "interpolate", "--camera", BRIGHT_KEY, "--lidar", FOG_KEY, "--lambda-c", "0.3"]);
    run(&["variant", "--dir", "store", "prune", "--threshold", "1e-3"]);
    run(&["variant", "--dir", "store", "report", "--results", "results/store"]);
    log
}
