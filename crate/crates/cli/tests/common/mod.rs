#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_mhmtl");

pub const TASKS: &str = r#"
[[model.tasks]]
id = "seg"
kind = "segmentation"
classes = 3

[[model.tasks]]
id = "cls"
kind = "classification"
classes = 3

[[model.tasks]]
id = "det"
kind = "detection"

[[model.tasks]]
id = "reg"
kind = "regression"
keypoints = 2
"#;

/// A four-task run over a generated dataset in `data/` next to the config.
pub fn config(seed: u64, steps: u64, count: usize) -> String {
    format!(
        r#"seed = {seed}
deterministic = true
output_dir = "run"

[model]
input_size = [64, 64]
{TASKS}
[optim]
max_steps = {steps}
batch_size = 4
backbone_lr = 1e-3
head_lr = 1e-2
eval_every = 20

[data]
manifest = "data/manifest.jsonl"
val_manifest = "data/val/manifest.jsonl"

[data.synth]
count = {count}
val_count = 4
orig_size_min = 80
orig_size_max = 160
"#
    )
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

pub fn mhmtl(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", stderr(out));
}

/// All files under `dir`, relative paths with their bytes, sorted.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
