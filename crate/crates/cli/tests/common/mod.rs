#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eraserelu_core::train::TrainConfig;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eraserelu"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn eraserelu")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Workspace `data/mnist`, or `ERASERELU_MNIST_DIR` when set.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("ERASERELU_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn mnist_available() -> bool {
    MNIST_FILES.iter().all(|f| mnist_dir().join(f).is_file())
}

fn idx_images(n: usize, labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        out.extend(d.to_be_bytes());
    }
    for (i, &l) in labels.iter().enumerate() {
        for p in 0..784usize {
            let on = p / 78 == usize::from(l);
            out.push(if on { 200 } else { ((i * 31 + p * 7) % 40) as u8 });
        }
    }
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

/// Small learnable MNIST-format files: class `l` lights pixel band `l`.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    let train_labels: Vec<u8> = (0..train).map(|i| ((i * 3 + 1) % 10) as u8).collect();
    let test_labels: Vec<u8> = (0..test).map(|i| ((i * 7 + 2) % 10) as u8).collect();
    fs::write(dir.join(MNIST_FILES[0]), idx_images(train, &train_labels)).unwrap();
    fs::write(dir.join(MNIST_FILES[1]), idx_labels(&train_labels)).unwrap();
    fs::write(dir.join(MNIST_FILES[2]), idx_images(test, &test_labels)).unwrap();
    fs::write(dir.join(MNIST_FILES[3]), idx_labels(&test_labels)).unwrap();
}

/// An mlp12 MNIST config written to `dir/config.toml`.
pub fn write_config(dir: &Path, cfg: &TrainConfig) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

pub fn small_config(data: &Path, out: &Path, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::mnist_mlp(7, data, out);
    c.epochs = epochs;
    c.batch_size = 32;
    c.schedule.milestones = vec![epochs - 1];
    c
}
