#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TRAIN_PER_DIGIT: usize = 24;
pub const EVAL_PER_DIGIT: usize = 4;

/// Small models and 32×32 images so a full pipeline takes seconds.
pub const TINY_CONFIG: &str = r#"{
  "noise": {"sigma_mean": 10.0, "sigma_std": 5.0, "scale_min": 16, "scale_max": 32, "output_size": 32},
  "vae_arch": {"input_size": 32, "channels": [4, 8], "kernel": 4, "latent_dim": 4},
  "cnn_arch": {"input_size": 32, "channels": [4, 8], "kernel": 3},
  "vae_train": {"batch_size": 8, "learning_rate": 0.003, "max_epochs": 2, "convergence_patience": 5, "seed": 0},
  "cnn_train": {"batch_size": 8, "learning_rate": 0.003, "max_epochs": 2, "convergence_patience": 5, "seed": 0}
}"#;

pub fn spade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spade"))
        .args(args)
        .env_remove("SPADE_DATA_DIR")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn spade")
}

fn idx_images(images: &[[u8; 784]]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [2051u32, images.len() as u32, 28, 28] {
        out.extend(v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [2049u32, labels.len() as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    out
}

/// Even digits draw a ring, odd digits a bar at a label-dependent column.
fn digit(label: u8, variant: usize) -> [u8; 784] {
    let mut img = [0u8; 784];
    let shift = (variant % 5) as f64 - 2.0;
    for y in 0..28 {
        for x in 0..28 {
            let (fx, fy) = (x as f64 - 13.5 - shift, y as f64 - 13.5);
            let on = if label.is_multiple_of(2) {
                let r = (fx * fx + fy * fy).sqrt();
                (6.0 + f64::from(label) * 0.3..9.5).contains(&r)
            } else {
                (fx - (-8.0 + f64::from(label) * 1.5)).abs() < 2.0 && fy.abs() < 10.0
            };
            if on {
                img[y * 28 + x] = 220;
            }
        }
    }
    img
}

pub fn write_mnist(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    for (n, images, labels) in [
        (TRAIN_PER_DIGIT, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (EVAL_PER_DIGIT, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let labels_v: Vec<u8> = (0..n * 10).map(|i| (i % 10) as u8).collect();
        let imgs: Vec<[u8; 784]> = labels_v.iter().enumerate().map(|(i, &l)| digit(l, i)).collect();
        fs::write(dir.join(images), idx_images(&imgs)).unwrap();
        fs::write(dir.join(labels), idx_labels(&labels_v)).unwrap();
    }
}

/// A temporary data directory with `mnist/` and `config.json`; commands run
/// from inside it with `--data-dir` and `--config` pointing there.
pub struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_mnist(&dir.path().join("mnist"));
        fs::write(dir.path().join("config.json"), TINY_CONFIG).unwrap();
        Self { dir }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn run(&self, args: &[&str]) -> Output {
        let root = self.root().to_str().unwrap();
        let config = self.path("config.json");
        Command::new(env!("CARGO_BIN_EXE_spade"))
            .current_dir(self.root())
            .args(args)
            .args(["--data-dir", root, "--config", config.to_str().unwrap()])
            .env_remove("SPADE_DATA_DIR")
            .env_remove("RUST_LOG")
            .output()
            .expect("spawn spade")
    }

    /// Runs and asserts success; returns stdout.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "spade {args:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}
