#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn idx_images(images: &[Vec<u8>]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [2051u32, images.len() as u32, 28, 28] {
        b.extend(v.to_be_bytes());
    }
    for img in images {
        b.extend_from_slice(img);
    }
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend(2049u32.to_be_bytes());
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

/// Striped digits: class `k` lights image rows `2k+4` and `2k+5`.
fn stripes(n: usize, seed: u64) -> (Vec<Vec<u8>>, Vec<u8>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let k = i % 10;
        let img = (0..784)
            .map(|p| {
                if p / 28 / 2 == k + 2 {
                    230
                } else {
                    r.random_range(0..50)
                }
            })
            .collect();
        images.push(img);
        labels.push(k as u8);
    }
    (images, labels)
}

/// Writes an MNIST-layout dataset with `train` and `test` records under `dir`.
pub fn synthetic_mnist(dir: &Path, train: usize, test: usize) -> PathBuf {
    for (stem, n, seed) in [("train", train, 1), ("t10k", test, 2)] {
        let (images, labels) = stripes(n, seed);
        std::fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), idx_images(&images)).unwrap();
        std::fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
    }
    dir.to_path_buf()
}

/// Overrides for a run that finishes in seconds.
pub fn quick() -> Vec<String> {
    [
        "vae_epochs=1",
        "gen_epochs=1",
        "cls_epochs=1",
        "global_epochs=1",
        "batch_size=16",
        "vae_lr=0.002",
        "transfer_eps=0,0.1",
        "samples=4",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

pub fn avic(args: &[&str], extra: &[String]) -> i32 {
    let mut all: Vec<String> = std::iter::once("avic".to_string())
        .chain(args.iter().map(|s| s.to_string()))
        .collect();
    all.extend_from_slice(extra);
    avic_cli::run(all)
}
