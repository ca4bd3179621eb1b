#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use avic_core::data::DatasetSplit;
use avic_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random images with a class-dependent bright stripe, easy to learn.
pub fn stripes(n: usize, seed: u64) -> DatasetSplit {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        for y in 0..28 {
            for _x in 0..28 {
                let on = y / 2 == label + 2;
                data.push(if on { 0.9 } else { r.random_range(0.0..0.2) });
            }
        }
        labels.push(label);
    }
    DatasetSplit::new(Tensor::new(vec![n, 1, 28, 28], data).unwrap(), labels, "stripes", 10).unwrap()
}

pub fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [2051, count, rows, cols] {
        b.extend(v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend(2049u32.to_be_bytes());
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

pub fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, bytes).unwrap();
    path
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

/// CIFAR-10 records: label byte then 3072 pixel bytes.
pub fn cifar10_records(labels: &[u8], fill: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut b = Vec::new();
    for (r, &l) in labels.iter().enumerate() {
        b.push(l);
        b.extend((0..3072).map(|i| fill(r, i)));
    }
    b
}
