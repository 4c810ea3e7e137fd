#![allow(dead_code)]

use ehat_core::decoder::{DecoderConfig, Model};
use ehat_core::{RngStream, Tensor};

pub fn random(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn tiny_config(d: usize, layers: usize) -> DecoderConfig {
    let mut c = DecoderConfig::tiny(d, layers, 9, 10);
    c.m_max = 8;
    c
}

pub fn tiny_model(d: usize, layers: usize, seed: u64) -> Model {
    Model::new(tiny_config(d, layers), seed).unwrap()
}

/// Random ids in `4..v` (no reserved tokens).
pub fn random_ids(len: usize, v: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..len).map(|_| 4 + rng.below(v - 4)).collect()
}
