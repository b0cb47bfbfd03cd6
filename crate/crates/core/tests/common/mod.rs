#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use splitwire::rng::SplitMix64;
use splitwire::zoo::{calibrated_microresnet, DEFAULT_CALIBRATION, REFERENCE_SEED};
use splitwire::{ModelGraph, Tensor};

/// The seed-42 MicroResNet calibrated on its default calibration set.
pub fn reference() -> Arc<ModelGraph> {
    static MODEL: OnceLock<Arc<ModelGraph>> = OnceLock::new();
    MODEL
        .get_or_init(|| Arc::new(calibrated_microresnet(REFERENCE_SEED, DEFAULT_CALIBRATION).unwrap()))
        .clone()
}

/// Uniform values in [-1, 1).
pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.symmetric(1.0) as f32).collect()).unwrap()
}

/// Empirical order-0 Shannon entropy in bits per symbol.
pub fn shannon_entropy(data: &[u8]) -> f64 {
    let mut counts = [0usize; 256];
    for &b in data {
        counts[b as usize] += 1;
    }
    let n = data.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}
