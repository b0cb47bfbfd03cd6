//! The desk-scale test model and its synthetic input source.
//!
//! `MicroResNet` is a three-block residual network over 3x32x32 inputs:
//!
//! ```text
//! stem:    conv0 3x3 (3->8) -> bn0 -> relu0
//! block 1: b1_conv1 -> b1_bn1 -> b1_relu1 -> b1_conv2 -> b1_bn2 -> b1_add(+relu0) -> b1_relu
//! block 2: same, 8->16 stride 2, with b2_proj (1x1 conv, stride 2) -> b2_proj_bn shortcut
//! block 3: same, 16->32 stride 2, with projection shortcut
//! head:    gap -> fc (32->10) -> softmax
//! ```
//!
//! Weights are Xavier-uniform draws from one SplitMix64 stream; batch-norm
//! layers start as identities and are fitted with [`calibrate_batchnorm`].

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::exec::eval_layer;
use crate::graph::{BatchNorm, Conv2d, Dense, Layer, LayerKind, ModelGraph};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;
pub const INPUT_SHAPE: [usize; 3] = [3, 32, 32];
pub const BN_EPS: f32 = 1e-5;
/// Seed of the model whose hash is pinned in the test suite.
pub const REFERENCE_SEED: u64 = 42;
pub const MIN_CALIBRATION: usize = 16;
/// Calibration-set size used when none is given.
pub const DEFAULT_CALIBRATION: usize = 64;

struct Builder {
    rng: SplitMix64,
    layers: Vec<Layer>,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<usize>) -> usize {
        self.layers.push(Layer::new(name, kind, inputs));
        self.layers.len() - 1
    }

    fn xavier(&mut self, n: usize, fan_in: usize, fan_out: usize) -> Vec<f32> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..n).map(|_| self.rng.symmetric(limit) as f32).collect()
    }

    fn conv(&mut self, name: String, input: Option<usize>, cin: usize, cout: usize, k: usize, stride: usize) -> usize {
        let weights = self.xavier(cout * cin * k * k, cin * k * k, cout * k * k);
        let conv = Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_h: k,
            kernel_w: k,
            stride,
            padding: k / 2,
            weights,
        };
        self.push(name, LayerKind::Conv2d(conv), input.into_iter().collect())
    }

    fn bn(&mut self, name: String, input: usize, channels: usize) -> usize {
        self.push(name, LayerKind::BatchNorm(BatchNorm::identity(channels, BN_EPS)), vec![input])
    }

    fn relu(&mut self, name: String, input: usize) -> usize {
        self.push(name, LayerKind::Relu, vec![input])
    }

    fn block(&mut self, idx: usize, input: usize, cin: usize, cout: usize, stride: usize) -> usize {
        let p = format!("b{idx}");
        let c1 = self.conv(format!("{p}_conv1"), Some(input), cin, cout, 3, stride);
        let n1 = self.bn(format!("{p}_bn1"), c1, cout);
        let r1 = self.relu(format!("{p}_relu1"), n1);
        let c2 = self.conv(format!("{p}_conv2"), Some(r1), cout, cout, 3, 1);
        let n2 = self.bn(format!("{p}_bn2"), c2, cout);
        let shortcut = if cin != cout || stride != 1 {
            let pc = self.conv(format!("{p}_proj"), Some(input), cin, cout, 1, stride);
            self.bn(format!("{p}_proj_bn"), pc, cout)
        } else {
            input
        };
        let add = self.push(format!("{p}_add"), LayerKind::Add, vec![shortcut, n2]);
        self.relu(format!("{p}_relu"), add)
    }
}

/// Deterministically builds the uncalibrated MicroResNet for `seed`.
pub fn build_microresnet(seed: u64) -> ModelGraph {
    let mut b = Builder {
        rng: SplitMix64::new(seed),
        layers: Vec::new(),
    };
    let c0 = b.conv("conv0".into(), None, 3, 8, 3, 1);
    let n0 = b.bn("bn0".into(), c0, 8);
    let r0 = b.relu("relu0".into(), n0);
    let x = b.block(1, r0, 8, 8, 1);
    let x = b.block(2, x, 8, 16, 2);
    let x = b.block(3, x, 16, 32, 2);
    let gap = b.push("gap".into(), LayerKind::GlobalAvgPool, vec![x]);
    let weights = b.xavier(32 * NUM_CLASSES, 32, NUM_CLASSES);
    let fc = Dense {
        in_features: 32,
        out_features: NUM_CLASSES,
        weights,
        bias: vec![0.0; NUM_CLASSES],
    };
    let fc = b.push("fc".into(), LayerKind::Dense(fc), vec![gap]);
    b.push("softmax".into(), LayerKind::Softmax, vec![fc]);
    ModelGraph::new(INPUT_SHAPE.to_vec(), b.layers).expect("MicroResNet topology is valid")
}

/// `build_microresnet(seed)` calibrated on `SyntheticSource::new(seed, calibration)`.
pub fn calibrated_microresnet(seed: u64, calibration: usize) -> Result<ModelGraph> {
    calibrate_batchnorm(&build_microresnet(seed), &SyntheticSource::new(seed, calibration))
}

/// Procedural stand-in for camera frames: oriented sinusoidal gratings whose
/// orientation bucket is the class label, plus seeded per-image noise.
/// Every image is a pure function of `(seed, index)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSource {
    pub seed: u64,
    pub count: usize,
    pub shape: [usize; 3],
}

/// A "minor change in the input frame": grating phase shifted by a uniform
/// draw from `[-phase_jitter, phase_jitter]` radians, and optionally a fresh
/// noise realisation. The default perturbation is the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Perturbation {
    pub phase_jitter: f64,
    pub noise_seed: Option<u64>,
}

impl Perturbation {
    /// The jitter used by the split analyzer's stability metric.
    pub fn frame_jitter(noise_seed: u64) -> Self {
        Self {
            phase_jitter: 0.25,
            noise_seed: Some(noise_seed),
        }
    }
}

const NOISE_AMPLITUDE: f64 = 0.05;
const STREAM_PARAMS: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_JITTER: u64 = 3;

impl SyntheticSource {
    pub fn new(seed: u64, count: usize) -> Self {
        Self {
            seed,
            count,
            shape: INPUT_SHAPE,
        }
    }

    pub fn sample(&self, index: usize) -> Result<(Tensor, usize)> {
        self.perturbed(index, &Perturbation::default())
    }

    pub fn perturbed(&self, index: usize, perturbation: &Perturbation) -> Result<(Tensor, usize)> {
        if index >= self.count {
            return Err(Error::IndexOutOfRange {
                index,
                count: self.count,
            });
        }
        let [channels, h, w] = self.shape;
        let mut params = SplitMix64::keyed(self.seed, index as u64, STREAM_PARAMS);
        let class = params.below(NUM_CLASSES as u64) as usize;
        let bucket = PI / NUM_CLASSES as f64;
        let theta = (class as f64 + 0.1 + 0.8 * params.next_f64()) * bucket;
        let cycles = 2.0 + 3.0 * params.next_f64();
        let mut phase = std::f64::consts::TAU * params.next_f64();
        let gains: Vec<(f64, f64)> = (0..channels)
            .map(|_| (0.6 + 0.4 * params.next_f64(), 0.4 + 0.2 * params.next_f64()))
            .collect();

        if perturbation.phase_jitter != 0.0 {
            let mut j = SplitMix64::keyed(
                self.seed ^ perturbation.noise_seed.unwrap_or(0),
                index as u64,
                STREAM_JITTER,
            );
            phase += j.symmetric(perturbation.phase_jitter);
        }
        let noise_key = match perturbation.noise_seed {
            Some(s) => s.wrapping_add(0x5EED),
            None => 0,
        };
        let mut noise = SplitMix64::keyed(self.seed ^ noise_key, index as u64, STREAM_NOISE);

        let (ct, st) = (theta.cos(), theta.sin());
        let mut data = Vec::with_capacity(channels * h * w);
        for &(gain, offset) in &gains {
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 * ct + y as f64 * st) / w as f64;
                    let v = offset
                        + 0.35 * gain * (std::f64::consts::TAU * cycles * u + phase).sin()
                        + noise.symmetric(NOISE_AMPLITUDE);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        Ok((Tensor::from_parts(self.shape.to_vec(), data), class))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Tensor, usize)> + '_ {
        (0..self.count).map(move |i| self.sample(i).expect("index in range"))
    }
}

/// Replaces every BatchNorm's running statistics with the per-channel mean and
/// population variance of its input over `source`, processing layers in
/// topological order so each BN sees the already-normalized upstream.
/// A zero-variance channel gets `var = eps`.
pub fn calibrate_batchnorm(model: &ModelGraph, source: &SyntheticSource) -> Result<ModelGraph> {
    if source.count < MIN_CALIBRATION {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least {MIN_CALIBRATION} inputs, got {}",
            source.count
        )));
    }
    let inputs: Vec<Tensor> = source.iter().map(|(t, _)| t).collect();
    if inputs[0].shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            actual: inputs[0].shape().to_vec(),
        });
    }
    let mut layers = model.layers().to_vec();
    // acts[i][n] = output of layer i for input n.
    let mut acts: Vec<Vec<Tensor>> = Vec::with_capacity(layers.len());
    for id in 0..layers.len() {
        let src_acts = |slot: usize| -> &Vec<Tensor> {
            let layer = &layers[id];
            if layer.inputs.is_empty() {
                &inputs
            } else {
                &acts[layer.inputs[slot]]
            }
        };
        if let LayerKind::BatchNorm(bn) = &layers[id].kind {
            let (mean, var) = channel_stats(src_acts(0), bn.channels());
            let mut fitted = bn.clone();
            fitted.mean = mean;
            fitted.var = var
                .into_iter()
                .map(|v| if v > 0.0 { v } else { fitted.eps.max(BN_EPS) })
                .collect();
            layers[id].kind = LayerKind::BatchNorm(fitted);
        }
        let layer = &layers[id];
        let outs: Vec<Tensor> = (0..inputs.len())
            .map(|n| {
                let ins: Vec<&Tensor> = if layer.inputs.is_empty() {
                    vec![&inputs[n]]
                } else {
                    layer.inputs.iter().map(|&src| &acts[src][n]).collect()
                };
                eval_layer(layer, &ins, model.output_shape(id))
            })
            .collect();
        acts.push(outs);
    }
    model.with_layers(layers)
}

/// Per-channel mean and population variance (accumulated in f64).
pub fn channel_stats(tensors: &[Tensor], channels: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0f64; channels];
    let mut count = 0usize;
    let per = tensors[0].len() / channels;
    for t in tensors {
        for (c, chunk) in t.data().chunks_exact(per).enumerate() {
            sum[c] += chunk.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        count += per;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0f64; channels];
    for t in tensors {
        for (c, chunk) in t.data().chunks_exact(per).enumerate() {
            sq[c] += chunk
                .iter()
                .map(|&v| (f64::from(v) - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    (
        mean.iter().map(|&m| m as f32).collect(),
        sq.iter().map(|&s| (s / count as f64) as f32).collect(),
    )
}

/// Fixed-width histogram; values outside `[lo, hi)` land in the edge bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: impl IntoIterator<Item = f32>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins.max(1)];
        let width = (hi - lo) / counts.len() as f64;
        let last = counts.len() - 1;
        for v in values {
            let b = ((f64::from(v) - lo) / width).floor();
            let b = if b.is_nan() || b < 0.0 { 0 } else { (b as usize).min(last) };
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Fraction of `values` within `k` population standard deviations of their mean.
pub fn fraction_within_sigmas(values: &[f32], k: f64) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = values.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let inside = values
        .iter()
        .filter(|&&v| (f64::from(v) - mean).abs() <= k * sd)
        .count();
    inside as f64 / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_matches_layout() {
        let m = build_microresnet(1);
        let names: Vec<&str> = m.layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names[..3], ["conv0", "bn0", "relu0"]);
        assert_eq!(*names.last().unwrap(), "softmax");
        assert_eq!(m.output_shape(m.layer_id("b3_relu").unwrap()), &[32, 8, 8]);
        assert_eq!(m.output_shape(m.layer_id("fc").unwrap()), &[10]);
        for add in ["b1_add", "b2_add", "b3_add"] {
            assert!(m.is_valid_split(m.layer_id(add).unwrap()), "{add}");
        }
        assert!(!m.is_valid_split(m.layer_id("b2_conv2").unwrap()));
        assert!(!m.is_valid_split(m.layer_id("b2_proj_bn").unwrap()));
    }

    #[test]
    fn samples_are_pure_and_bounded() {
        let src = SyntheticSource::new(1, 8);
        let (a, ca) = src.sample(0).unwrap();
        let (b, cb) = src.sample(0).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(ca, cb);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(src.sample(8), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let src = SyntheticSource::new(3, 4);
        let (a, _) = src.sample(2).unwrap();
        let (b, _) = src.perturbed(2, &Perturbation::default()).unwrap();
        assert!(a.bit_eq(&b));
        let (c, _) = src.perturbed(2, &Perturbation::frame_jitter(9)).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn calibration_needs_sixteen_inputs() {
        let m = build_microresnet(5);
        assert!(calibrate_batchnorm(&m, &SyntheticSource::new(0, 15)).is_err());
    }

    #[test]
    fn histogram_clamps_to_edges() {
        let h = Histogram::build([-10.0, 0.0, 0.5, 10.0], -1.0, 1.0, 4);
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
    }
}
