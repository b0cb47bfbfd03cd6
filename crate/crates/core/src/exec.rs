//! Reference executor: direct loops, fixed accumulation order, no parallelism.
//!
//! Every kernel visits its operands in a documented order so that a split
//! pass (head then tail) performs exactly the same floating-point operations
//! as the full pass and therefore produces bit-identical results.

use crate::error::{Error, Result};
use crate::graph::{BatchNorm, Conv2d, Dense, Layer, LayerKind, ModelGraph, Pool};
use crate::tensor::Tensor;

/// Runs the whole model and returns every layer's activation, indexed by id.
pub fn forward(model: &ModelGraph, input: &Tensor) -> Result<Vec<Tensor>> {
    check_input(model.input_shape(), input)?;
    let mut acts: Vec<Tensor> = Vec::with_capacity(model.len());
    for (id, layer) in model.layers().iter().enumerate() {
        let out = {
            let ins: Vec<&Tensor> = if layer.inputs.is_empty() {
                vec![input]
            } else {
                layer.inputs.iter().map(|&i| &acts[i]).collect()
            };
            eval_layer(layer, &ins, model.output_shape(id))
        };
        acts.push(out);
    }
    Ok(acts)
}

/// Final output of a full pass.
pub fn infer(model: &ModelGraph, input: &Tensor) -> Result<Tensor> {
    let mut acts = forward(model, input)?;
    Ok(acts.pop().expect("graph has at least one layer"))
}

/// Evaluates layers `from..=to` given the tensor entering the range: the model
/// input when `from == 0`, otherwise the output of layer `from - 1`.
///
/// `from - 1` (when present) and `to` must both be valid split points. An
/// empty range (`from == to + 1`) returns the boundary tensor unchanged.
pub fn forward_range(
    model: &ModelGraph,
    boundary: &Tensor,
    from: usize,
    to: usize,
) -> Result<Tensor> {
    let last = model.last_id();
    if to > last || from > to + 1 {
        return Err(Error::InvalidArgument(format!(
            "layer range {from}..={to} is outside 0..={last}"
        )));
    }
    if from > 0 && !model.is_valid_split(from - 1) {
        return Err(Error::InvalidSplit(from - 1));
    }
    if !model.is_valid_split(to) && from <= to {
        return Err(Error::InvalidSplit(to));
    }
    let boundary_shape = if from == 0 {
        model.input_shape()
    } else {
        model.output_shape(from - 1)
    };
    check_input(boundary_shape, boundary)?;
    if from == to + 1 {
        return Ok(boundary.clone());
    }

    let mut acts: Vec<Option<Tensor>> = vec![None; to + 1 - from];
    for id in from..=to {
        let layer = &model.layers()[id];
        let out = {
            let mut ins: Vec<&Tensor> = Vec::with_capacity(2);
            if layer.inputs.is_empty() {
                ins.push(boundary);
            }
            for &src in &layer.inputs {
                if src + 1 == from {
                    ins.push(boundary);
                } else if src >= from {
                    ins.push(acts[src - from].as_ref().expect("producer evaluated"));
                } else {
                    // Unreachable for valid splits; guards hand-built graphs.
                    return Err(Error::InvalidSplit(from - 1));
                }
            }
            eval_layer(layer, &ins, model.output_shape(id))
        };
        acts[id - from] = Some(out);
    }
    Ok(acts.pop().flatten().expect("range is non-empty"))
}

/// Client side of a split at `k`: layers `0..=k`.
pub fn run_head(model: &ModelGraph, input: &Tensor, k: usize) -> Result<Tensor> {
    forward_range(model, input, 0, k)
}

/// Server side of a split at `k`: layers `k+1..=last`.
pub fn run_tail(model: &ModelGraph, cut: &Tensor, k: usize) -> Result<Tensor> {
    forward_range(model, cut, k + 1, model.last_id())
}

fn check_input(expected: &[usize], t: &Tensor) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    if let Some(index) = t.first_non_finite() {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// Evaluates one layer. `inputs` must already match the shapes the graph
/// validated; `out_shape` is the layer's inferred output shape.
pub fn eval_layer(layer: &Layer, inputs: &[&Tensor], out_shape: &[usize]) -> Tensor {
    let x = inputs[0];
    let data = match &layer.kind {
        LayerKind::Conv2d(conv) => conv2d(conv, x, out_shape),
        LayerKind::BatchNorm(bn) => batchnorm(bn, x),
        LayerKind::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::Add => x
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(a, b)| a + b)
            .collect(),
        LayerKind::MaxPool(pool) => maxpool(*pool, x, out_shape),
        LayerKind::GlobalAvgPool => global_avg_pool(x),
        LayerKind::Dense(d) => dense(d, x),
        LayerKind::Flatten => x.data().to_vec(),
        LayerKind::Softmax => softmax(x.data()),
    };
    Tensor::from_parts(out_shape.to_vec(), data)
}

// Output order is row-major over [oc, oy, ox]; each output accumulates taps
// in ky -> kx -> ic order, starting from 0.0. Zero-padding taps are skipped.
// A whole output row is accumulated at once so the innermost loop runs over
// ox; this does not change the per-output order of operations.
fn conv2d(conv: &Conv2d, x: &Tensor, out_shape: &[usize]) -> Vec<f32> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (kh, kw, ic_n) = (conv.kernel_h, conv.kernel_w, conv.in_channels);
    let (s, p) = (conv.stride, conv.padding);
    let plane = h * w;
    let xd = x.data();
    // Valid ox range per kx: 0 <= ox*s + kx - p < w.
    let ox_range: Vec<(usize, usize)> = (0..kw)
        .map(|kx| {
            let lo = p.saturating_sub(kx).div_ceil(s);
            let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(ow) } else { 0 };
            (lo, hi.max(lo))
        })
        .collect();
    let mut out = vec![0.0f32; conv.out_channels * oh * ow];
    for (oc, out_plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        let wbase = oc * ic_n * kh * kw;
        for (oy, acc) in out_plane.chunks_exact_mut(ow).enumerate() {
            for ky in 0..kh {
                let iy = oy * s + ky;
                if iy < p || iy - p >= h {
                    continue;
                }
                let row = (iy - p) * w;
                for (kx, &(lo, hi)) in ox_range.iter().enumerate() {
                    if lo >= hi {
                        continue;
                    }
                    for ic in 0..ic_n {
                        let wv = conv.weights[wbase + (ic * kh + ky) * kw + kx];
                        let base = ic * plane + row + lo * s + kx - p;
                        let acc = &mut acc[lo..hi];
                        if s == 1 {
                            for (a, &v) in acc.iter_mut().zip(&xd[base..base + hi - lo]) {
                                *a += wv * v;
                            }
                        } else {
                            for (j, a) in acc.iter_mut().enumerate() {
                                *a += wv * xd[base + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn batchnorm_affine(bn: &BatchNorm) -> (Vec<f32>, Vec<f32>) {
    let scale: Vec<f32> = bn
        .gamma
        .iter()
        .zip(&bn.var)
        .map(|(&g, &v)| g / (v + bn.eps).sqrt())
        .collect();
    let shift = bn
        .beta
        .iter()
        .zip(&bn.mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    (scale, shift)
}

fn batchnorm(bn: &BatchNorm, x: &Tensor) -> Vec<f32> {
    let (scale, shift) = batchnorm_affine(bn);
    let per_channel = x.len() / bn.channels();
    x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / per_channel;
            v * scale[c] + shift[c]
        })
        .collect()
}

fn maxpool(pool: Pool, x: &Tensor, out_shape: &[usize]) -> Vec<f32> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (c_n, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let xd = x.data();
    let mut out = Vec::with_capacity(c_n * oh * ow);
    for c in 0..c_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..pool.kernel {
                    for kx in 0..pool.kernel {
                        let v = xd[(c * h + oy * pool.stride + ky) * w + ox * pool.stride + kx];
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let c_n = x.shape()[0];
    let plane = x.len() / c_n;
    x.data()
        .chunks_exact(plane)
        .map(|ch| {
            let mut acc = 0.0f32;
            for &v in ch {
                acc += v;
            }
            acc / plane as f32
        })
        .collect()
}

fn dense(d: &Dense, x: &Tensor) -> Vec<f32> {
    let xd = x.data();
    (0..d.out_features)
        .map(|o| {
            let row = &d.weights[o * d.in_features..(o + 1) * d.in_features];
            let mut acc = d.bias[o];
            for (w, v) in row.iter().zip(xd) {
                acc += w * v;
            }
            acc
        })
        .collect()
}

fn softmax(x: &[f32]) -> Vec<f32> {
    let mut m = f32::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let exps: Vec<f32> = x.iter().map(|&v| (v - m).exp()).collect();
    let mut sum = 0.0f32;
    for &e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub layer_id: usize,
    pub flops: u64,
    pub cumulative: u64,
}

/// FLOP count per layer under a fixed convention: one multiply-accumulate is
/// two FLOPs, pointwise ops cost one per element (BatchNorm two, as a folded
/// scale and shift), comparisons count as FLOPs (ReLU, MaxPool, the max scan
/// in Softmax) and Flatten is free.
///
/// | kind          | FLOPs                               |
/// |---------------|-------------------------------------|
/// | Conv2D        | `oh*ow*oc * 2*ic*kh*kw`             |
/// | Dense m -> n  | `2*m*n`                             |
/// | BatchNorm     | `2*N`                               |
/// | ReLU, Add     | `N`                                 |
/// | MaxPool       | `out_N * k*k`                       |
/// | GlobalAvgPool | `in_N + C`                          |
/// | Softmax       | `5*N` (max, subtract, exp, sum, div)|
pub fn count_flops(model: &ModelGraph) -> Vec<LayerFlops> {
    let mut cumulative = 0u64;
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(id, layer)| {
            let out_n = model.output_elements(id) as u64;
            let in_n = match layer.inputs.first() {
                Some(&src) => model.output_elements(src) as u64,
                None => model.input_elements() as u64,
            };
            let flops = match &layer.kind {
                LayerKind::Conv2d(c) => {
                    out_n * 2 * (c.in_channels * c.kernel_h * c.kernel_w) as u64
                }
                LayerKind::Dense(d) => 2 * (d.in_features * d.out_features) as u64,
                LayerKind::BatchNorm(_) => 2 * out_n,
                LayerKind::Relu | LayerKind::Add => out_n,
                LayerKind::MaxPool(p) => out_n * (p.kernel * p.kernel) as u64,
                LayerKind::GlobalAvgPool => in_n + out_n,
                LayerKind::Softmax => 5 * out_n,
                LayerKind::Flatten => 0,
            };
            cumulative += flops;
            LayerFlops {
                layer_id: id,
                flops,
                cumulative,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Layer;

    fn single(kind: LayerKind, shape: Vec<usize>) -> ModelGraph {
        ModelGraph::new(shape, vec![Layer::new("l0", kind, vec![])]).unwrap()
    }

    fn ramp(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn one_by_one_identity_conv() {
        let conv = Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            weights: vec![1.0],
        };
        let m = single(LayerKind::Conv2d(conv), vec![1, 5, 4]);
        let x = ramp(vec![1, 5, 4]);
        assert!(infer(&m, &x).unwrap().bit_eq(&x));
    }

    #[test]
    fn relu_clamps_negatives() {
        let m = single(LayerKind::Relu, vec![3]);
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(infer(&m, &x).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_batchnorm() {
        let m = single(LayerKind::BatchNorm(BatchNorm::identity(2, 0.0)), vec![2, 3, 3]);
        let x = ramp(vec![2, 3, 3]);
        assert!(infer(&m, &x).unwrap().bit_eq(&x));
    }

    #[test]
    fn dense_flops() {
        let d = Dense {
            in_features: 32,
            out_features: 10,
            weights: vec![0.0; 320],
            bias: vec![0.0; 10],
        };
        let m = single(LayerKind::Dense(d), vec![32]);
        assert_eq!(count_flops(&m)[0].flops, 640);
    }

    #[test]
    fn softmax_sums_to_one() {
        let m = single(LayerKind::Softmax, vec![4]);
        let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = infer(&m, &x).unwrap();
        let s: f32 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(y.argmax(), 3);
    }

    #[test]
    fn rejects_shape_mismatch_and_non_finite() {
        let m = single(LayerKind::Relu, vec![3]);
        let bad = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        assert!(matches!(forward(&m, &bad), Err(Error::ShapeMismatch { .. })));
        let nan = Tensor::new(vec![3], vec![0.0, f32::NAN, 1.0]).unwrap();
        assert!(matches!(forward(&m, &nan), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn maxpool_and_gap() {
        let m = ModelGraph::new(
            vec![1, 4, 4],
            vec![
                Layer::new("pool", LayerKind::MaxPool(Pool { kernel: 2, stride: 2 }), vec![]),
                Layer::new("gap", LayerKind::GlobalAvgPool, vec![0]),
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f32).collect()).unwrap();
        let acts = forward(&m, &x).unwrap();
        assert_eq!(acts[0].data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(acts[1].data(), &[10.0]);
    }
}
