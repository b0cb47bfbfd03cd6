mod common;

use proptest::prelude::*;
use splitwire::codec::entropy::{histogram, payload_bits, code_lengths, HEADER_LEN};
use splitwire::codec::{
    decode_frame, decode_payload, dequantize, encode_frame, encode_payload, entropy_decode, entropy_encode,
    estimate_quant_params, order0_entropy, quantize, CodecId, QuantMode, QuantParams, TensorFrame,
};
use splitwire::exec::forward;
use splitwire::rng::SplitMix64;
use splitwire::Tensor;

use common::{random_tensor, reference, shannon_entropy as entropy};

fn payload_bit_count(data: &[u8]) -> u64 {
    let counts = histogram(data);
    payload_bits(&counts, &code_lengths(&counts))
}

#[test]
fn grid_scan_error_is_at_most_half_a_step() {
    for (lo, hi) in [(-3.0f32, 3.0f32), (-0.7, 2.9), (0.0, 1.0), (-1234.5, 987.25), (1e-3, 2e-3)] {
        let q = QuantParams::from_interval(lo, hi).unwrap();
        let bound = (f64::from(hi) - f64::from(lo)) / 510.0;
        let n = 100_000;
        for i in 0..n {
            let x = (f64::from(lo) + (f64::from(hi) - f64::from(lo)) * i as f64 / (n - 1) as f64) as f32;
            let x = x.clamp(lo, hi);
            let back = q.dequantize_value(q.quantize_value(x));
            let err = (f64::from(x) - f64::from(back)).abs();
            assert!(err <= bound, "[{lo}, {hi}] x={x}: err {err} > {bound}");
        }
        for code in 0..=255u8 {
            assert_eq!(q.quantize_value(q.dequantize_value(code)), code, "[{lo}, {hi}] code {code}");
        }
    }
}

#[test]
fn quantizer_reference_points() {
    let q = QuantParams::from_interval(-3.0, 3.0).unwrap();
    let x = Tensor::new(vec![5], vec![-3.0, 3.0, 10.0, -10.0, 0.0]).unwrap();
    assert_eq!(quantize(&x, &q), vec![0, 255, 255, 0, 128]);
    let back = dequantize(&[0, 255], &[2], &q).unwrap();
    assert_eq!(back.data(), &[-3.0, 3.0]);
    assert!(dequantize(&[0, 1, 2], &[2], &q).is_err());

    let c = Tensor::new(vec![4], vec![2.5; 4]).unwrap();
    let qc = estimate_quant_params([&c]).unwrap();
    assert_eq!((qc.lo(), qc.hi(), qc.sigma()), (2.5, 2.5, 0.0));
    assert_eq!(quantize(&c, &qc), vec![0; 4]);
    assert_eq!(dequantize(&[0, 7], &[2], &qc).unwrap().data(), &[2.5, 2.5]);

    let pm = Tensor::new(vec![4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
    let q = estimate_quant_params([&pm]).unwrap();
    assert_eq!((q.mu(), q.sigma(), q.lo(), q.hi()), (0.0, 1.0, -3.0, 3.0));
}

#[test]
fn three_sigma_holds_over_99_percent_of_a_normal_sample() {
    let mut rng = SplitMix64::new(0x3516);
    let values: Vec<f32> = (0..100_000).map(|_| rng.next_normal() as f32).collect();
    let t = Tensor::new(vec![values.len()], values).unwrap();
    let q = estimate_quant_params([&t]).unwrap();
    let outside = t.data().iter().filter(|&&v| v < q.lo() || v > q.hi()).count();
    assert!(outside as f64 / t.len() as f64 <= 0.01, "{outside}");
}

#[test]
fn u8_payload_is_a_quarter_of_f32_at_every_split() {
    let model = reference();
    let x = random_tensor(&mut SplitMix64::new(5), model.input_shape());
    let acts = forward(&model, &x).unwrap();
    for &k in model.split_points() {
        let n = acts[k].len();
        let (raw, _) = encode_payload(&acts[k], CodecId::Float32Raw, QuantMode::Empirical).unwrap();
        let (u8s, _) = encode_payload(&acts[k], CodecId::U8Quant, QuantMode::Empirical).unwrap();
        assert_eq!((raw.len(), u8s.len()), (4 * n, n));
    }
}

#[test]
fn huffman_shrinks_post_batchnorm_codes() {
    let model = reference();
    let source = splitwire::zoo::SyntheticSource::new(splitwire::zoo::REFERENCE_SEED, 8);
    let mut checked = 0;
    for (x, _) in source.iter() {
        let acts = forward(&model, &x).unwrap();
        for (k, layer) in model.layers().iter().enumerate() {
            if !matches!(layer.kind, splitwire::graph::LayerKind::BatchNorm(_)) {
                continue;
            }
            let (u8s, _) = encode_payload(&acts[k], CodecId::U8Quant, QuantMode::Empirical).unwrap();
            let (huff, _) = encode_payload(&acts[k], CodecId::U8QuantHuffman, QuantMode::Empirical).unwrap();
            assert!(huff.len() <= u8s.len() + 260, "{}", layer.name);
            if u8s.len() >= 4096 {
                assert!(huff.len() < u8s.len(), "{}: {} vs {}", layer.name, huff.len(), u8s.len());
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn single_symbol_stream_layout() {
    let enc = entropy_encode(&[0u8; 100]).unwrap();
    assert_eq!(enc.len(), HEADER_LEN + 13);
    assert_eq!(enc.len(), 273);
    assert_eq!(entropy_decode(&enc).unwrap(), vec![0u8; 100]);
}

/// Buffers with low, skewed or periodic entropy.
fn structured(i: usize) -> Vec<u8> {
    let mut rng = SplitMix64::new(i as u64);
    let n = 1 + rng.below(5000) as usize;
    match i % 5 {
        0 => vec![(i % 256) as u8; n],
        1 => (0..n).map(|j| (j % (1 + i % 17)) as u8).collect(),
        2 => (0..n).map(|_| (rng.next_normal() * 4.0 + 128.0).clamp(0.0, 255.0) as u8).collect(),
        3 => (0..n).map(|_| if rng.below(100) < 97 { 0 } else { rng.below(256) as u8 }).collect(),
        _ => (0..n).map(|j| ((j * j) % 251) as u8).collect(),
    }
}

fn check_stream(data: &[u8]) {
    let enc = entropy_encode(data).unwrap();
    assert_eq!(entropy_decode(&enc).unwrap(), data);
    let n = data.len() as f64;
    let h = entropy(data);
    let bits = payload_bit_count(data) as f64;
    // A single distinct symbol still costs one bit per symbol.
    let upper = if h == 0.0 { n } else { n * (h + 1.0) };
    assert!(bits >= n * h - 1e-6 && bits <= upper + 1e-6, "n={n} H={h} bits={bits}");
    assert_eq!(enc.len(), HEADER_LEN + (bits as usize).div_ceil(8));
    assert!((order0_entropy(data) - h).abs() < 1e-9);
}

#[test]
fn structured_buffers_round_trip_within_bounds() {
    for i in 0..100 {
        check_stream(&structured(i));
    }
}

#[test]
fn frame_container_round_trips() {
    let model = reference();
    let x = random_tensor(&mut SplitMix64::new(6), model.input_shape());
    let acts = forward(&model, &x).unwrap();
    let k = model.layer_id("b2_relu").unwrap();
    for codec in CodecId::ALL {
        let (payload, quant) = encode_payload(&acts[k], codec, QuantMode::Empirical).unwrap();
        let frame = TensorFrame {
            frame_id: 99,
            split_layer: k as u16,
            codec,
            shape: acts[k].shape().to_vec(),
            quant,
            payload,
        };
        let bytes = encode_frame(&frame);
        assert_eq!(bytes.len(), frame.wire_len());
        let back = decode_frame(&bytes).unwrap();
        assert_eq!(back, frame);
        let t = decode_payload(&back.payload, &back.shape, codec, back.quant.as_ref()).unwrap();
        if codec == CodecId::Float32Raw {
            assert!(t.bit_eq(&acts[k]));
        } else {
            let half = back.quant.unwrap().step() / 2.0;
            let q = back.quant.unwrap();
            for (a, b) in acts[k].data().iter().zip(t.data()) {
                let clipped = a.clamp(q.lo(), q.hi());
                assert!(f64::from((clipped - b).abs()) <= half + 1e-6);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_buffers_round_trip_within_bounds(data in prop::collection::vec(any::<u8>(), 1..4096)) {
        check_stream(&data);
    }

    #[test]
    fn quantized_values_stay_within_half_step(
        mu in -50.0f32..50.0,
        sigma in 0.001f32..20.0,
        xs in prop::collection::vec(-200.0f32..200.0, 1..64),
    ) {
        let q = QuantParams::from_moments(mu, sigma).unwrap();
        let bound = (f64::from(q.hi()) - f64::from(q.lo())) / 510.0;
        for x in xs {
            let c = x.clamp(q.lo(), q.hi());
            let err = (f64::from(c) - f64::from(q.dequantize_value(q.quantize_value(x)))).abs();
            prop_assert!(err <= bound, "x={} err={} bound={}", x, err, bound);
        }
    }
}
