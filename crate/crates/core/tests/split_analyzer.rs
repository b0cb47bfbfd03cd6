mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use splitwire::analyze::{
    profile_splits, profile_splits_with, profiles_to_csv, recommend_split, LayerProfile, SplitProfiles,
    PROFILE_CSV_HEADER,
};
use splitwire::graph::LayerKind;
use splitwire::lab::{TimingConfig, TimingModel};
use splitwire::zoo::{build_microresnet, Perturbation, SyntheticSource, REFERENCE_SEED};

use common::reference;

fn profiles() -> &'static SplitProfiles {
    static P: OnceLock<SplitProfiles> = OnceLock::new();
    P.get_or_init(|| profile_splits(&reference(), &SyntheticSource::new(REFERENCE_SEED, 16)).unwrap())
}

fn timing_with(client: Vec<f64>, server: Vec<f64>) -> TimingModel {
    TimingModel::from_layer_times(&reference(), client, server, &TimingConfig::default()).unwrap()
}

#[test]
fn one_profile_per_valid_split_with_consistent_sizes() {
    let model = reference();
    let p = profiles();
    assert!(!p.uncalibrated);
    let ids: Vec<usize> = p.profiles.iter().map(|l| l.layer_id).collect();
    assert_eq!(ids, model.split_points());
    for l in &p.profiles {
        assert_eq!(l.output_bytes_f32, 4 * l.output_bytes_u8);
        assert_eq!(l.output_bytes_u8, model.output_elements(l.layer_id));
        assert!((0.0..=8.0).contains(&l.entropy_bits), "{l:?}");
        assert!((0.0..=1.0).contains(&l.stability), "{l:?}");
        assert!(l.est_compressed_bytes <= l.output_bytes_u8 as f64);
        assert!((l.est_compressed_bytes - l.output_bytes_u8 as f64 * l.entropy_bits / 8.0).abs() < 1e-9);
    }
    for w in p.profiles.windows(2) {
        assert!(w[1].cumulative_flops > w[0].cumulative_flops, "{} -> {}", w[0].name, w[1].name);
    }
}

#[test]
fn post_batchnorm_codes_are_not_uniform() {
    let model = reference();
    let bn: Vec<&LayerProfile> = profiles()
        .profiles
        .iter()
        .filter(|l| matches!(model.layers()[l.layer_id].kind, LayerKind::BatchNorm(_)))
        .collect();
    assert!(!bn.is_empty());
    for l in bn {
        assert!(l.entropy_bits < 8.0, "{l:?}");
    }
}

#[test]
fn identical_frames_are_perfectly_stable() {
    let p = profile_splits_with(&reference(), &SyntheticSource::new(5, 16), &Perturbation::default()).unwrap();
    assert!(p.profiles.iter().all(|l| l.stability == 1.0));
}

#[test]
fn csv_is_byte_identical_across_runs() {
    let again = profile_splits(&reference(), &SyntheticSource::new(REFERENCE_SEED, 16)).unwrap();
    let (a, b) = (profiles_to_csv(&profiles().profiles), profiles_to_csv(&again.profiles));
    assert_eq!(a, b);
    assert_eq!(a.lines().next(), Some(PROFILE_CSV_HEADER));
    assert_eq!(a.lines().count(), 1 + reference().split_points().len());
}

#[test]
fn small_calibration_is_rejected_and_uncalibrated_is_flagged() {
    assert!(profile_splits(&reference(), &SyntheticSource::new(1, 15)).is_err());
    let raw = build_microresnet(REFERENCE_SEED);
    assert!(profile_splits(&raw, &SyntheticSource::new(1, 16)).unwrap().uncalibrated);
}

#[test]
fn recommendation_limits() {
    let model = reference();
    let flops = splitwire::exec::count_flops(&model);
    // Head compute is cheap per FLOP, tail expensive, so the optimum is nontrivial.
    let client: Vec<f64> = flops.iter().map(|f| f.flops as f64 * 1e-9).collect();
    let server: Vec<f64> = flops.iter().map(|f| f.flops as f64 * 3e-9).collect();
    let timing = timing_with(client, server);
    let p = &profiles().profiles;

    let fast = recommend_split(p, 1e15, 0.005, &timing).unwrap();
    let compute_best = p
        .iter()
        .min_by(|a, b| {
            let ca = timing.t_head(a.layer_id) + timing.t_tail(a.layer_id);
            let cb = timing.t_head(b.layer_id) + timing.t_tail(b.layer_id);
            ca.total_cmp(&cb)
        })
        .unwrap();
    assert_eq!(fast[0].layer_id, compute_best.layer_id);

    let slow = recommend_split(p, 1e-3, 0.005, &timing).unwrap();
    let smallest = p
        .iter()
        .min_by(|a, b| a.est_compressed_bytes.total_cmp(&b.est_compressed_bytes))
        .unwrap();
    assert_eq!(slow[0].layer_id, smallest.layer_id);

    for r in [&fast, &slow] {
        assert_eq!(r.len(), p.len());
        assert!(r.windows(2).all(|w| w[0].predicted_total_ms <= w[1].predicted_total_ms));
        assert!(r.iter().enumerate().all(|(i, s)| s.rank == i + 1));
    }
    assert!(recommend_split(p, 0.0, 0.005, &timing).is_err());
    assert!(recommend_split(&[], 1e6, 0.005, &timing).is_err());
}

#[test]
fn ties_prefer_smaller_tensors_then_lower_ids() {
    let model = reference();
    let zeros = vec![0.0; model.len()];
    let timing = timing_with(zeros.clone(), zeros);
    let mk = |id: usize, bytes: usize| LayerProfile {
        layer_id: id,
        name: format!("l{id}"),
        cumulative_flops: id as u64,
        output_bytes_f32: 4 * bytes,
        output_bytes_u8: bytes,
        entropy_bits: 0.0,
        est_compressed_bytes: 0.0,
        stability: 1.0,
    };
    let p = vec![mk(9, 500), mk(2, 100), mk(8, 100), mk(0, 300)];
    let r = recommend_split(&p, 1e6, 0.005, &timing).unwrap();
    let order: Vec<usize> = r.iter().map(|s| s.layer_id).collect();
    assert_eq!(order, [2, 8, 0, 9]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn doubling_compute_keeps_the_order(seed in any::<u64>()) {
        let model = reference();
        let mut rng = splitwire::rng::SplitMix64::new(seed);
        let client: Vec<f64> = (0..model.len()).map(|_| rng.next_f64() * 1e-3).collect();
        let server: Vec<f64> = (0..model.len()).map(|_| rng.next_f64() * 1e-3).collect();
        let twice = |v: &[f64]| v.iter().map(|x| 2.0 * x).collect::<Vec<f64>>();
        let a = timing_with(client.clone(), server.clone());
        let b = timing_with(twice(&client), twice(&server));
        let p = &profiles().profiles;
        let ra: Vec<usize> = recommend_split(p, f64::INFINITY, 0.0, &a).unwrap().iter().map(|s| s.layer_id).collect();
        let rb: Vec<usize> = recommend_split(p, f64::INFINITY, 0.0, &b).unwrap().iter().map(|s| s.layer_id).collect();
        prop_assert_eq!(ra, rb);
    }
}
