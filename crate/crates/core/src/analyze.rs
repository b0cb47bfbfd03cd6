//! Split-point scoring: head cost, cut size, compressibility and stability of
//! every valid split, and latency-ranked recommendations.

use std::io::Write;

use log::warn;

use crate::codec::entropy::{entropy_of_counts, histogram};
use crate::codec::{estimate_quant_params, quantize, CodecId, QuantParams};
use crate::error::{Error, Result};
use crate::exec::{count_flops, forward};
use crate::graph::ModelGraph;
use crate::tensor::Tensor;
use crate::zoo::{Perturbation, SyntheticSource, MIN_CALIBRATION};

/// Noise seed of the perturbed frames used by the stability metric.
pub const STABILITY_NOISE_SEED: u64 = 0x57AB;

/// Calibration frames used when none are requested explicitly.
pub const DEFAULT_PROFILE_FRAMES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub layer_id: usize,
    pub name: String,
    pub cumulative_flops: u64,
    pub output_bytes_f32: usize,
    pub output_bytes_u8: usize,
    /// Order-0 entropy of the 8-bit codes, bits per element.
    pub entropy_bits: f64,
    pub est_compressed_bytes: f64,
    pub stability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitProfiles {
    pub profiles: Vec<LayerProfile>,
    /// Set when every BatchNorm still has its initial statistics.
    pub uncalibrated: bool,
}

/// Entropy of the codes of `acts` under one interval fitted to all of them.
pub fn split_entropy(acts: &[&Tensor]) -> Result<(QuantParams, f64)> {
    let q = estimate_quant_params(acts.iter().copied())?;
    let mut counts = [0u64; 256];
    for t in acts {
        for (c, n) in counts.iter_mut().zip(histogram(&quantize(t, &q))) {
            *c += n;
        }
    }
    Ok((q, entropy_of_counts(&counts)))
}

/// `1 - min(1, |a - b| / (|a| + 1e-9))`.
pub fn pair_stability(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt();
    1.0 - (diff / (a.l2_norm() + 1e-9)).min(1.0)
}

/// Profiles every valid split over `calibration`, with perturbed frames from
/// [`Perturbation::frame_jitter`].
pub fn profile_splits(model: &ModelGraph, calibration: &SyntheticSource) -> Result<SplitProfiles> {
    profile_splits_with(model, calibration, &Perturbation::frame_jitter(STABILITY_NOISE_SEED))
}

pub fn profile_splits_with(
    model: &ModelGraph,
    calibration: &SyntheticSource,
    perturbation: &Perturbation,
) -> Result<SplitProfiles> {
    if calibration.count < MIN_CALIBRATION {
        return Err(Error::InvalidArgument(format!(
            "profiling needs at least {MIN_CALIBRATION} calibration inputs, got {}",
            calibration.count
        )));
    }
    let uncalibrated = model.batchnorms_at_init();
    if uncalibrated {
        warn!("batch-norm statistics are at their initial values; profiles describe an uncalibrated model");
    }
    let splits = model.split_points();
    // acts[s][n]: activation at splits[s] for calibration input n.
    let mut acts: Vec<Vec<Tensor>> = vec![Vec::with_capacity(calibration.count); splits.len()];
    let mut stability = vec![0f64; splits.len()];
    for n in 0..calibration.count {
        let (x, _) = calibration.sample(n)?;
        let (xp, _) = calibration.perturbed(n, perturbation)?;
        let mut a = forward(model, &x)?;
        let b = forward(model, &xp)?;
        for (s, &k) in splits.iter().enumerate() {
            stability[s] += pair_stability(&a[k], &b[k]);
            acts[s].push(std::mem::replace(&mut a[k], Tensor::from_parts(vec![1], vec![0.0])));
        }
    }
    let flops = count_flops(model);
    let mut profiles = Vec::with_capacity(splits.len());
    for (s, &k) in splits.iter().enumerate() {
        let refs: Vec<&Tensor> = acts[s].iter().collect();
        let (_, h) = split_entropy(&refs)?;
        let n = model.output_elements(k);
        profiles.push(LayerProfile {
            layer_id: k,
            name: model.layers()[k].name.clone(),
            cumulative_flops: flops[k].cumulative,
            output_bytes_f32: 4 * n,
            output_bytes_u8: n,
            entropy_bits: h,
            est_compressed_bytes: n as f64 * h / 8.0,
            stability: stability[s] / calibration.count as f64,
        });
    }
    Ok(SplitProfiles {
        profiles,
        uncalibrated,
    })
}

pub const PROFILE_CSV_HEADER: &str = "layer_id,layer_name,cum_flops,bytes_f32,bytes_u8,entropy_bits,est_bytes,stability";

pub fn write_profiles_csv<W: Write>(profiles: &[LayerProfile], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(PROFILE_CSV_HEADER.split(',')).map_err(io)?;
    for p in profiles {
        w.write_record([
            p.layer_id.to_string(),
            p.name.clone(),
            p.cumulative_flops.to_string(),
            p.output_bytes_f32.to_string(),
            p.output_bytes_u8.to_string(),
            format!("{:.6}", p.entropy_bits),
            format!("{:.3}", p.est_compressed_bytes),
            format!("{:.6}", p.stability),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn profiles_to_csv(profiles: &[LayerProfile]) -> String {
    let mut buf = Vec::new();
    write_profiles_csv(profiles, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitRecommendation {
    pub layer_id: usize,
    pub codec: CodecId,
    pub predicted_total_ms: f64,
    /// 1 = best.
    pub rank: usize,
}

/// Ranks splits by predicted latency with the entropy-coded size as upload,
/// ties broken by smaller `output_bytes_u8`, then lower layer id.
pub fn recommend_split(
    profiles: &[LayerProfile],
    rate_bps: f64,
    rtt_s: f64,
    timing: &crate::lab::TimingModel,
) -> Result<Vec<SplitRecommendation>> {
    if profiles.is_empty() {
        return Err(Error::Empty("split profiles"));
    }
    if !(rate_bps > 0.0) {
        return Err(Error::InvalidArgument(format!("rate must be positive, got {rate_bps}")));
    }
    let mut scored: Vec<(f64, &LayerProfile)> = profiles
        .iter()
        .map(|p| {
            let k = p.layer_id;
            let t = timing.t_head(k) + rtt_s + p.est_compressed_bytes / rate_bps + timing.t_tail(k);
            (t * 1e3, p)
        })
        .collect();
    scored.sort_by(|(ta, a), (tb, b)| {
        ta.total_cmp(tb)
            .then(a.output_bytes_u8.cmp(&b.output_bytes_u8))
            .then(a.layer_id.cmp(&b.layer_id))
    });
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (ms, p))| SplitRecommendation {
            layer_id: p.layer_id,
            codec: CodecId::U8QuantHuffman,
            predicted_total_ms: ms,
            rank: i + 1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn uniform_codes_have_eight_bits() {
        let mut rng = SplitMix64::new(3);
        let t = Tensor::new(vec![65536], (0..65536).map(|_| rng.next_f64() as f32).collect()).unwrap();
        let (_, h) = split_entropy(&[&t]).unwrap();
        // The 3-sigma interval of a uniform variable spans beyond its support,
        // so only the codes inside are used; check the codes directly instead.
        assert!(h <= 8.0);
        let codes: Vec<u8> = (0..65536).map(|_| rng.next_u64() as u8).collect();
        let h = crate::codec::order0_entropy(&codes);
        assert!((h - 8.0).abs() < 0.05, "{h}");
    }

    #[test]
    fn identical_tensors_are_fully_stable() {
        let t = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(pair_stability(&t, &t), 1.0);
        let z = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert_eq!(pair_stability(&z, &t), 0.0);
    }
}
