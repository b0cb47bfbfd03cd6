//! Acceptance run: one PASS/FAIL line per criterion, every criterion runs
//! even if an earlier one fails. Exits non-zero if any criterion fails.

mod common;

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use splitwire::codec::entropy::{code_lengths, histogram, payload_bits};
use splitwire::codec::{
    decode_payload, encode_payload, entropy_decode, entropy_encode, estimate_quant_params, CodecId, QuantMode,
    QuantParams,
};
use splitwire::exec::{forward, run_head, run_tail};
use splitwire::lab::{
    find_crossover, measure_layer_times, parse_rate_range, predict_total, run_pipelined, run_sweep, Mode,
    SweepConfig, TimingConfig, TimingModel,
};
use splitwire::rng::SplitMix64;
use splitwire::transport::wire::{Hello, ResultFrame, VERSION};
use splitwire::transport::{
    decode_message, encode_message, prepare_frame, serve, serve_stream, Compute, LinkModel, Message, Split,
    TcpClient, KB,
};
use splitwire::zoo::{SyntheticSource, REFERENCE_SEED};
use splitwire::{ModelGraph, Tensor};

use common::{random_tensor, reference, shannon_entropy};

static PANICS: AtomicUsize = AtomicUsize::new(0);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

// ---------------------------------------------------------------------------

fn split_equivalence(model: &ModelGraph) -> Outcome {
    let started = Instant::now();
    let mut rng = SplitMix64::new(0x5E11);
    let last = model.last_id();
    let splits = model.split_points();
    let mut mismatches = Vec::new();
    for n in 0..100 {
        let x = random_tensor(&mut rng, model.input_shape());
        let full = forward(model, &x).unwrap();
        for &k in splits {
            let head = run_head(model, &x, k).unwrap();
            let tail = run_tail(model, &head, k).unwrap();
            if !head.bit_eq(&full[k]) || !tail.bit_eq(&full[last]) {
                mismatches.push((n, k));
            }
        }
    }
    let elapsed = started.elapsed();
    outcome(
        mismatches.is_empty() && elapsed < Duration::from_secs(10),
        format!(
            "100 inputs x {} splits, {} mismatches, {} (limit 10 s)",
            splits.len(),
            mismatches.len(),
            secs(elapsed)
        ),
    )
}

fn quantizer_bounds() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut violations = 0usize;
    let mut unstable_codes = 0usize;
    for (lo, hi) in [(-3.0f32, 3.0f32), (-0.37, 4.11), (0.0, 1.0), (-812.5, 64.25)] {
        let q = QuantParams::from_interval(lo, hi).unwrap();
        let bound = (f64::from(hi) - f64::from(lo)) / 510.0;
        let n = 100_000;
        for i in 0..n {
            let x = (f64::from(lo) + (f64::from(hi) - f64::from(lo)) * i as f64 / (n - 1) as f64) as f32;
            let x = x.clamp(lo, hi);
            let err = (f64::from(x) - f64::from(q.dequantize_value(q.quantize_value(x)))).abs();
            worst = worst.max(err / bound);
            if err > bound {
                violations += 1;
            }
        }
        unstable_codes += (0..=255u8)
            .filter(|&c| q.quantize_value(q.dequantize_value(c)) != c)
            .count();
    }
    let elapsed = started.elapsed();
    outcome(
        violations == 0 && unstable_codes == 0 && elapsed < Duration::from_secs(1),
        format!(
            "4 intervals x 1e5 grid points, worst error {:.4} of half step, {violations} violations, \
             {unstable_codes} codes not fixed, {} (limit 1 s)",
            worst,
            secs(elapsed)
        ),
    )
}

fn four_x_reduction(model: &ModelGraph) -> Outcome {
    let x = random_tensor(&mut SplitMix64::new(0x4), model.input_shape());
    let acts = forward(model, &x).unwrap();
    let mut bad = Vec::new();
    for &k in model.split_points() {
        let n = acts[k].len();
        let (f, _) = encode_payload(&acts[k], CodecId::Float32Raw, QuantMode::Empirical).unwrap();
        let (u, _) = encode_payload(&acts[k], CodecId::U8Quant, QuantMode::Empirical).unwrap();
        if f.len() != 4 * n || u.len() != n {
            bad.push(k);
        }
    }
    outcome(
        bad.is_empty(),
        format!("u8 = N and f32 = 4N bytes at {} splits, failures at {bad:?}", model.split_points().len()),
    )
}

fn three_sigma_coverage() -> Outcome {
    let mut rng = SplitMix64::new(0x3516);
    let n = 100_000;
    let t = Tensor::new(vec![n], (0..n).map(|_| rng.next_normal() as f32).collect()).unwrap();
    let q = estimate_quant_params([&t]).unwrap();
    let outside = t.data().iter().filter(|&&v| v < q.lo() || v > q.hi()).count();
    let frac = outside as f64 / n as f64;
    outcome(frac <= 0.01, format!("{n} normal samples, {:.3}% outside [mu-3s, mu+3s] (limit 1%)", frac * 100.0))
}

fn entropy_coder() -> Outcome {
    let mut rng = SplitMix64::new(0xE27);
    let mut buffers: Vec<Vec<u8>> = Vec::with_capacity(1100);
    for _ in 0..1000 {
        let len = 1 + rng.below(4096) as usize;
        let alphabet = 1 + rng.below(256);
        let skewed = rng.below(2) == 0;
        buffers.push(
            (0..len)
                .map(|_| {
                    if skewed {
                        let u = rng.next_f64();
                        ((u * u) * alphabet as f64) as u8
                    } else {
                        rng.below(alphabet) as u8
                    }
                })
                .collect(),
        );
    }
    for i in 0..100usize {
        let len = 1 + (i * 97) % 5000;
        buffers.push(match i % 4 {
            0 => vec![(i * 7 % 256) as u8; len],
            1 => (0..len).map(|j| (j % (2 + i % 30)) as u8).collect(),
            2 => (0..len).map(|j| if j % 50 == 0 { 255 } else { 0 }).collect(),
            _ => (0..len).map(|j| ((j / (1 + i % 9)) % 256) as u8).collect(),
        });
    }
    let (mut lossy, mut out_of_bounds) = (0, 0);
    for d in &buffers {
        let enc = entropy_encode(d).unwrap();
        if entropy_decode(&enc).ok().as_deref() != Some(d.as_slice()) {
            lossy += 1;
        }
        let counts = histogram(d);
        let bits = payload_bits(&counts, &code_lengths(&counts)) as f64;
        let (n, h) = (d.len() as f64, shannon_entropy(d));
        // A single-symbol buffer still costs one bit per symbol.
        let upper = if h == 0.0 { n } else { n * (h + 1.0) };
        if bits < n * h - 1e-6 || bits > upper + 1e-6 {
            out_of_bounds += 1;
        }
    }
    outcome(
        lossy == 0 && out_of_bounds == 0,
        format!(
            "1000 random + 100 structured buffers, {lossy} lossy, {out_of_bounds} outside [N*H, N*(H+1)]"
        ),
    )
}

fn sweep(model: &Arc<ModelGraph>) -> Outcome {
    let started = Instant::now();
    let calib: Vec<Tensor> = SyntheticSource::new(REFERENCE_SEED, 8).iter().map(|(t, _)| t).collect();
    let layer_s = measure_layer_times(model, &calib, 3).unwrap();
    let timing = TimingModel::from_layer_times(model, layer_s.clone(), layer_s, &TimingConfig::default()).unwrap();
    let k = model.layer_id("b1_relu").unwrap();
    let f32m = Mode::Shared(CodecId::Float32Raw);
    let u8m = Mode::Shared(CodecId::U8Quant);
    let cfg = SweepConfig {
        rates_kbps: parse_rate_range("50..3000:50").unwrap(),
        modes: vec![Mode::MobileOnly, Mode::CloudOnly, f32m, u8m],
        split: k,
        frames: 3,
    };
    let result = run_sweep(model, &timing, &SyntheticSource::new(7, 8), &cfg).unwrap();
    let elapsed = started.elapsed();

    let worst_rel = result
        .rows
        .iter()
        .map(|r| (r.measured_ms.unwrap() - r.predicted_ms).abs() / r.predicted_ms)
        .fold(0.0f64, f64::max);
    let series = |m: Mode| result.rows_for(m).map(|r| r.measured_ms.unwrap()).collect::<Vec<f64>>();
    let (mobile, cloud, sf, su) = (series(Mode::MobileOnly), series(Mode::CloudOnly), series(f32m), series(u8m));
    let flat = mobile.windows(2).all(|w| w[0] == w[1]);
    let monotone = [&cloud, &sf, &su].iter().all(|s| s.windows(2).all(|w| w[1] <= w[0]));
    let u8_beats_cloud = su.iter().zip(&cloud).all(|(s, c)| s <= c);
    let (lo, hi) = (50.0 * KB, 3000.0 * KB);
    let cross = |m: Mode| find_crossover(m, Mode::MobileOnly, k, &timing, lo, hi).unwrap();
    let inside = |r: Option<f64>| r.is_some_and(|r| r > lo && r < hi);
    let (xf, xu) = (cross(f32m), cross(u8m));
    let fmt = |r: Option<f64>| r.map_or("none".to_string(), |r| format!("{:.1} KB/s", r / KB));
    outcome(
        worst_rel <= 0.01
            && flat
            && monotone
            && u8_beats_cloud
            && (inside(xf) || inside(xu))
            && elapsed < Duration::from_secs(60),
        format!(
            "{} rows, worst |meas-pred|/pred {:.2e}, mobile flat {flat}, monotone {monotone}, \
             shared_u8 <= cloud_only {u8_beats_cloud}, crossover vs mobile: f32 {} u8 {} \
             (head {:.2} ms + tail {:.2} ms at b1_relu), {} (limit 60 s)",
            result.rows.len(),
            worst_rel,
            fmt(xf),
            fmt(xu),
            timing.t_head(k) * 1e3,
            timing.t_tail(k) * 1e3,
            secs(elapsed)
        ),
    )
}

fn crossover_solver() -> Outcome {
    let mut rng = SplitMix64::new(0xB15E);
    let u8m = Mode::Shared(CodecId::U8Quant);
    let (mut worst, mut disagreements, mut crossings) = (0.0f64, 0, 0);
    for _ in 0..20 {
        let mut r = |lo: f64, hi: f64| lo + rng.next_f64() * (hi - lo);
        let upload = r(1_000.0, 200_000.0);
        let t = TimingModel {
            client_layer_s: vec![r(0.001, 0.150), 0.0],
            server_layer_s: vec![0.0, r(0.0, 0.030)],
            upload_bytes: vec![[4.0 * upload, upload, upload], [0.0; 3]],
            rtt_s: r(0.001, 0.020),
            t_mobile_full_s: r(0.050, 0.250),
            t_server_full_s: r(0.005, 0.040),
            input_bytes: r(5_000.0, 300_000.0),
        };
        for (a, b) in [(u8m, Mode::MobileOnly), (Mode::CloudOnly, Mode::MobileOnly)] {
            let bisect = find_crossover(a, b, 0, &t, 50.0 * KB, 3000.0 * KB).unwrap();
            let brute = (50..=3000u32)
                .map(|r| f64::from(r) * KB)
                .find(|&r| predict_total(a, 0, &t, r).unwrap() <= predict_total(b, 0, &t, r).unwrap());
            match (bisect, brute) {
                (Some(x), Some(y)) => {
                    crossings += 1;
                    worst = worst.max((x - y).abs() / KB);
                    if (x - y).abs() > KB {
                        disagreements += 1;
                    }
                }
                (None, None) => {}
                _ => disagreements += 1,
            }
        }
    }
    outcome(
        disagreements == 0,
        format!(
            "20 random timing models x 2 mode pairs, {crossings} crossings, worst gap {worst:.3} KB/s \
             (limit 1 KB/s), {disagreements} disagreements"
        ),
    )
}

fn pipelining(model: &Arc<ModelGraph>) -> Outcome {
    let k = model.layer_id("b1_relu").unwrap();
    let src = SyntheticSource::new(11, 16);
    let (mut configs, mut slower, mut off) = (0, 0, 0);
    let mut worst = 0.0f64;
    for head_ms in [5u64, 40, 80, 120] {
        for tail_ms in [0u64, 10, 40] {
            for rate_kbps in [100.0, 800.0, 3000.0] {
                for codec in [CodecId::Float32Raw, CodecId::U8Quant] {
                    let link = LinkModel::simulated(rate_kbps * KB, Duration::from_millis(5)).unwrap();
                    let compute = Compute::Fixed {
                        head: Duration::from_millis(head_ms),
                        tail: Duration::from_millis(tail_ms),
                    };
                    let r = run_pipelined(model, &src, link, Split::After(k), codec, 10, compute).unwrap();
                    configs += 1;
                    if r.fps_pipelined() < r.fps_sequential() {
                        slower += 1;
                    }
                    let rel = (r.fps_pipelined() - 1.0 / r.predicted_period_s).abs() * r.predicted_period_s;
                    worst = worst.max(rel);
                    if rel > 0.01 {
                        off += 1;
                    }
                }
            }
        }
    }
    outcome(
        slower == 0 && off == 0,
        format!(
            "{configs} configs, {slower} with pipelined < sequential fps, worst |fps - 1/max(stage)| \
             {:.2e} relative (limit 1%)",
            worst
        ),
    )
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn argmax_preservation(model: &ModelGraph) -> Outcome {
    let splits = model.split_points();
    let last = model.last_id();
    let mut agree = vec![0usize; splits.len()];
    let source = SyntheticSource::new(REFERENCE_SEED, 256);
    for (x, _) in source.iter() {
        let acts = forward(model, &x).unwrap();
        let float_top = argmax(acts[last].data());
        for (s, &k) in splits.iter().enumerate() {
            let (payload, q) = encode_payload(&acts[k], CodecId::U8Quant, QuantMode::Empirical).unwrap();
            let cut = decode_payload(&payload, acts[k].shape(), CodecId::U8Quant, q.as_ref()).unwrap();
            if argmax(run_tail(model, &cut, k).unwrap().data()) == float_top {
                agree[s] += 1;
            }
        }
    }
    let need = (0.95 * source.count as f64).ceil() as usize;
    let failing: Vec<String> = splits
        .iter()
        .zip(&agree)
        .filter(|(_, &a)| a < need)
        .map(|(&k, &a)| format!("{} {a}/256", model.layers()[k].name))
        .collect();
    let min = agree.iter().min().copied().unwrap_or(0);
    outcome(
        failing.is_empty(),
        format!(
            "256 calibration inputs x {} splits, need >= {need}/256 each, minimum {min}/256; below threshold: [{}]",
            splits.len(),
            failing.join(", ")
        ),
    )
}

/// Corruptions that never repair the checksum.
fn mutate(rng: &mut SplitMix64, msg: &[u8]) -> Vec<u8> {
    let mut m = msg.to_vec();
    match rng.below(6) {
        0 => {
            for _ in 0..1 + rng.below(8) {
                let bit = rng.below(m.len() as u64 * 8) as usize;
                m[bit / 8] ^= 1 << (bit % 8);
            }
        }
        1 => m.truncate(rng.below(m.len() as u64) as usize),
        2 => {
            let i = rng.below(m.len() as u64) as usize;
            let old = m[i];
            while m[i] == old {
                m[i] = rng.below(256) as u8;
            }
        }
        3 => {
            // Inside the message: bytes appended after an intact message are
            // a separate (bad) message, not a corruption of this one.
            let i = rng.below(m.len() as u64) as usize;
            let extra: Vec<u8> = (0..1 + rng.below(16)).map(|_| rng.below(256) as u8).collect();
            m.splice(i..i, extra);
        }
        4 => {
            let i = rng.below(m.len() as u64) as usize;
            let n = (1 + rng.below(16) as usize).min(m.len() - i);
            m.drain(i..i + n);
        }
        _ => {
            // Length-bearing header fields (dims, payload length) inflated.
            let i = 12 + rng.below(12) as usize;
            if i < m.len() {
                m[i] = m[i].wrapping_add(1 + rng.below(255) as u8);
            } else {
                m.pop();
            }
        }
    }
    if m == msg {
        m.pop();
    }
    m
}

/// Complete messages at the front of `bytes`; a reset connection may cut
/// the last one short.
fn replies(bytes: &[u8]) -> Vec<Message> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Ok((m, used)) = decode_message(&bytes[pos..]) {
        out.push(m);
        pos += used;
    }
    out
}

fn protocol_robustness(model: &Arc<ModelGraph>) -> Outcome {
    let hello = encode_message(&Message::Hello(Hello {
        protocol_version: VERSION,
        model_hash: model.model_hash(),
    }));
    let mut rng = SplitMix64::new(0xF022);
    let mut originals: Vec<Vec<u8>> = Vec::new();
    for (i, name) in ["input", "b2_relu", "b3_relu", "gap", "fc", "softmax"].iter().enumerate() {
        let split = Split::parse(model, name).unwrap();
        let x = random_tensor(&mut rng, model.input_shape());
        for codec in CodecId::ALL {
            originals.push(prepare_frame(model, &x, split, codec, QuantMode::Empirical, i as u32).unwrap().bytes);
        }
    }
    let result_msg = encode_message(&Message::Result(ResultFrame {
        frame_id: 1,
        server_compute_us: 5,
        top_k: vec![(1, 0.5)],
    }));

    let total = 10_000;
    let over_tcp = 500;
    let (mut leaked_results, mut garbage) = (0, 0);
    let panics_before = PANICS.load(Ordering::SeqCst);
    let server = serve(model.clone(), "127.0.0.1:0").unwrap();
    for n in 0..total {
        let bad = match n % 20 {
            0 => {
                garbage += 1;
                (0..1 + rng.below(64)).map(|_| rng.below(256) as u8).collect()
            }
            1 => mutate(&mut rng, &result_msg),
            _ => {
                let i = rng.below(originals.len() as u64) as usize;
                mutate(&mut rng, &originals[i])
            }
        };
        let mut stream = hello.clone();
        stream.extend_from_slice(&bad);
        let bytes = if n < over_tcp {
            tcp_exchange(server.local_addr(), &stream)
        } else {
            let mut out = Vec::new();
            let model = model.clone();
            let _ = catch_unwind(AssertUnwindSafe(|| serve_stream(model, &mut stream.as_slice(), &mut out)));
            out
        };
        if replies(&bytes).iter().any(|m| matches!(m, Message::Result(_))) {
            leaked_results += 1;
        }
    }
    // Handler threads of the TCP server panic out of sight; the hook counts them.
    let panics = PANICS.load(Ordering::SeqCst) - panics_before;
    // The server must still be serving after the abuse.
    let alive = TcpClient::connect(server.local_addr(), model.clone(), f64::INFINITY, Duration::from_secs(10))
        .and_then(|mut c| {
            let x = random_tensor(&mut SplitMix64::new(1), model.input_shape());
            c.infer(&x, Split::Input, CodecId::Float32Raw)
        })
        .is_ok();
    outcome(
        panics == 0 && leaked_results == 0 && alive,
        format!(
            "{total} corrupted messages ({over_tcp} over TCP, {garbage} pure garbage), {panics} crashes, \
             {leaked_results} ResultFrames for corrupted input, server alive afterwards {alive}"
        ),
    )
}

/// Sends `stream` and collects whatever the server answers before closing.
/// The server closes after a fatal error, possibly before reading all of
/// `stream`, so write errors and resets are expected and ignored.
fn tcp_exchange(addr: std::net::SocketAddr, stream: &[u8]) -> Vec<u8> {
    use std::io::Read;
    let mut s = std::net::TcpStream::connect(addr).expect("server accepts connections");
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let _ = s.write_all(stream);
    let _ = s.shutdown(std::net::Shutdown::Write);
    let mut out = Vec::new();
    let mut buf = [0u8; 4096];
    while let Ok(n) = s.read(&mut buf) {
        if n == 0 {
            break;
        }
        out.extend_from_slice(&buf[..n]);
    }
    out
}

// ---------------------------------------------------------------------------

fn main() {
    std::panic::set_hook(Box::new(|info| {
        PANICS.fetch_add(1, Ordering::SeqCst);
        eprintln!("  panic: {info}");
    }));
    let model = reference();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        // First, while the host is quiet: it measures per-layer compute times.
        ("simulated-rate-sweep", Box::new({
            let m = model.clone();
            move || sweep(&m)
        })),
        ("split-equivalence", Box::new({
            let m = model.clone();
            move || split_equivalence(&m)
        })),
        ("quantizer-bounds", Box::new(quantizer_bounds)),
        ("4x-reduction", Box::new({
            let m = model.clone();
            move || four_x_reduction(&m)
        })),
        ("3-sigma-coverage", Box::new(three_sigma_coverage)),
        ("entropy-coder", Box::new(entropy_coder)),
        ("crossover-solver", Box::new(crossover_solver)),
        ("pipelining", Box::new({
            let m = model.clone();
            move || pipelining(&m)
        })),
        ("argmax-preservation", Box::new({
            let m = model.clone();
            move || argmax_preservation(&m)
        })),
        ("protocol-robustness", Box::new({
            let m = model.clone();
            move || protocol_robustness(&m)
        })),
    ];
    let mut failed = Vec::new();
    for (name, run) in &criteria {
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| outcome(false, "panicked"));
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        let _ = std::io::stdout().flush();
        if !o.pass {
            failed.push(*name);
        }
    }
    println!(
        "acceptance: {}/{} criteria passed{}",
        criteria.len() - failed.len(),
        criteria.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join(", "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
