mod args;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use log::info;
use splitwire::analyze::{profile_splits, recommend_split, write_profiles_csv};
use splitwire::codec::CodecId;
use splitwire::image::{fit_image, read_pnm};
use splitwire::lab::{
    find_crossover, measure_layer_times, parse_modes, parse_rate_range, predict_sweep, run_pipelined,
    run_pipelined_tcp, run_sweep, run_sweep_tcp, Mode, SweepConfig, TimingConfig, TimingModel,
};
use splitwire::modelfile::{load_model, save_model};
use splitwire::transport::client::DEFAULT_TIMEOUT;
use splitwire::transport::{serve, Compute, LinkModel, Split, TcpClient, KB};
use splitwire::zoo::{build_microresnet, calibrated_microresnet, SyntheticSource, REFERENCE_SEED};
use splitwire::{ModelGraph, Tensor};
use splitwire_session::config::split_names;
use splitwire_session::{
    run_session, Backend, InputSource, LinkParams, SessionConfig, SessionOptions, TcpBackend,
};

use args::{Cli, Command};

/// Usage errors exit with 1, runtime errors with 2.
enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPLITWIRE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::Analyze(a) => analyze(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Sweep(a) => sweep(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Demo(a) => demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_model(path: &Path) -> Result<Arc<ModelGraph>, Failure> {
    let bytes = fs::read(path).map_err(|e| runtime(format!("cannot read model {}: {e}", path.display())))?;
    let model = load_model(&bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    info!("loaded {} ({:016x})", path.display(), model.model_hash());
    Ok(Arc::new(model))
}

fn timing_config(path: Option<&Path>) -> Result<TimingConfig, Failure> {
    let Some(path) = path else {
        return Ok(TimingConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    TimingConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn split_arg(model: &ModelGraph, name: &str, allow_input: bool) -> Result<Split, Failure> {
    match Split::parse(model, name) {
        Ok(Split::Input) if !allow_input => Err(usage("split 'input' is not allowed here")),
        Ok(s) => Ok(s),
        Err(_) => {
            let mut valid = split_names(model);
            if allow_input {
                valid.insert(0, "input".into());
            }
            Err(usage(format!("'{name}' is not a valid split point; valid splits: {}", valid.join(", "))))
        }
    }
}

fn codec_arg(s: &str) -> Result<CodecId, Failure> {
    s.parse()
        .map_err(|_| usage(format!("unknown codec '{s}'; valid codecs: f32, u8, u8h")))
}

fn rate_arg(kbps: f64) -> Result<f64, Failure> {
    if kbps.is_finite() && kbps > 0.0 {
        Ok(kbps * KB)
    } else {
        Err(usage(format!("rate must be a positive number of KB/s, got {kbps}")))
    }
}

fn write_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> splitwire::Result<()>) -> Outcome {
    match path {
        Some(p) => {
            let mut file = fs::File::create(p).map_err(|e| runtime(format!("cannot create {}: {e}", p.display())))?;
            f(&mut file).map_err(runtime)
        }
        None => f(&mut std::io::stdout().lock()).map_err(runtime),
    }
}

fn gen_model(a: args::GenModel) -> Outcome {
    let model = match a.calib {
        0 => build_microresnet(a.seed),
        n => calibrated_microresnet(a.seed, n).map_err(|e| usage(format!("--calib {n}: {e}")))?,
    };
    fs::write(&a.out, save_model(&model)).map_err(|e| runtime(format!("cannot write {}: {e}", a.out.display())))?;
    println!("wrote {} model_hash={:016x}", a.out.display(), model.model_hash());
    Ok(())
}

fn analyze(a: args::Analyze) -> Outcome {
    let cfg = timing_config(a.config.as_deref())?;
    let rate = a.rate.map(rate_arg).transpose()?;
    let model = read_model(&a.model.model)?;
    let profiles = profile_splits(&model, &SyntheticSource::new(a.seed, a.calib)).map_err(|e| usage(format!("--calib: {e}")))?;
    if profiles.uncalibrated {
        eprintln!("warning: every BatchNorm has initial statistics; entropy estimates are unreliable");
    }
    write_output(a.out.as_deref(), |w| write_profiles_csv(&profiles.profiles, w))?;
    if let Some(rate) = rate {
        let timing = TimingModel::flop_proportional(&model, &cfg).map_err(runtime)?;
        let ranked = recommend_split(&profiles.profiles, rate, cfg.rtt_s, &timing).map_err(runtime)?;
        eprintln!("rank  split        predicted_ms");
        for r in ranked.iter().take(5) {
            eprintln!("{:>4}  {:<12} {:>10.3}", r.rank, model.layers()[r.layer_id].name, r.predicted_total_ms);
        }
    }
    Ok(())
}

fn serve_cmd(a: args::Serve) -> Outcome {
    let model = read_model(&a.model.model)?;
    let handle = serve(model.clone(), a.listen).map_err(|e| runtime(format!("cannot listen on {}: {e}", a.listen)))?;
    println!("serving model {:016x} on {}", model.model_hash(), handle.local_addr());
    handle.wait();
    Ok(())
}

fn input_arg(spec: &str, model: &ModelGraph) -> Result<Tensor, Failure> {
    if let Some(idx) = spec.strip_prefix("synth:") {
        let idx: usize = idx.parse().map_err(|_| usage(format!("bad synthetic index in '{spec}'")))?;
        let source = SyntheticSource::new(REFERENCE_SEED, idx + 1);
        return source.sample(idx).map(|(x, _)| x).map_err(runtime);
    }
    let bytes = fs::read(spec).map_err(|e| usage(format!("cannot read input {spec}: {e}")))?;
    let img = read_pnm(&bytes).map_err(|e| usage(format!("{spec}: {e}")))?;
    fit_image(&img, model.input_shape()).map_err(|e| usage(format!("{spec}: {e}")))
}

fn infer(a: args::Infer) -> Outcome {
    let codec = codec_arg(&a.codec)?;
    let rate = a.rate.map(rate_arg).transpose()?.unwrap_or(f64::INFINITY);
    let model = read_model(&a.model.model)?;
    let split = split_arg(&model, &a.split, true)?;
    let x = input_arg(&a.input, &model)?;
    let mut client = TcpClient::connect(a.connect, model.clone(), rate, DEFAULT_TIMEOUT)
        .map_err(|e| runtime(format!("cannot connect to {}: {e}", a.connect)))?;
    let out = client.infer(&x, split, codec).map_err(runtime)?;
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    println!("frame {} split {} codec {}", out.frame_id, split.name(&model), codec);
    println!("upload_bytes {}", out.upload_bytes);
    println!(
        "t_head_ms {:.3} t_encode_ms {:.3} t_upload_ms {:.3} t_server_ms {:.3} t_total_ms {:.3}",
        ms(out.timing.t_head),
        ms(out.timing.t_encode),
        ms(out.timing.t_upload),
        ms(out.timing.t_server),
        ms(out.timing.t_total)
    );
    for (class, score) in &out.top_k {
        println!("class {class} score {score:.6}");
    }
    Ok(())
}

fn sweep(a: args::Sweep) -> Outcome {
    let cfg = timing_config(a.config.as_deref())?;
    let rates = parse_rate_range(&a.rates).map_err(|e| usage(e.to_string()))?;
    let modes = parse_modes(&a.modes).map_err(|e| usage(e.to_string()))?;
    if a.frames < 3 {
        return Err(usage(format!("--frames must be at least 3, got {}", a.frames)));
    }
    let model = read_model(&a.model.model)?;
    let Split::After(split) = split_arg(&model, &a.split, false)? else {
        unreachable!("input split rejected above")
    };
    let sweep_cfg = SweepConfig {
        rates_kbps: rates.clone(),
        modes: modes.clone(),
        split,
        frames: a.frames,
    };
    let source = SyntheticSource::new(a.seed, a.frames.max(8));
    let timing = if a.simulate || a.predict_only {
        TimingModel::flop_proportional(&model, &cfg).map_err(runtime)?
    } else {
        // Desk-scale: the same measured layer times on client and server.
        let inputs: Vec<Tensor> = SyntheticSource::new(REFERENCE_SEED, 8).iter().map(|(x, _)| x).collect();
        let layer_s = measure_layer_times(&model, &inputs, 3).map_err(runtime)?;
        TimingModel::from_layer_times(&model, layer_s.clone(), layer_s, &cfg).map_err(runtime)?
    };
    let result = if a.predict_only {
        predict_sweep(&model, &timing, &sweep_cfg)
    } else if let Some(addr) = a.connect {
        run_sweep_tcp(addr, &model, &timing, &source, &sweep_cfg)
    } else {
        run_sweep(&model, &timing, &source, &sweep_cfg)
    }
    .map_err(runtime)?;
    write_output(a.out.as_deref(), |w| result.write_csv(w))?;
    if a.crossover {
        let (lo, hi) = (rates[0] * KB, rates[rates.len() - 1] * KB);
        for m in modes.into_iter().filter(|&m| m != Mode::MobileOnly) {
            match find_crossover(m, Mode::MobileOnly, split, &timing, lo, hi).map_err(runtime)? {
                Some(r) => eprintln!("{m} beats mobile_only from {:.1} KB/s", r / KB),
                None => eprintln!("{m} never beats mobile_only in the range"),
            }
        }
    }
    Ok(())
}

fn pipeline(a: args::Pipeline) -> Outcome {
    let cfg = timing_config(a.config.as_deref())?;
    let codec = codec_arg(&a.codec)?;
    let rate = rate_arg(a.rate)?;
    if !(a.rtt.is_finite() && a.rtt >= 0.0) {
        return Err(usage(format!("--rtt must be non-negative, got {}", a.rtt)));
    }
    if a.frames < 10 {
        return Err(usage(format!("--frames must be at least 10, got {}", a.frames)));
    }
    let model = read_model(&a.model.model)?;
    let split = split_arg(&model, &a.split, false)?;
    let source = SyntheticSource::new(a.seed, a.frames);
    let report = match a.connect {
        Some(addr) => run_pipelined_tcp(addr, &model, &source, rate, split, codec, a.frames),
        None => {
            let Split::After(k) = split else { unreachable!() };
            let timing = TimingModel::flop_proportional(&model, &cfg).map_err(runtime)?;
            let compute = Compute::Fixed {
                head: Duration::from_secs_f64(timing.t_head(k)),
                tail: Duration::from_secs_f64(timing.t_tail(k)),
            };
            let link = LinkModel::simulated(rate, Duration::from_secs_f64(a.rtt / 1e3)).map_err(runtime)?;
            run_pipelined(&model, &source, link, split, codec, a.frames, compute)
        }
    }
    .map_err(runtime)?;
    println!("frames {}", report.frames);
    println!(
        "sequential_period_ms {:.3} fps {:.2}",
        report.period_sequential_s * 1e3,
        report.fps_sequential()
    );
    println!(
        "pipelined_period_ms {:.3} fps {:.2}",
        report.period_pipelined_s * 1e3,
        report.fps_pipelined()
    );
    println!("predicted_period_ms {:.3}", report.predicted_period_s * 1e3);
    Ok(())
}

fn source_arg(spec: &str) -> Result<InputSource, Failure> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let bad = || usage(format!("source '{spec}' is not synth:SEED:COUNT"));
        let (seed, count) = rest.split_once(':').ok_or_else(bad)?;
        let seed = seed.parse().map_err(|_| bad())?;
        let count: usize = count.parse().map_err(|_| bad())?;
        if count == 0 {
            return Err(bad());
        }
        return Ok(InputSource::Synthetic { seed, count });
    }
    let path = Path::new(spec);
    if !path.is_dir() {
        return Err(usage(format!("source '{spec}' is neither synth:SEED:COUNT nor a directory")));
    }
    Ok(InputSource::ImageDir { path: path.into() })
}

fn demo(a: args::Demo) -> Outcome {
    let codec = codec_arg(&a.codec)?;
    let mode = a
        .mode
        .parse()
        .map_err(|_| usage(format!("unknown mode '{}'; valid modes: mobile_only, cloud_only, shared", a.mode)))?;
    let rate = rate_arg(a.rate)?;
    if !(a.rtt.is_finite() && a.rtt >= 0.0) {
        return Err(usage(format!("--rtt must be non-negative, got {}", a.rtt)));
    }
    let source = source_arg(&a.source)?;
    let model = read_model(&a.model.model)?;
    split_arg(&model, &a.split, false)?;
    let (backend, link) = match a.connect {
        Some(addr) => {
            let tcp = TcpBackend::connect(addr, model.clone(), rate, DEFAULT_TIMEOUT)
                .map_err(|e| runtime(format!("cannot connect to {addr}: {e}")))?;
            (Backend::Tcp(tcp), None)
        }
        None => {
            let link = LinkModel::simulated(rate, Duration::from_secs_f64(a.rtt / 1e3)).map_err(runtime)?;
            let params = LinkParams {
                rate_kbps: a.rate,
                rtt_ms: a.rtt,
            };
            (Backend::simulated(model.clone(), link).map_err(runtime)?, Some(params))
        }
    };
    let config = SessionConfig {
        split_layer: a.split,
        codec,
        mode,
        source,
        link,
    };
    let options = SessionOptions {
        frame_interval: Duration::from_millis(a.interval),
        max_frames: a.frames,
        ..Default::default()
    };
    let listener = std::net::TcpListener::bind(a.control)
        .map_err(|e| runtime(format!("cannot listen on {}: {e}", a.control)))?;
    let addr = listener.local_addr().map_err(runtime)?;
    println!("control API on http://{addr}");
    let _ = std::io::stdout().flush();
    run_session(model, backend, config, options, listener, a.static_dir).map_err(runtime)
}
