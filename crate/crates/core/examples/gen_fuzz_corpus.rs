//! Writes the seed inputs for the fuzz targets into `fuzz/corpus/<target>/`.
//!
//! cargo run -p splitwire --example gen_fuzz_corpus

use std::fs;
use std::path::{Path, PathBuf};

use splitwire::codec::{encode_payload, entropy_encode, CodecId, QuantMode, QuantParams};
use splitwire::exec::run_head;
use splitwire::modelfile::save_model;
use splitwire::transport::wire::{
    encode_frame, encode_message, ConfigUpdate, Hello, Message, ResultFrame, TensorFrame, SPLIT_INPUT, VERSION,
};
use splitwire::zoo::{build_microresnet, SyntheticSource};

fn write(dir: &Path, name: &str, bytes: &[u8]) {
    fs::write(dir.join(name), bytes).unwrap();
}

fn frame(codec: CodecId, split: u16, t: &splitwire::Tensor) -> TensorFrame {
    let (payload, quant) = encode_payload(t, codec, QuantMode::Empirical).unwrap();
    TensorFrame {
        frame_id: 7,
        split_layer: split,
        codec,
        shape: t.shape().to_vec(),
        quant,
        payload,
    }
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let dir = |target: &str| {
        let d = root.join(target);
        fs::create_dir_all(&d).unwrap();
        d
    };

    let model = build_microresnet(42);
    let (input, _) = SyntheticSource::new(42, 1).sample(0).unwrap();
    let gap = model.layer_id("gap").unwrap();
    let feat = run_head(&model, &input, gap).unwrap();

    let frames = dir("tensor_frame");
    let wire = dir("wire_message");
    for codec in CodecId::ALL {
        let bytes = encode_frame(&frame(codec, gap as u16, &feat));
        write(&frames, &format!("gap_{}", codec.name()), &bytes);
        write(&wire, &format!("tensor_{}", codec.name()), &bytes);
    }
    write(&frames, "input_f32", &encode_frame(&frame(CodecId::Float32Raw, SPLIT_INPUT, &input)));
    let hello = Hello {
        protocol_version: VERSION,
        model_hash: model.model_hash(),
    };
    let others = [
        ("hello", Message::Hello(hello)),
        ("hello_ack", Message::HelloAck(hello)),
        (
            "config",
            Message::Config(ConfigUpdate {
                split_layer: gap as u16,
                codec: CodecId::U8QuantHuffman,
            }),
        ),
        ("error", Message::error(3, "unknown split layer 99")),
        (
            "result",
            Message::Result(ResultFrame {
                frame_id: 7,
                server_compute_us: 1234,
                top_k: vec![(3, 0.61), (1, 0.2), (8, 0.1), (0, 0.05), (9, 0.04)],
            }),
        ),
    ];
    for (name, msg) in &others {
        write(&wire, name, &encode_message(msg));
    }
    // Two messages back to back, as on a stream.
    let mut pair = encode_message(&others[0].1);
    pair.extend(encode_message(&others[2].1));
    write(&wire, "pair", &pair);

    let entropy = dir("entropy_decode");
    let codes = splitwire::codec::quantize(&feat, &QuantParams::standard_normal());
    write(&entropy, "features", &entropy_encode(&codes).unwrap());
    write(&entropy, "single_symbol", &entropy_encode(&[9; 40]).unwrap());
    write(&entropy, "ramp", &entropy_encode(&(0..=255).collect::<Vec<u8>>()).unwrap());

    write(&dir("model_file"), "microresnet_42", &save_model(&model));

    let pnm = dir("pnm_image");
    let mut p5 = b"P5\n# gray\n4 3\n255\n".to_vec();
    p5.extend((0..12u8).map(|i| i * 20));
    write(&pnm, "gray.pgm", &p5);
    let mut p6 = b"P6 2 2 255\n".to_vec();
    p6.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 128, 128, 128]);
    write(&pnm, "rgb.ppm", &p6);
    let mut deep = b"P5 2 1 65535\n".to_vec();
    deep.extend([0xff, 0xff, 0x00, 0x10]);
    write(&pnm, "maxval_too_big.pgm", &deep);

    let timing = dir("timing_config");
    write(
        &timing,
        "full",
        b"# desk constants\nt_mobile_full_ms = 120\nt_server_full_ms = 12.5\nrtt_ms = 5\ndesk_flops_per_s = 2e9\n",
    );
    write(&timing, "empty", b"");
    write(&timing, "partial", b"rtt_ms=0 # loopback\n");

    let rates = dir("rate_range");
    write(&rates, "default", b"50..3000:50");
    write(&rates, "single", b"100..100:1");
    write(&rates, "fractional", b"0.5..2.5:0.25");
    write(&rates, "modes", b"mobile_only,cloud_only,shared_f32,shared_u8,shared_u8h");
    println!("wrote {}", root.display());
}
