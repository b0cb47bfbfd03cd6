#![no_main]

use libfuzzer_sys::fuzz_target;
use splitwire::codec::{decode_frame, decode_payload, encode_frame};

fuzz_target!(|data: &[u8]| {
    let Ok(frame) = decode_frame(data) else { return };
    assert_eq!(encode_frame(&frame).len(), data.len());
    if let Ok(t) = decode_payload(&frame.payload, &frame.shape, frame.codec, frame.quant.as_ref()) {
        assert_eq!(t.shape(), &frame.shape[..]);
    }
});
