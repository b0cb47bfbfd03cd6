#![no_main]

use libfuzzer_sys::fuzz_target;
use splitwire::transport::wire::{decode_message, encode_message, read_message};

fuzz_target!(|data: &[u8]| {
    let Ok((msg, used)) = decode_message(data) else { return };
    assert!(used <= data.len());
    // Compare bytes, not values: scores and scales may be NaN.
    let bytes = encode_message(&msg);
    let (again, n) = decode_message(&bytes).expect("re-encoded message decodes");
    assert_eq!(n, bytes.len());
    assert_eq!(encode_message(&again), bytes);

    let (streamed, raw) = read_message(&mut &data[..used]).expect("stream read").expect("not at EOF");
    assert_eq!(raw, &data[..used]);
    assert_eq!(encode_message(&streamed), bytes);
});
