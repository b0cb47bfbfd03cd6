#![no_main]

use libfuzzer_sys::fuzz_target;
use splitwire::codec::{entropy_decode, entropy_encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(symbols) = entropy_decode(data) {
        if !symbols.is_empty() {
            let again = entropy_encode(&symbols).expect("decoded symbols re-encode");
            assert_eq!(entropy_decode(&again).expect("own output decodes"), symbols);
        }
    }
    // The encoder side: any non-empty byte string round trips.
    if !data.is_empty() {
        let enc = entropy_encode(data).expect("encode");
        assert_eq!(entropy_decode(&enc).expect("decode"), data);
    }
});
