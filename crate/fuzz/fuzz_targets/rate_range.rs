#![no_main]

use libfuzzer_sys::fuzz_target;
use splitwire::lab::{parse_modes, parse_rate_range};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rates) = parse_rate_range(text) {
        assert!(!rates.is_empty());
        assert!(rates.windows(2).all(|w| w[0] < w[1]));
    }
    let _ = parse_modes(text);
});
