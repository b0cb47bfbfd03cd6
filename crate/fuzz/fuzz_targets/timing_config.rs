#![no_main]

use libfuzzer_sys::fuzz_target;
use splitwire::lab::TimingConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TimingConfig::parse(text) {
        assert!(cfg.t_mobile_full_s.is_finite() && cfg.t_server_full_s.is_finite());
    }
});
