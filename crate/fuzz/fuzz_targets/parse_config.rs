#![no_main]

use libfuzzer_sys::fuzz_target;
use seqdesign::config::parse_config_str;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config_str(text) {
            cfg.validate().expect("parsed configs are valid");
        }
    }
});
