#![no_main]

use libfuzzer_sys::fuzz_target;
use seqdesign::config::parse_strategies;
use seqdesign::design::Strategy;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(list) = parse_strategies(text) {
            for s in list {
                assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
            }
        }
    }
});
