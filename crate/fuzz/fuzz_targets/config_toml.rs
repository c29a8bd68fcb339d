#![no_main]

use gssm_core::config::{resolve, Overrides, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = resolve(Some(text), &Overrides::default(), None) {
            let back = RunConfig::from_toml(&cfg.to_toml()).expect("resolved config parses");
            assert_eq!(back, cfg);
        }
    }
});
