#![no_main]

use glimpse::config::{Overrides, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rc) = RunConfig::from_text(text, "fuzz", &Overrides::default()) {
        assert!(rc.model.validate().is_ok());
        assert_eq!(rc.world.seed, rc.seed);
    }
});
