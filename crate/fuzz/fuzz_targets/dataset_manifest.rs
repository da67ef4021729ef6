#![no_main]

use glimpse::synth::parse_dataset_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_dataset_manifest(text, "fuzz") {
        assert_eq!(m.episodes.len(), m.spec.episodes);
    }
});
