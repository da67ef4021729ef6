#![no_main]

use std::path::Path;

use glimpse::keyframe::parse_frame_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(windows) = parse_frame_manifest(text, Path::new("/frames"), "fuzz") {
        assert!(windows.iter().all(|w| !w.is_empty()));
    }
});
