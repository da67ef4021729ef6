#![no_main]

use glimpse::keyframe::{encode_pgm, laplacian_variance, parse_pnm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = parse_pnm(data, "fuzz") {
        assert!(laplacian_variance(&frame) >= 0.0);
        let again = parse_pnm(&encode_pgm(&frame), "fuzz").unwrap();
        assert_eq!((again.width(), again.height()), (frame.width(), frame.height()));
    }
});
