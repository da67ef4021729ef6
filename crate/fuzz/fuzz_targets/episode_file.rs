#![no_main]

use glimpse::synth::decode_episode;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ep) = decode_episode(data, "fuzz") {
        for (_, rgb, depth) in &ep.steps {
            assert_eq!(rgb.shape(), (ep.window * ep.tokens, ep.d));
            assert_eq!(depth.shape(), rgb.shape());
        }
    }
});
