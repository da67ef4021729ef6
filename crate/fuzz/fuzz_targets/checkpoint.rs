#![no_main]

use glimpse::model::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data, None, "fuzz") {
        assert_eq!(encode_checkpoint(&model), data);
    }
});
