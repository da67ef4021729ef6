#![no_main]

use glimpse::history::{parse_history, ActionVocabulary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vocab = ActionVocabulary::new(["pick leg", "align screw", "rotate table", "a0", "a1"]).unwrap();
    if let Ok(steps) = parse_history(text, &vocab, 7, "fuzz") {
        for q in steps {
            assert!(q.len() <= 7);
            assert!(q.items().iter().all(|&id| id < vocab.len()));
        }
    }
});
