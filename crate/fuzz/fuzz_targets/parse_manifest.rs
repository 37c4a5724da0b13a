#![no_main]

use libfuzzer_sys::fuzz_target;
use unions_core::corpus::{parse_manifest, Vocabulary};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_manifest(text) {
        let _ = Vocabulary::new(&m.languages, m.num_concepts);
    }
});
