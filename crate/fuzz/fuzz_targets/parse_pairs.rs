#![no_main]

use libfuzzer_sys::fuzz_target;
use unions_core::corpus::{parse_pairs, render_pairs, LanguageSpec, Vocabulary};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let langs = LanguageSpec::defaults(4);
    let vocab = Vocabulary::new(&langs, 60).unwrap();
    if let Ok(pairs) = parse_pairs(text, &langs, &vocab) {
        let again = parse_pairs(&render_pairs(&pairs), &langs, &vocab).unwrap();
        assert_eq!(pairs, again);
    }
});
