#![no_main]

use libfuzzer_sys::fuzz_target;
use unions_core::corpus::{parse_aligned, render_aligned, LanguageSpec, Vocabulary};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let langs = LanguageSpec::defaults(4);
    let vocab = Vocabulary::new(&langs, 60).unwrap();
    if let Ok(sents) = parse_aligned(text, &langs, &vocab) {
        let again = parse_aligned(&render_aligned(&sents, &langs), &langs, &vocab).unwrap();
        assert_eq!(sents, again);
    }
});
