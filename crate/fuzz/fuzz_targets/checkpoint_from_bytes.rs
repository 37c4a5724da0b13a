#![no_main]

use libfuzzer_sys::fuzz_target;
use unions_core::trainer::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
});
