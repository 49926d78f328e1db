#![no_main]

use libfuzzer_sys::fuzz_target;
use ulda::pipeline::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        assert_eq!(
            Checkpoint::from_bytes(&ckpt.to_bytes()).expect("round trip"),
            ckpt
        );
    }
});
