#![no_main]

use libfuzzer_sys::fuzz_target;
use ulda::encoders::external::ExternalVision;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = ExternalVision::from_bytes(data) {
        assert_eq!(
            ExternalVision::from_bytes(&v.to_bytes()).expect("round trip"),
            v
        );
    }
});
