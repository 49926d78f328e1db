#![no_main]

use libfuzzer_sys::fuzz_target;
use ulda::toyworld::{manifest_text, parse_manifest};

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = parse_manifest(data) {
        assert_eq!(
            parse_manifest(manifest_text(&spec).as_bytes()).expect("round trip"),
            spec
        );
    }
});
