#![no_main]

use libfuzzer_sys::fuzz_target;
use ulda::encoders::external::TextTable;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = TextTable::from_bytes(data) {
        assert_eq!(TextTable::from_bytes(&t.to_bytes()).expect("round trip"), t);
    }
});
