#![no_main]

use libfuzzer_sys::fuzz_target;
use ulda::simulation::StyleBank;

fuzz_target!(|data: &[u8]| {
    if let Ok(bank) = StyleBank::from_bytes(data) {
        let bytes = bank.to_bytes().expect("decoded bank re-encodes");
        assert_eq!(StyleBank::from_bytes(&bytes).expect("round trip"), bank);
    }
});
