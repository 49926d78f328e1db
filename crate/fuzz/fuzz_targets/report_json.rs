#![no_main]

use libfuzzer_sys::fuzz_target;
use ulda::segmentation::MetricsReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(r) = MetricsReport::from_json(text) {
        let _ = r.to_json();
    }
});
