#![no_main]

use libfuzzer_sys::fuzz_target;
use ulda::toyworld::{decode_images, decode_labels};

fuzz_target!(|data: &[u8]| {
    let Some((&[count, size, classes], rest)) = data.split_first_chunk::<3>() else {
        return;
    };
    let (count, size) = (count as usize % 8, size as usize % 16);
    let _ = decode_images(rest, count, size);
    let _ = decode_labels(rest, count, size, classes as usize % 12);
});
