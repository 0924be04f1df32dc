#![no_main]

use hrsegnet::data::{decode_mask, encode_mask};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = decode_mask(data) {
        assert!(mask.data.iter().all(|&v| v <= 1));
        assert_eq!(decode_mask(&encode_mask(&mask)).unwrap(), mask);
    }
});
