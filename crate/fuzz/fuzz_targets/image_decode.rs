#![no_main]

use hrsegnet::data::{decode_image, encode_image};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert_eq!(img.channels(), 3);
        assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(decode_image(&encode_image(&img)).unwrap(), img);
    }
});
