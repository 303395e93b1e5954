#![no_main]

use libfuzzer_sys::fuzz_target;
use priorba::formats::{decode_image, encode_image};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        let again = decode_image(&encode_image(&img)).expect("re-encoded image decodes");
        assert_eq!((again.width(), again.height()), (img.width(), img.height()));
    }
});
