#![no_main]

use libfuzzer_sys::fuzz_target;
use priorba::formats::{decode_depth, encode_depth};

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = decode_depth(data) {
        let again = decode_depth(&encode_depth(&map)).expect("re-encoded depth decodes");
        assert_eq!((again.width(), again.height()), (map.width(), map.height()));
    }
});
