#![no_main]

use libfuzzer_sys::fuzz_target;
use priorba::eval_io::{format_tum, parse_tum};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(read) = parse_tum(text) {
        let again = parse_tum(&format_tum(&read.trajectory)).expect("formatted trajectory parses");
        assert_eq!(again.trajectory.len(), read.trajectory.len());
    }
});
