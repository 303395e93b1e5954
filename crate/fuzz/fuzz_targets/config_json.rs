#![no_main]

use libfuzzer_sys::fuzz_target;
use priorba::eval_io::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::parse(text) {
        let json = serde_json::to_string(&config).expect("config serializes");
        assert_eq!(ExperimentConfig::parse(&json).expect("serialized config parses"), config);
    }
});
