#![no_main]

use kkt_core::formats::{model_to_json, parse_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((params, meta)) = parse_model(text) {
        // Anything accepted must survive a write/read cycle unchanged.
        let (again, _) = parse_model(&model_to_json(&params, meta)).expect("written model parses");
        assert_eq!(again, params);
    }
});
