#![no_main]

use kkt_core::attack::InitGeometry;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(g) = text.parse::<InitGeometry>() {
            g.validate().expect("parsed geometry is valid");
        }
    }
});
