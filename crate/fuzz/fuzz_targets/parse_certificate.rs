#![no_main]

use kkt_core::formats::parse_certificate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cert) = parse_certificate(text) {
            assert!(cert.epsilon.is_finite() && cert.delta.is_finite() && cert.p.is_finite());
        }
    }
});
