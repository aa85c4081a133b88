#![no_main]

use kkt_core::attack::AttackConfig;
use kkt_core::formats::parse_config;
use kkt_core::lab::ExperimentConfig;
use kkt_core::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(c) = parse_config::<TrainConfig>(text) {
        let _ = c.validate();
    }
    if let Ok(c) = parse_config::<AttackConfig>(text) {
        let _ = c.validate();
    }
    if let Ok(c) = parse_config::<ExperimentConfig>(text) {
        let _ = c.train.validate();
        let _ = c.attack.validate();
    }
});
