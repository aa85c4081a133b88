#![no_main]

use kkt_core::formats::{parse_trace, trace_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(trace) = parse_trace(text) {
        assert!(trace.records.windows(2).all(|w| w[0].epoch < w[1].epoch));
        // NaN fields never compare equal, so only check the epoch column.
        let again = parse_trace(&trace_to_csv(&trace)).expect("written trace parses");
        let epochs = |t: &kkt_core::trainer::TrainTrace| t.records.iter().map(|r| r.epoch).collect::<Vec<_>>();
        assert_eq!(epochs(&again), epochs(&trace));
    }
});
