#![no_main]

use kkt_core::formats::{parse_table, table_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(t) = parse_table(text) {
        assert!(t.labels.iter().all(|&y| y == 1.0 || y == -1.0));
        assert!(t.points.iter().all(|v| v.is_finite()));
        let again = parse_table(&table_to_csv(&t.points, &t.labels, t.lambda.as_deref())).expect("written table parses");
        assert_eq!(again, t);
        let _ = t.dataset();
        let _ = t.weighted_set();
    }
});
