#![no_main]

use kkt_core::lab::{parse_report_csv, parse_report_json, report_to_csv, report_to_svg};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_report_csv(text) {
        assert!(rows.iter().all(|r| r.condition.is_finite()));
    }
    if let Ok(report) = parse_report_json(text) {
        assert_eq!(parse_report_csv(&report_to_csv(&report)).expect("written report parses"), report.rows);
        let _ = report_to_svg(&report);
    }
});
