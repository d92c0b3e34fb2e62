#![no_main]

use flow_planner::harness::report::{episode_csv, parse_report};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_report(text) {
        let rendered = episode_csv(&rows).expect("render");
        assert_eq!(parse_report(&rendered).expect("reparse"), rows);
    }
});
