#![no_main]

use flow_planner::config::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::parse(text) {
        let again = Config::parse(&cfg.to_text()).expect("rendered config parses");
        assert_eq!(again, cfg);
    }
});
