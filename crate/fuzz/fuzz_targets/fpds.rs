#![no_main]

use flow_planner::scenario::dataset::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::decode(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(ds.encode().expect("re-encode"), data);
    }
});
