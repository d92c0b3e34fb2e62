#![no_main]

use flow_planner::training::TrainState;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = TrainState::decode(data) {
        assert_eq!(state.encode().expect("re-encode"), data);
    }
});
