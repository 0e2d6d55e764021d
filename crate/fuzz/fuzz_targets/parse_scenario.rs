//! Scenario JSON parsing and validation.
#![no_main]

use communityfl::scenarios::ScenarioSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = ScenarioSpec::from_json(text) {
        let back = ScenarioSpec::from_json(&spec.to_json()).expect("valid spec round-trips");
        assert_eq!(back.to_json(), spec.to_json());
    }
});
