//! Coordinator configuration files.
#![no_main]

use communityfl::orchestrator::server::ServeConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = serde_json::from_slice::<ServeConfig>(data) {
        let _ = config.scheduler.validate();
    }
});
