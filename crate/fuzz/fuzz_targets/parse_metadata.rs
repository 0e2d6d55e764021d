//! Participant metadata files.
#![no_main]

use communityfl::community::ParticipantMetadata;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(meta) = serde_json::from_slice::<ParticipantMetadata>(data) {
        let _ = meta.validate();
        let _ = meta.normalized().validate();
    }
});
