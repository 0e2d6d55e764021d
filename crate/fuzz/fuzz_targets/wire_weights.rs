//! Base64 weight payloads.
#![no_main]

use communityfl::netproto::WireWeights;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(wire) = serde_json::from_slice::<WireWeights>(data) {
        if let Ok(w) = wire.decode() {
            assert_eq!(WireWeights::encode(&w).decode().expect("re-decodes"), w);
        }
    }
});
