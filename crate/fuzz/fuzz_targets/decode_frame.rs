//! Length-prefixed envelope decoding; accepted frames must re-encode stably.
#![no_main]

use communityfl::netproto::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(env) = decode(data) {
        let bytes = encode(&env).expect("decoded envelope encodes");
        let again = decode(&bytes).expect("canonical frame decodes");
        assert_eq!(encode(&again).expect("encodes"), bytes);
    }
});
