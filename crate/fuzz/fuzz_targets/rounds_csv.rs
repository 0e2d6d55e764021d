//! `rounds.csv` artifacts read back by `inspect`.
#![no_main]

use communityfl::artifacts::parse_rounds_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_rounds_csv(text);
    }
});
