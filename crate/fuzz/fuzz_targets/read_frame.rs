//! Frame reading from a byte stream.
#![no_main]

use std::io::Cursor;

use communityfl::netproto::socket::read_frame;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut cursor = Cursor::new(data);
    while let Ok((_, n)) = read_frame(&mut cursor) {
        assert!(n >= 4);
    }
});
