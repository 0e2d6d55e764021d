//! Architecture identifiers such as `mlp-4x8x3`.
#![no_main]

use communityfl::tinylearn::ModelArch;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(id) = std::str::from_utf8(data) else { return };
    if let Ok(arch) = ModelArch::from_id(id) {
        assert_eq!(ModelArch::from_id(&arch.arch_id).expect("canonical id parses"), arch);
    }
});
