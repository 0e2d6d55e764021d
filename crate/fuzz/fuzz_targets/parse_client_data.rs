//! Client data files.
#![no_main]

use communityfl::client::ClientDataFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = serde_json::from_slice::<ClientDataFile>(data) {
        for task in &file.tasks {
            let _ = task.validate();
        }
    }
});
