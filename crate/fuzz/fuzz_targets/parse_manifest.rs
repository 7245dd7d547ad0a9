#![no_main]

use libfuzzer_sys::fuzz_target;
use posthoc_core::adapter::{probe, ModelManifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = ModelManifest::parse(text) {
        let _ = probe(&m);
    }
});
