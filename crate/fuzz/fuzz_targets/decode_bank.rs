#![no_main]

use libfuzzer_sys::fuzz_target;
use posthoc_core::calibration::RouterBank;

fuzz_target!(|data: &[u8]| {
    let _ = RouterBank::from_bytes(data);
});
