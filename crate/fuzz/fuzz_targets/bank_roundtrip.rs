#![no_main]

use libfuzzer_sys::fuzz_target;
use posthoc_core::calibration::RouterBank;

// Any accepted bank re-encodes to exactly the input bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(bank) = RouterBank::from_bytes(data) {
        assert_eq!(bank.to_bytes(), data);
    }
});
