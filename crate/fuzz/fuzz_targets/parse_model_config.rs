#![no_main]

use libfuzzer_sys::fuzz_target;
use posthoc_core::model::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ModelConfig::parse(text) {
        let again = ModelConfig::parse(&cfg.to_text()).expect("printed config reparses");
        assert_eq!(cfg, again);
    }
});
