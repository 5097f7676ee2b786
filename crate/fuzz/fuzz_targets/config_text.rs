#![no_main]

use libfuzzer_sys::fuzz_target;
use pada::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        let back = ExperimentConfig::parse(&cfg.to_text()).expect("written config parses");
        assert_eq!(back.to_text(), cfg.to_text());
    }
    for line in text.lines() {
        let _ = ExperimentConfig::default().apply_override(line);
    }
});
