#![no_main]

use libfuzzer_sys::fuzz_target;
use pada::model::{params_from_csv, params_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = params_from_csv(text) {
        let back = params_from_csv(&params_to_csv(&p)).expect("written params parse");
        assert_eq!(params_to_csv(&back), params_to_csv(&p));
    }
});
