#![no_main]

use libfuzzer_sys::fuzz_target;
use pada::datagen::{dataset_from_csv_text, dataset_to_csv, CsvSchema};

// Input is the source file, a NUL byte, then the target file.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let (source, target) = text.split_once('\0').unwrap_or((text, ""));
    // Declared classes let unlabeled targets through.
    let schema = CsvSchema {
        target_classes: Some(vec![0]),
    };
    if let Ok(ds) = dataset_from_csv_text(source, target, &schema) {
        let (s, t) = dataset_to_csv(&ds);
        let back = dataset_from_csv_text(&s, &t, &schema).expect("written dataset parses");
        assert_eq!(back, ds);
    }
});
