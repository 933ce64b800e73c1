#![no_main]

use libfuzzer_sys::fuzz_target;
use pica_cli::{export_csv, parse_metrics_line};

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(record) = parse_metrics_line(line) {
            let text = serde_json::to_string(&record).expect("record serializes");
            let _ = parse_metrics_line(&text);
        }
    }
    // Whole streams, including invalid UTF-8 and unterminated lines.
    let _ = export_csv(data, std::io::sink());
});
