#![no_main]

use libfuzzer_sys::fuzz_target;
use pica_cli::{resolve_campaign, resolve_train_config};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // First line is the JSON document, every further line one KEY=VALUE
    // override. An empty first line means "start from the defaults".
    let mut lines = text.split('\n');
    let doc = lines.next().filter(|l| !l.is_empty());
    let overrides: Vec<String> = lines.map(str::to_string).collect();

    if let Ok(config) = resolve_train_config(doc, &overrides) {
        // A resolved config echoes back to an equal config.
        let echoed = serde_json::to_string(&config).expect("config serializes");
        assert_eq!(resolve_train_config(Some(&echoed), &[]).ok(), Some(config));
    }
    let _ = resolve_campaign(None, doc, &overrides);
});
