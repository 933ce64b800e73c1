#![no_main]

use libfuzzer_sys::fuzz_target;
use pica_core::adapter_io::decode;

fuzz_target!(|data: &[u8]| {
    // Decoding must never panic, and anything that decodes must re-encode
    // to the same bytes.
    if let Ok(ckpt) = decode(data) {
        let bytes = ckpt.encode().expect("decoded checkpoint re-encodes");
        assert_eq!(bytes, data);
    }
});
