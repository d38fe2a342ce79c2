#![no_main]

use libfuzzer_sys::fuzz_target;
use spinereg::io::{self, ElementType, MetaHeader};

// Input: header text, a NUL byte, then the raw payload.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else { return };
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    let Ok(h) = MetaHeader::parse(text) else { return };
    let bytes = &data[split + 1..];
    // Re-encoding writes FLOAT32, so only those payloads come back verbatim.
    let float = h.element_type == ElementType::Float32;
    if let Ok(v) = io::decode_volume(&h, bytes) {
        assert!(!float || io::encode_volume(&v) == bytes);
    }
    if let Ok(l) = io::decode_labels(&h, bytes) {
        assert_eq!(io::encode_labels(&l), bytes);
    }
    if let Ok(f) = io::decode_field(&h, bytes) {
        assert!(!float || io::encode_field(&f) == bytes);
    }
});
