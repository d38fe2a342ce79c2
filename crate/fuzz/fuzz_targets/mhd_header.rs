#![no_main]

use libfuzzer_sys::fuzz_target;
use spinereg::io::MetaHeader;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(h) = MetaHeader::parse(text) {
        // Anything accepted must survive a print/parse cycle.
        assert_eq!(MetaHeader::parse(&h.to_text()).unwrap(), h);
        let _ = h.payload_len();
    }
});
