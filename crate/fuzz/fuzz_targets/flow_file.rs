#![no_main]

use libfuzzer_sys::fuzz_target;
use sfkit::decoder::{decode_flow, encode_flow};

fuzz_target!(|data: &[u8]| {
    if let Ok(flow) = decode_flow(data) {
        let bytes = encode_flow(&flow).expect("decoded flow re-encodes");
        assert_eq!(bytes, data);
    }
});
