#![no_main]

use carrot_core::model::{decode_model, encode_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_model(data) {
        // The header JSON may be laid out differently from ours, so compare
        // the canonical re-encoding against itself after a second pass.
        let bytes = encode_model(&model).expect("decoded model encodes");
        let again = decode_model(&bytes).expect("canonical bytes decode");
        assert_eq!(encode_model(&again).expect("re-encode"), bytes);
    }
});
