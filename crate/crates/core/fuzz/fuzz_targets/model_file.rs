#![no_main]

use fuzzyjoin::model::{parse_model, save_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = parse_model(data) {
        let mut out = Vec::new();
        save_model(&model, &mut out).expect("write to memory");
        assert_eq!(parse_model(&out).expect("saved model parses"), model);
        let _ = model.embed("douglas adams");
    }
});
