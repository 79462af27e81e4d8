#![no_main]

use fuzzyjoin::ann::{parse_index, save_index, QueryConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(forest) = parse_index(data) {
        let mut out = Vec::new();
        save_index(&forest, &mut out).expect("write to memory");
        assert_eq!(out, data);
        if !forest.is_empty() {
            let q = vec![0.0f32; forest.dim()];
            forest.query(&q, &QueryConfig::new(3)).expect("query a parsed index");
        }
    }
});
