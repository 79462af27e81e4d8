#![no_main]

use fuzzyjoin::encoding::{parse_char_embeddings, write_char_embeddings};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = parse_char_embeddings(data) {
        let mut out = Vec::new();
        write_char_embeddings(&table, &mut out).expect("write to memory");
        let again = parse_char_embeddings(&out).expect("written table parses");
        assert_eq!(again.dim(), table.dim());
        assert_eq!(again.len(), table.len());
    }
});
