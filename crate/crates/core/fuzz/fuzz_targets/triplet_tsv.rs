#![no_main]

use fuzzyjoin::mining::{read_triplets, write_triplets};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(triplets) = read_triplets(data) {
        let mut out = Vec::new();
        write_triplets(&triplets, &mut out).expect("write to memory");
        assert_eq!(read_triplets(out.as_slice()).expect("written triplets parse"), triplets);
    }
});
