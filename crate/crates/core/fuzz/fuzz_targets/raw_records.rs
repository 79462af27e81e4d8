#![no_main]

use fuzzyjoin::pipeline::{finalize_dataset, read_entities, read_raw_records, EntityKind};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_raw_records(data) {
        for kind in [EntityKind::Person, EntityKind::Company] {
            let (entities, report) = finalize_dataset(&records, kind);
            assert_eq!(report.entities_out, entities.len());
            assert!(entities.iter().all(|e| e.names.len() >= 2));
        }
    }
    let _ = read_entities(data);
});
