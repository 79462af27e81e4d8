#![no_main]

use fuzzyjoin::encoding::tokenize;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|name: &str| {
    if let Ok(tokens) = tokenize(name) {
        assert!(!tokens.is_empty());
        assert!(tokens.tokens().iter().all(|t| !t.is_empty() && !t.chars().any(char::is_whitespace)));
    }
});
