//! Seeded synthetic person names for experiments without real data.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pipeline::{finalize_dataset, EntityKind, EntityRecord, RawRecord};

const SYLLABLES: [&str; 40] = [
    "ka", "lo", "mi", "ra", "ten", "sa", "vel", "dor", "an", "bri", "co", "ja", "ne", "lu", "mar", "tho", "ri", "el",
    "wen", "fa", "gus", "ha", "is", "ol", "pe", "qui", "sto", "ur", "ya", "zel", "ber", "nor", "ti", "gra", "del",
    "mo", "su", "ven", "ald", "rik",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    /// Chance that a main name gets a middle name.
    pub middle_name_rate: f64,
    /// Chance that a non-main form receives one character edit.
    pub noise_rate: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(identities: usize, seed: u64) -> Self {
        SynthConfig {
            identities,
            middle_name_rate: 0.4,
            noise_rate: 0.3,
            seed,
        }
    }
}

fn name_part(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let raw: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
    let mut chars = raw.chars();
    let first = chars.next().expect("non-empty").to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

/// Distinct "First [Middle] Last" records with no aliases.
pub fn raw_people(cfg: &SynthConfig) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cfg.identities);
    while out.len() < cfg.identities {
        let mut parts = vec![name_part(&mut rng)];
        if rng.gen_bool(cfg.middle_name_rate) {
            parts.push(name_part(&mut rng));
        }
        parts.push(name_part(&mut rng));
        let main = parts.join(" ");
        if seen.insert(main.to_lowercase()) {
            out.push(RawRecord {
                source_id: format!("synth-{}", out.len()),
                kind: EntityKind::Person,
                main,
                aliases: Vec::new(),
            });
        }
    }
    out
}

/// One substitution, deletion, insertion or transposition inside a word of at least 3 letters.
fn edit(name: &str, rng: &mut ChaCha8Rng) -> Option<String> {
    let chars: Vec<char> = name.chars().collect();
    let mut positions = Vec::new();
    let mut start = 0;
    for i in 0..=chars.len() {
        if i == chars.len() || !chars[i].is_alphabetic() {
            if i - start >= 3 {
                positions.extend(start..i);
            }
            start = i + 1;
        }
    }
    let &pos = positions.choose(rng)?;
    let letter = |rng: &mut ChaCha8Rng, like: char| {
        let c = (b'a' + rng.gen_range(0..26u8)) as char;
        if like.is_uppercase() {
            c.to_ascii_uppercase()
        } else {
            c
        }
    };
    let mut out = chars.clone();
    match rng.gen_range(0..4) {
        0 => out[pos] = letter(rng, chars[pos]),
        1 => {
            out.remove(pos);
        }
        2 => out.insert(pos + 1, letter(rng, 'a')),
        _ => {
            if pos + 1 < chars.len() && chars[pos + 1].is_alphabetic() {
                out.swap(pos, pos + 1);
            } else {
                out[pos] = letter(rng, chars[pos]);
            }
        }
    }
    Some(out.into_iter().collect())
}

/// Applies single-character edits to non-main forms. Edits that would
/// duplicate another form of the same entity are skipped.
pub fn add_noise(entities: &mut [EntityRecord], rate: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in entities {
        for i in 1..e.names.len() {
            if !rng.gen_bool(rate) {
                continue;
            }
            if let Some(new) = edit(&e.names[i], &mut rng) {
                let lower = new.to_lowercase();
                if e.names.iter().all(|n| n.to_lowercase() != lower) {
                    e.names[i] = new;
                }
            }
        }
    }
}

/// Augmented, noisy person entities, numbered 0..n.
pub fn synthetic_people(cfg: &SynthConfig) -> Vec<EntityRecord> {
    let (mut entities, _) = finalize_dataset(&raw_people(cfg), EntityKind::Person);
    add_noise(&mut entities, cfg.noise_rate, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    entities
}
