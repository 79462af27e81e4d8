//! Raw name records to cleansed, augmented entities.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::encoding::{is_punctuation_token, tokenize};
use crate::error::{Error, Result};

pub const DEFAULT_ROYALTY_TITLES: [&str; 10] = [
    "king", "queen", "pope", "prince", "princess", "emperor", "empress", "tsar", "duke", "duchess",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Person,
    Company,
}

impl std::str::FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "person" => Ok(EntityKind::Person),
            "company" => Ok(EntityKind::Company),
            other => Err(Error::InvalidConfig(format!("unknown entity kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub source_id: String,
    pub kind: EntityKind,
    pub main: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: u64,
    pub kind: EntityKind,
    /// Main name first.
    pub names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropRule {
    Royalty,
    EmptyAfterStrip,
    NonLatin1,
    NoSharedPart,
    LastNameDiffers,
    NumericCode,
    Duplicate,
    TooFewForms,
    KindMismatch,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleansingReport {
    pub records_in: usize,
    pub entities_out: usize,
    pub records_dropped: BTreeMap<DropRule, usize>,
    pub aliases_dropped: BTreeMap<DropRule, usize>,
}

impl CleansingReport {
    fn merge(&mut self, other: &CleansingReport) {
        self.records_in += other.records_in;
        self.entities_out += other.entities_out;
        for (rule, n) in &other.records_dropped {
            *self.records_dropped.entry(*rule).or_default() += n;
        }
        for (rule, n) in &other.aliases_dropped {
            *self.aliases_dropped.entry(*rule).or_default() += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CleanseOutcome {
    Kept {
        /// `id` is a placeholder until finalization.
        entity: EntityRecord,
        dropped_aliases: Vec<(String, DropRule)>,
    },
    Dropped(DropRule),
}

impl CleanseOutcome {
    pub fn entity(&self) -> Option<&EntityRecord> {
        match self {
            CleanseOutcome::Kept { entity, .. } => Some(entity),
            CleanseOutcome::Dropped(_) => None,
        }
    }
}

/// Case-preserving split on whitespace and `- , .`, punctuation discarded.
fn raw_parts(name: &str) -> Vec<&str> {
    name.split(|c: char| c.is_whitespace() || matches!(c, '-' | ',' | '.'))
        .filter(|s| !s.is_empty())
        .collect()
}

fn roman_numeral() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new("^[IVXLCDM]+$").expect("valid regex"))
}

fn numeric_code() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new("^(?:T[0-9]+|[0-9]+)$").expect("valid regex"))
}

/// Royalty title word, a multi-letter Roman numeral, or "I" after a name part.
pub fn has_royalty_signal(name: &str, titles: &[&str]) -> bool {
    let parts = raw_parts(name);
    parts.iter().enumerate().any(|(i, part)| {
        let lower = part.to_lowercase();
        titles.iter().any(|t| t.eq_ignore_ascii_case(&lower))
            || (roman_numeral().is_match(part) && (part.len() >= 2 || (*part == "I" && i > 0)))
    })
}

/// Removes parenthesized spans and ellipses, then tidies whitespace.
pub fn strip_qualifiers(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut depth = 0usize;
    for c in name.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    let out = out.replace('\u{2026}', " ");
    let mut cleaned = String::with_capacity(out.len());
    let mut dots = 0usize;
    let mut chars = out.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '.' {
            dots += 1;
            if chars.peek() != Some(&'.') {
                if dots >= 3 {
                    cleaned.push(' ');
                } else {
                    cleaned.extend(std::iter::repeat_n('.', dots));
                }
                dots = 0;
            }
        } else {
            cleaned.push(c);
        }
    }
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn is_latin1(name: &str) -> bool {
    name.chars().all(|c| (c as u32) <= 0xFF)
}

fn name_part_set(name: &str) -> HashSet<String> {
    tokenize(name)
        .map(|t| t.name_parts().map(str::to_owned).collect())
        .unwrap_or_default()
}

pub fn shares_name_part(a: &str, b: &str) -> bool {
    let a = name_part_set(a);
    name_part_set(b).iter().any(|p| a.contains(p))
}

/// Candidate letters, in order, form a subsequence of the name parts' initials.
pub fn is_acronym_of(candidate: &str, name: &str) -> bool {
    let letters: Vec<char> = candidate
        .chars()
        .filter(|c| !c.is_whitespace() && !matches!(c, '-' | ',' | '.'))
        .flat_map(char::to_lowercase)
        .collect();
    if letters.is_empty() {
        return false;
    }
    let Ok(tokens) = tokenize(name) else {
        return false;
    };
    let mut initials = tokens.name_parts().filter_map(|p| p.chars().next());
    letters.iter().all(|l| initials.any(|i| i == *l))
}

/// Last name part; with a comma, the part just before the first comma.
fn last_name(name: &str) -> Option<String> {
    let tokens = tokenize(name).ok()?;
    let toks = tokens.tokens();
    let end = toks.iter().position(|t| t == ",").unwrap_or(toks.len());
    toks[..end]
        .iter()
        .rev()
        .find(|t| !is_punctuation_token(t))
        .cloned()
}

/// Strip and Latin-1 rules shared by both kinds.
fn basic_clean(name: &str) -> std::result::Result<String, DropRule> {
    let stripped = strip_qualifiers(name);
    if stripped.is_empty() {
        return Err(DropRule::EmptyAfterStrip);
    }
    if !is_latin1(&stripped) {
        return Err(DropRule::NonLatin1);
    }
    Ok(stripped)
}

fn dedup_push(names: &mut Vec<String>, seen: &mut HashSet<String>, name: String) -> bool {
    if seen.insert(name.to_lowercase()) {
        names.push(name);
        true
    } else {
        false
    }
}

fn cleanse_with<F>(rec: &RawRecord, main_rules: F, alias_rules: impl Fn(&str, &str) -> Option<DropRule>) -> CleanseOutcome
where
    F: Fn(&str) -> Option<DropRule>,
{
    if let Some(rule) = main_rules(&rec.main) {
        return CleanseOutcome::Dropped(rule);
    }
    let main = match basic_clean(&rec.main) {
        Ok(m) => m,
        Err(rule) => return CleanseOutcome::Dropped(rule),
    };
    let mut names = vec![main.clone()];
    let mut seen = HashSet::from([main.to_lowercase()]);
    let mut dropped_aliases = Vec::new();
    for alias in &rec.aliases {
        let verdict = main_rules(alias)
            .map(Err)
            .unwrap_or_else(|| basic_clean(alias))
            .and_then(|a| match alias_rules(&a, &main) {
                Some(rule) => Err(rule),
                None => Ok(a),
            });
        match verdict {
            Ok(a) => {
                if !dedup_push(&mut names, &mut seen, a) {
                    dropped_aliases.push((alias.clone(), DropRule::Duplicate));
                }
            }
            Err(rule) => dropped_aliases.push((alias.clone(), rule)),
        }
    }
    CleanseOutcome::Kept {
        entity: EntityRecord {
            id: 0,
            kind: rec.kind,
            names,
        },
        dropped_aliases,
    }
}

pub fn cleanse_person(rec: &RawRecord, royalty_titles: &[&str]) -> CleanseOutcome {
    cleanse_with(
        rec,
        |name| has_royalty_signal(name, royalty_titles).then_some(DropRule::Royalty),
        |alias, main| {
            if !shares_name_part(alias, main) {
                Some(DropRule::NoSharedPart)
            } else if last_name(alias) != last_name(main) {
                Some(DropRule::LastNameDiffers)
            } else {
                None
            }
        },
    )
}

pub fn cleanse_company(rec: &RawRecord) -> CleanseOutcome {
    cleanse_with(
        rec,
        |name| numeric_code().is_match(strip_qualifiers(name).as_str()).then_some(DropRule::NumericCode),
        |alias, main| {
            let related = shares_name_part(alias, main) || is_acronym_of(alias, main) || is_acronym_of(main, alias);
            (!related).then_some(DropRule::NoSharedPart)
        },
    )
}

fn initial(part: &str) -> String {
    part.chars().next().map(|c| format!("{c}.")).unwrap_or_default()
}

/// Appends "Last, First"-style variants for two- and three-part main names.
pub fn augment_person(ent: &EntityRecord) -> EntityRecord {
    let main = &ent.names[0];
    let parts: Vec<&str> = main.split_whitespace().collect();
    let plain = parts.iter().all(|p| !p.contains([',', '.']));
    let generated: Vec<String> = match (plain, parts.as_slice()) {
        (true, [first, last]) => vec![
            format!("{last}, {first}"),
            format!("{} {last}", initial(first)),
            format!("{last}, {}", initial(first)),
        ],
        (true, [first, middle, last]) => vec![
            format!("{last}, {first}"),
            format!("{} {last}", initial(first)),
            format!("{last}, {}", initial(first)),
            format!("{first} {} {last}", initial(middle)),
            format!("{last}, {first} {middle}"),
            format!("{last}, {first} {}", initial(middle)),
        ],
        _ => Vec::new(),
    };
    let mut names = Vec::with_capacity(ent.names.len() + generated.len());
    let mut seen = HashSet::new();
    for name in ent.names.iter().cloned().chain(generated) {
        dedup_push(&mut names, &mut seen, name);
    }
    EntityRecord {
        id: ent.id,
        kind: ent.kind,
        names,
    }
}

/// Cleanses (and, for people, augments) every record of `kind`, drops entities
/// with fewer than two forms, and numbers the rest 0..n in input order.
pub fn finalize_dataset(records: &[RawRecord], kind: EntityKind) -> (Vec<EntityRecord>, CleansingReport) {
    let outcomes: Vec<(Option<EntityRecord>, CleansingReport)> = records
        .par_iter()
        .map(|rec| {
            let mut report = CleansingReport {
                records_in: 1,
                ..Default::default()
            };
            if rec.kind != kind {
                report.records_dropped.insert(DropRule::KindMismatch, 1);
                return (None, report);
            }
            let outcome = match kind {
                EntityKind::Person => cleanse_person(rec, &DEFAULT_ROYALTY_TITLES),
                EntityKind::Company => cleanse_company(rec),
            };
            match outcome {
                CleanseOutcome::Dropped(rule) => {
                    report.records_dropped.insert(rule, 1);
                    (None, report)
                }
                CleanseOutcome::Kept {
                    entity,
                    dropped_aliases,
                } => {
                    for (_, rule) in dropped_aliases {
                        *report.aliases_dropped.entry(rule).or_default() += 1;
                    }
                    let entity = match kind {
                        EntityKind::Person => augment_person(&entity),
                        EntityKind::Company => entity,
                    };
                    if entity.names.len() < 2 {
                        report.records_dropped.insert(DropRule::TooFewForms, 1);
                        (None, report)
                    } else {
                        (Some(entity), report)
                    }
                }
            }
        })
        .collect();

    let mut report = CleansingReport::default();
    let mut entities = Vec::new();
    for (entity, part) in outcomes {
        report.merge(&part);
        if let Some(mut e) = entity {
            e.id = entities.len() as u64;
            entities.push(e);
        }
    }
    report.entities_out = entities.len();
    (entities, report)
}

fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(source: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::format(format!("line {}: {e}", lineno + 1)))?;
        out.push(value);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize, W: Write>(values: &[T], mut sink: W) -> Result<()> {
    for v in values {
        serde_json::to_writer(&mut sink, v)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_raw_records<R: BufRead>(source: R) -> Result<Vec<RawRecord>> {
    let records: Vec<RawRecord> = read_jsonl(source)?;
    if let Some(r) = records.iter().find(|r| r.main.trim().is_empty()) {
        return Err(Error::format(format!("record {:?} has an empty main name", r.source_id)));
    }
    Ok(records)
}

pub fn write_raw_records<W: Write>(records: &[RawRecord], sink: W) -> Result<()> {
    write_jsonl(records, sink)
}

pub fn read_entities<R: BufRead>(source: R) -> Result<Vec<EntityRecord>> {
    let entities: Vec<EntityRecord> = read_jsonl(source)?;
    let mut ids = HashSet::new();
    for e in &entities {
        if e.names.is_empty() {
            return Err(Error::format(format!("entity {} has no names", e.id)));
        }
        if !ids.insert(e.id) {
            return Err(Error::DuplicateId(e.id));
        }
    }
    Ok(entities)
}

pub fn write_entities<W: Write>(entities: &[EntityRecord], sink: W) -> Result<()> {
    write_jsonl(entities, sink)
}
