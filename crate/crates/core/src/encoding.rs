//! Name tokenization, character embedding tables and fixed-shape name encodings.
//!
//! A name is lowercased and split on whitespace, and the punctuation marks
//! `-`, `,` and `.` are split off as standalone tokens. Each token is embedded
//! as the mean of its character vectors. The token vectors are stacked into a
//! `max_tokens x dim` matrix, and unused rows are zero padding.

use std::collections::BTreeMap;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default number of token rows in an encoding.
pub const DEFAULT_MAX_TOKENS: usize = 10;
/// Default character embedding width.
pub const DEFAULT_CHAR_DIM: usize = 100;

const PUNCTUATION: [char; 3] = ['-', ',', '.'];
const RANDOM_RANGE: f32 = 0.05;

pub fn is_punctuation_token(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCTUATION.contains(&c))
}

/// Lowercase tokens of a name, in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens joined by single spaces. Tokenizing this again gives the same sequence.
    pub fn joined(&self) -> String {
        self.0.join(" ")
    }

    /// Tokens that are not standalone punctuation.
    pub fn name_parts(&self) -> impl Iterator<Item = &str> {
        self.0
            .iter()
            .map(String::as_str)
            .filter(|t| !is_punctuation_token(t))
    }
}

impl From<Vec<String>> for TokenSeq {
    fn from(tokens: Vec<String>) -> Self {
        TokenSeq(tokens)
    }
}

pub fn tokenize(name: &str) -> Result<TokenSeq> {
    let trimmed = name.trim();
    if trimmed.is_empty() {
        return Err(Error::EmptyName);
    }
    let mut tokens = Vec::new();
    for word in trimmed.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if PUNCTUATION.contains(&c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    Ok(TokenSeq(tokens))
}

/// Character vectors plus a fallback for characters missing from the table.
#[derive(Debug, Clone, PartialEq)]
pub struct CharEmbeddingTable {
    dim: usize,
    entries: BTreeMap<char, Vec<f32>>,
    fallback: Vec<f32>,
}

impl CharEmbeddingTable {
    pub fn new(dim: usize, entries: BTreeMap<char, Vec<f32>>, fallback: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dim must be at least 1".into()));
        }
        if fallback.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: fallback.len(),
            });
        }
        if let Some(bad) = entries.values().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(CharEmbeddingTable {
            dim,
            entries,
            fallback,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending code-point order.
    pub fn entries(&self) -> impl Iterator<Item = (char, &[f32])> {
        self.entries.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn fallback(&self) -> &[f32] {
        &self.fallback
    }

    pub fn get(&self, c: char) -> Option<&[f32]> {
        self.entries.get(&c).map(Vec::as_slice)
    }

    pub fn lookup(&self, c: char) -> &[f32] {
        self.get(c).unwrap_or(&self.fallback)
    }
}

/// Mean of the character vectors of `token`.
pub fn token_embedding(token: &str, table: &CharEmbeddingTable) -> Vec<f64> {
    let mut out = vec![0.0; table.dim()];
    let mut count = 0usize;
    for c in token.chars() {
        for (o, v) in out.iter_mut().zip(table.lookup(c)) {
            *o += f64::from(*v);
        }
        count += 1;
    }
    if count > 1 {
        let n = count as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    out
}

/// A `max_tokens x dim` row-major matrix of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct NameEncoding {
    max_tokens: usize,
    dim: usize,
    valid_len: usize,
    data: Vec<f64>,
}

impl NameEncoding {
    /// Builds an encoding from rows; rows past `max_tokens` are dropped.
    pub fn from_rows(rows: &[Vec<f64>], max_tokens: usize, dim: usize) -> Result<Self> {
        let mut data = vec![0.0; max_tokens * dim];
        let valid_len = rows.len().min(max_tokens);
        for (i, row) in rows.iter().take(valid_len).enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data[i * dim..(i + 1) * dim].copy_from_slice(row);
        }
        Ok(NameEncoding {
            max_tokens,
            dim,
            valid_len,
            data,
        })
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// The whole matrix, row-major.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub fn encode_name(
    tokens: &TokenSeq,
    table: &CharEmbeddingTable,
    max_tokens: usize,
) -> Result<NameEncoding> {
    if tokens.is_empty() {
        return Err(Error::EmptyName);
    }
    let rows: Vec<Vec<f64>> = tokens
        .tokens()
        .iter()
        .take(max_tokens)
        .map(|t| token_embedding(t, table))
        .collect();
    NameEncoding::from_rows(&rows, max_tokens, table.dim())
}

/// Tokenize and encode in one step.
pub fn encode_str(name: &str, table: &CharEmbeddingTable, max_tokens: usize) -> Result<NameEncoding> {
    encode_name(&tokenize(name)?, table, max_tokens)
}

/// Parses the text table format: one `<char> <v1> ... <vD>` entry per line.
///
/// The first entry fixes `dim`. Blank lines are skipped. The fallback is all-zero.
pub fn load_char_embeddings<R: Read>(mut source: R) -> Result<CharEmbeddingTable> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_char_embeddings(&bytes)
}

pub fn parse_char_embeddings(bytes: &[u8]) -> Result<CharEmbeddingTable> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::format(format!("invalid UTF-8: {e}")))?;
    let mut entries = BTreeMap::new();
    let mut dim = None;
    for (lineno, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let mut chars = line.chars();
        let key = chars.next().expect("non-empty line");
        let rest = chars.as_str();
        let values = rest
            .strip_prefix(' ')
            .ok_or_else(|| Error::format(format!("line {}: expected a space after the character", lineno + 1)))?;
        let vector = values
            .split_whitespace()
            .map(|field| {
                field
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(format!("line {}: bad value {field:?}", lineno + 1)))
            })
            .collect::<Result<Vec<f32>>>()?;
        match dim {
            None if vector.is_empty() => {
                return Err(Error::format(format!("line {}: no values", lineno + 1)));
            }
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(Error::format(format!(
                    "line {}: expected {d} values, found {}",
                    lineno + 1,
                    vector.len()
                )));
            }
            Some(_) => {}
        }
        if entries.insert(key, vector).is_some() {
            return Err(Error::format(format!("line {}: duplicate character {key:?}", lineno + 1)));
        }
    }
    let dim = dim.ok_or(Error::EmptySource)?;
    CharEmbeddingTable::new(dim, entries, vec![0.0; dim])
}

/// Writes a table in the same text format `load_char_embeddings` reads.
pub fn write_char_embeddings<W: std::io::Write>(table: &CharEmbeddingTable, mut sink: W) -> Result<()> {
    for (c, v) in table.entries() {
        write!(sink, "{c}")?;
        for x in v {
            write!(sink, " {x}")?;
        }
        writeln!(sink)?;
    }
    Ok(())
}

/// Seeded table with values uniform in [-0.05, 0.05]; the fallback is random too.
pub fn random_char_embeddings<I>(charset: I, dim: usize, seed: u64) -> Result<CharEmbeddingTable>
where
    I: IntoIterator<Item = char>,
{
    if dim == 0 {
        return Err(Error::InvalidConfig("embedding dim must be at least 1".into()));
    }
    let chars: std::collections::BTreeSet<char> = charset.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..dim)
            .map(|_| rng.gen_range(-RANDOM_RANGE..=RANDOM_RANGE))
            .collect()
    };
    let fallback = sample(&mut rng);
    let entries = chars.into_iter().map(|c| (c, sample(&mut rng))).collect();
    CharEmbeddingTable::new(dim, entries, fallback)
}

/// Printable Latin-1 characters, lowercase letters only (names are lowercased before lookup).
pub fn latin1_charset() -> impl Iterator<Item = char> {
    (0x20u32..=0xFF)
        .filter_map(char::from_u32)
        .filter(|c| !c.is_control() && !c.is_whitespace() && !c.is_uppercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_table() -> CharEmbeddingTable {
        let mut entries = BTreeMap::new();
        entries.insert('j', vec![1.0, 0.0, 0.0, 0.0]);
        entries.insert('o', vec![0.0, 1.0, 0.0, 0.0]);
        CharEmbeddingTable::new(4, entries, vec![0.0; 4]).unwrap()
    }

    fn toks(seq: &TokenSeq) -> Vec<&str> {
        seq.tokens().iter().map(String::as_str).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(toks(&tokenize("Adams, Douglas").unwrap()), ["adams", ",", "douglas"]);
        assert_eq!(toks(&tokenize("D. Adams").unwrap()), ["d", ".", "adams"]);
        assert_eq!(
            toks(&tokenize("Jean-Luc Picard").unwrap()),
            ["jean", "-", "luc", "picard"]
        );
    }

    #[test]
    fn tokenize_rejects_blank() {
        assert!(matches!(tokenize("   \t"), Err(Error::EmptyName)));
        assert!(matches!(tokenize(""), Err(Error::EmptyName)));
    }

    #[test]
    fn other_punctuation_stays_inside_tokens() {
        assert_eq!(toks(&tokenize("O'Brien (jr)").unwrap()), ["o'brien", "(jr)"]);
        assert_eq!(toks(&tokenize("a...b").unwrap()), ["a", ".", ".", ".", "b"]);
    }

    #[test]
    fn token_embedding_examples() {
        let t = toy_table();
        assert_eq!(token_embedding("jo", &t), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(token_embedding("j", &t), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(token_embedding("q", &t), vec![0.0; 4]);
    }

    #[test]
    fn encode_pads_with_zero_rows() {
        let t = toy_table();
        let enc = encode_name(&TokenSeq::from(vec!["jo".to_string()]), &t, 3).unwrap();
        assert_eq!(enc.valid_len(), 1);
        assert_eq!(
            enc.as_slice(),
            &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn encode_truncates_long_names() {
        let t = toy_table();
        let tokens: Vec<String> = (0..12).map(|i| if i < 10 { "j" } else { "o" }.to_string()).collect();
        let enc = encode_name(&TokenSeq::from(tokens), &t, 10).unwrap();
        assert_eq!(enc.valid_len(), 10);
        // the two dropped tokens were the only 'o' tokens
        assert!((0..10).all(|i| enc.row(i) == [1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn encode_empty_is_an_error() {
        assert!(matches!(
            encode_name(&TokenSeq::from(vec![]), &toy_table(), 3),
            Err(Error::EmptyName)
        ));
    }

    #[test]
    fn load_two_lines() {
        let t = load_char_embeddings("a 0.1 0.2 0.3\nb 1 2 3\n".as_bytes()).unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get('b').unwrap(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.fallback(), &[0.0; 3]);
    }

    #[test]
    fn load_inconsistent_dim() {
        let err = load_char_embeddings("a 1 2 3 4\nb 1 2 3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn load_non_numeric() {
        assert!(matches!(
            load_char_embeddings("a 1 x 3\n".as_bytes()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            load_char_embeddings("a 1 NaN 3\n".as_bytes()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn load_empty() {
        assert!(matches!(load_char_embeddings(&b""[..]), Err(Error::EmptySource)));
        assert!(matches!(load_char_embeddings(&b"\n\n"[..]), Err(Error::EmptySource)));
    }

    #[test]
    fn load_space_character_entry() {
        let t = load_char_embeddings("  0.5 0.25\nx 1 1\n".as_bytes()).unwrap();
        assert_eq!(t.get(' ').unwrap(), &[0.5, 0.25]);
    }

    #[test]
    fn write_then_load() {
        let t = random_char_embeddings("abc".chars(), 5, 3).unwrap();
        let mut buf = Vec::new();
        write_char_embeddings(&t, &mut buf).unwrap();
        let back = load_char_embeddings(buf.as_slice()).unwrap();
        assert!(t.entries().zip(back.entries()).all(|(a, b)| a == b));
    }

    #[test]
    fn random_tables() {
        let a = random_char_embeddings("abc".chars(), 8, 7).unwrap();
        let b = random_char_embeddings("abc".chars(), 8, 7).unwrap();
        let c = random_char_embeddings("abc".chars(), 8, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        let one = random_char_embeddings(['z'], 1, 0).unwrap();
        let v = one.get('z').unwrap();
        assert_eq!(v.len(), 1);
        assert!((-0.05..=0.05).contains(&v[0]));
    }

    #[test]
    fn latin1_charset_is_lowercase_printable() {
        let set: Vec<char> = latin1_charset().collect();
        assert!(set.contains(&'a') && set.contains(&'é') && set.contains(&','));
        assert!(!set.contains(&'A') && !set.contains(&' '));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tokenize_idempotent(name in "[A-Za-z ,.\\-']{1,40}") {
                if let Ok(seq) = tokenize(&name) {
                    let again = tokenize(&seq.joined()).unwrap();
                    prop_assert_eq!(&again, &seq);
                    for t in seq.tokens() {
                        prop_assert!(!t.is_empty());
                        prop_assert!(!t.chars().any(char::is_whitespace));
                        prop_assert!(t.len() == 1 || !t.chars().any(|c| PUNCTUATION.contains(&c)));
                    }
                }
            }

            #[test]
            fn encoding_shape(name in "[a-z ,.\\-]{1,80}", max_tokens in 1usize..12) {
                let table = random_char_embeddings(latin1_charset(), 6, 1).unwrap();
                if let Ok(seq) = tokenize(&name) {
                    let enc = encode_name(&seq, &table, max_tokens).unwrap();
                    prop_assert_eq!(enc.as_slice().len(), max_tokens * 6);
                    prop_assert!(enc.valid_len() <= max_tokens);
                    for i in enc.valid_len()..max_tokens {
                        prop_assert!(enc.row(i).iter().all(|x| *x == 0.0));
                    }
                }
            }

            #[test]
            fn two_char_mean(a in "[a-z]", b in "[a-z]") {
                let table = random_char_embeddings(latin1_charset(), 5, 9).unwrap();
                let ab = token_embedding(&format!("{a}{b}"), &table);
                let ea = token_embedding(&a, &table);
                let eb = token_embedding(&b, &table);
                for i in 0..5 {
                    prop_assert!((ab[i] - (ea[i] + eb[i]) / 2.0).abs() < 1e-12);
                }
            }
        }
    }
}
