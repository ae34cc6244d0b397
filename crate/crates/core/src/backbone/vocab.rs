//! Closed word-level vocabulary with per-character digits.
//!
//! Reserved ids are fixed:
//!
//! | id      | token                |
//! |---------|----------------------|
//! | 0       | `<pad>`              |
//! | 1       | `<bos>`              |
//! | 2       | `<eos>`              |
//! | 3       | `<unk>`              |
//! | 4..12   | `<emb:0>`..`<emb:7>` |
//! | 12..22  | `0`..`9`             |
//!
//! Everything after that is the sorted set of corpus words and punctuation.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{DfrError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const EMB_BASE: usize = 4;
pub const MAX_SLOTS: usize = 8;
pub const DIGIT_BASE: usize = EMB_BASE + MAX_SLOTS;
pub const N_RESERVED: usize = DIGIT_BASE + 10;

const PREAMBLE: &str = "#dfr-vocab v1 reserved=<pad>,<bos>,<eos>,<unk>,<emb:0..7>,0..9";
const CLOSING: &[&str] = &[".", ",", "?", "!", ":", ";", ")", "%", "]"];

pub fn emb_token(k: usize) -> String {
    format!("<emb:{k}>")
}

/// Splits text into lowercase surface tokens: `<emb:k>` markers, single
/// digits, runs of letters/underscores, and single punctuation characters.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '<' {
            if let Some(len) = placeholder_len(&chars[i..]) {
                out.push(chars[i..i + len].iter().collect());
                i += len;
            } else {
                out.push(c.to_string());
                i += 1;
            }
        } else if c.is_ascii_digit() {
            out.push(c.to_string());
            i += 1;
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphabetic() || chars[i] == '_') {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// Length of a `<emb:k>` marker at the start of `s`, if there is one.
fn placeholder_len(s: &[char]) -> Option<usize> {
    let prefix: Vec<char> = "<emb:".chars().collect();
    if s.len() < prefix.len() + 2 || s[..prefix.len()] != prefix[..] {
        return None;
    }
    let mut j = prefix.len();
    while j < s.len() && s[j].is_ascii_digit() {
        j += 1;
    }
    (j > prefix.len() && j < s.len() && s[j] == '>').then_some(j + 1)
}

fn is_digit_tok(t: &str) -> bool {
    t.len() == 1 && t.as_bytes()[0].is_ascii_digit()
}

/// Joins surface tokens back into text. Adjacent digits (and a `.` between
/// digits) are merged, closing punctuation attaches to the previous token,
/// and a `-` directly before a digit attaches to it.
pub fn join_tokens<S: AsRef<str>>(toks: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in toks.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 {
            let prev = toks[i - 1].as_ref();
            let glue = (is_digit_tok(prev) && is_digit_tok(t))
                || (prev == "." && is_digit_tok(t) && i >= 2 && is_digit_tok(toks[i - 2].as_ref()))
                || (t == "." && is_digit_tok(prev) && toks.get(i + 1).is_some_and(|n| is_digit_tok(n.as_ref())))
                || CLOSING.contains(&t)
                || prev == "("
                || (prev == "-" && is_digit_tok(t));
            if !glue {
                out.push(' ');
            }
        }
        out.push_str(t);
    }
    out
}

/// Canonical surface form: `join_tokens(split_tokens(text))`.
pub fn normalize(text: &str) -> String {
    join_tokens(&split_tokens(text))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens plus every distinct token in `lines`, sorted.
    pub fn build<'l>(lines: impl IntoIterator<Item = &'l str>) -> Self {
        let mut words = BTreeSet::new();
        for line in lines {
            for t in split_tokens(line) {
                words.insert(t);
            }
        }
        let mut tokens = reserved_tokens();
        let fixed: BTreeSet<String> = tokens.iter().cloned().collect();
        tokens.extend(words.into_iter().filter(|w| !fixed.contains(w)));
        Self::from_tokens(tokens).expect("built vocab is bijective")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = reserved_tokens();
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(DfrError::format("vocab", "reserved ids do not match"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DfrError::format("vocab", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn emb_id(k: usize) -> usize {
        assert!(k < MAX_SLOTS, "slot {k} exceeds {MAX_SLOTS}");
        EMB_BASE + k
    }

    pub fn emb_slot(id: usize) -> Option<usize> {
        (EMB_BASE..EMB_BASE + MAX_SLOTS).contains(&id).then(|| id - EMB_BASE)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text for `ids`, skipping `<pad>`, `<bos>` and `<eos>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i))
            .collect();
        join_tokens(&toks)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::from(PREAMBLE);
        s.push('\n');
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        if lines.next() != Some(PREAMBLE) {
            return Err(DfrError::format("vocab", "missing preamble"));
        }
        Self::from_tokens(lines.map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| DfrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| DfrError::io(path, e))?;
        Self::from_file_string(&s)
    }
}

fn reserved_tokens() -> Vec<String> {
    let mut t: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
    t.extend((0..MAX_SLOTS).map(emb_token));
    t.extend((0..10).map(|d| d.to_string()));
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_layout() {
        let v = Vocab::build(["coffee shops"]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("<emb:3>"), EMB_BASE + 3);
        assert_eq!(v.id("7"), DIGIT_BASE + 7);
        assert_eq!(v.len(), N_RESERVED + 2);
        assert_eq!(Vocab::emb_slot(Vocab::emb_id(5)), Some(5));
        assert_eq!(Vocab::emb_slot(DIGIT_BASE), None);
    }

    #[test]
    fn splitting() {
        assert_eq!(split_tokens("Coffee shops?"), ["coffee", "shops", "?"]);
        assert_eq!(split_tokens("in <emb:0>, 12"), ["in", "<emb:0>", ",", "1", "2"]);
        assert_eq!(split_tokens("<emb:>"), ["<", "emb", ":", ">"]);
        assert_eq!(join_tokens(&split_tokens("Value: -3.25 | x")), "value: -3.25 | x");
    }

    #[test]
    fn file_roundtrip() {
        let v = Vocab::build(["a b c", "hello , world"]);
        assert_eq!(Vocab::from_file_string(&v.to_file_string()).unwrap(), v);
        assert!(Vocab::from_file_string("a\nb\n").is_err());
    }
}
