//! Subword vocabulary with WordPiece-style greedy longest-match encoding.
//!
//! Training merges the most frequent adjacent piece pair until the target
//! size is reached (ties broken lexicographically), so the vocabulary is a
//! pure function of the corpus. Continuation pieces carry a `##` prefix.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_RESERVED: usize = 5;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

/// Lowercases and splits into words; every non-alphanumeric, non-space
/// character becomes its own word.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list; the first five
    /// entries must be the reserved tokens in order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED
            || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r)
        {
            return Err(Error::invalid(format!(
                "vocabulary must start with {RESERVED_TOKENS:?}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::invalid(format!("empty token at id {i}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text.lines().map(str::to_string).collect();
        Vocab::from_tokens(tokens).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Greedy longest-match segmentation of a single (already lowercased) word.
    /// Returns `[UNK]` alone when any remainder cannot be matched.
    pub fn encode_word(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            return vec![UNK];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let piece: String = chars[start..end].iter().collect();
                let key = if start > 0 {
                    format!("{CONTINUATION}{piece}")
                } else {
                    piece
                };
                if let Some(id) = self.id(&key) {
                    if id >= NUM_RESERVED {
                        found = Some((id, end));
                        break;
                    }
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        pre_tokenize(text)
            .iter()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Joins pieces back into space-separated words, dropping padding and
    /// structural tokens.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::IndexOutOfRange {
                what: "token id",
                index: id,
                limit: self.len(),
            })?;
            if matches!(id, PAD | CLS | SEP) {
                continue;
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if id >= NUM_RESERVED && !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    /// Groups token ids into words: returns `(word text, token range)` pairs,
    /// where each word starts at a non-continuation piece.
    pub fn words(&self, ids: &[usize]) -> Vec<(String, std::ops::Range<usize>)> {
        let mut words: Vec<(String, std::ops::Range<usize>)> = Vec::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self.token(id).unwrap_or("[UNK]");
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if id >= NUM_RESERVED && !words.is_empty() => {
                    let last = words.last_mut().expect("non-empty");
                    last.0.push_str(rest);
                    last.1.end = i + 1;
                }
                _ => words.push((tok.to_string(), i..i + 1)),
            }
        }
        words
    }
}

fn merge_pair(left: &str, right: &str) -> String {
    format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(right))
}

/// Trains a vocabulary of at most `target_size` entries (reserved tokens included).
pub fn build_vocab<'s>(corpus: impl IntoIterator<Item = &'s str>, target_size: usize) -> Result<Vocab> {
    if target_size <= NUM_RESERVED {
        return Err(Error::Config(format!(
            "vocabulary size must exceed {NUM_RESERVED}, got {target_size}"
        )));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in corpus {
        for w in pre_tokenize(line) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }

    let mut words: Vec<(Vec<String>, u64)> = counts
        .into_iter()
        .map(|(w, c)| {
            let pieces = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    if i == 0 {
                        ch.to_string()
                    } else {
                        format!("{CONTINUATION}{ch}")
                    }
                })
                .collect();
            (pieces, c)
        })
        .collect();

    let mut alphabet: BTreeMap<String, u64> = BTreeMap::new();
    for (pieces, c) in &words {
        for p in pieces {
            *alphabet.entry(p.clone()).or_default() += c;
        }
    }
    let mut alphabet: Vec<(String, u64)> = alphabet
        .into_iter()
        .filter(|(p, _)| !RESERVED_TOKENS.contains(&p.as_str()))
        .collect();
    alphabet.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    alphabet.truncate(target_size - NUM_RESERVED);
    alphabet.sort_by(|a, b| a.0.cmp(&b.0));

    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut known: HashMap<String, usize> =
        tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    for (p, _) in alphabet {
        known.insert(p.clone(), tokens.len());
        tokens.push(p);
    }

    while tokens.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (pieces, c) in &words {
            for w in pieces.windows(2) {
                if known.contains_key(&w[0]) && known.contains_key(&w[1]) {
                    *pairs.entry((&w[0], &w[1])).or_default() += c;
                }
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so the first maximum wins ties.
        let best = pairs
            .iter()
            .fold(None::<(&(&str, &str), u64)>, |acc, (k, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((k, c)),
            })
            .map(|(k, _)| (k.0.to_string(), k.1.to_string()));
        let Some((left, right)) = best else { break };
        let merged = merge_pair(&left, &right);
        for (pieces, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < pieces.len() {
                if pieces[i] == left && pieces[i + 1] == right {
                    pieces[i] = merged.clone();
                    pieces.remove(i + 1);
                }
                i += 1;
            }
        }
        if !known.contains_key(&merged) {
            known.insert(merged.clone(), tokens.len());
            tokens.push(merged);
        }
    }
    Vocab::from_tokens(tokens)
}
