//! Packing question/summary pairs into model inputs, the prefix-LM attention
//! mask, the three Cloze masking strategies, gazetteer entity tagging and the
//! keyword heuristic for question types.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{pre_tokenize, Vocab, CLS, MASK, NUM_RESERVED, SEP};

pub const DEFAULT_MAX_Q: usize = 100;
pub const DEFAULT_MAX_S: usize = 20;

/// The seven question types; the ordinal indexes the type-embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    Information,
    Treatment,
    Testing,
    Cause,
    Physician,
    Ingredients,
    Other,
}

impl QuestionType {
    pub const ALL: [QuestionType; 7] = [
        QuestionType::Information,
        QuestionType::Treatment,
        QuestionType::Testing,
        QuestionType::Cause,
        QuestionType::Physician,
        QuestionType::Ingredients,
        QuestionType::Other,
    ];
    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            QuestionType::Information => "Information",
            QuestionType::Treatment => "Treatment",
            QuestionType::Testing => "Testing",
            QuestionType::Cause => "Cause",
            QuestionType::Physician => "Physician",
            QuestionType::Ingredients => "Ingredients",
            QuestionType::Other => "Other",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuestionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown question type {s:?}")))
    }
}

/// One packed `[CLS] q [SEP] s [SEP]` sequence plus Cloze bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    /// `|Q|` after truncation.
    pub q_len: usize,
    /// `|S|` after truncation; 0 for question-only inputs.
    pub s_len: usize,
    pub mask_positions: Vec<usize>,
    pub mask_labels: Vec<usize>,
    pub qtype: Option<QuestionType>,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows with bidirectional attention: `[CLS] q [SEP]`.
    pub fn q_span(&self) -> usize {
        self.q_len + 2
    }

    /// Causal rows: the summary tokens and the closing `[SEP]` (0 when question-only).
    pub fn s_span(&self) -> usize {
        self.ids.len() - self.q_span()
    }

    /// Absolute positions of the summary tokens (closing `[SEP]` excluded).
    pub fn summary_range(&self) -> Range<usize> {
        self.q_span()..self.q_span() + self.s_len
    }

    /// Position of the closing `[SEP]`, if the example has a summary part.
    pub fn eos_position(&self) -> Option<usize> {
        (self.s_span() > 0).then(|| self.ids.len() - 1)
    }

    pub fn summary_ids(&self) -> &[usize] {
        &self.ids[self.summary_range()]
    }

    pub fn question_ids(&self) -> &[usize] {
        &self.ids[1..1 + self.q_len]
    }

    pub fn mask_matrix(&self) -> MaskMatrix {
        build_mask_matrix(self.q_span(), self.s_span())
    }

    fn cleared(&self) -> Self {
        EncodedExample {
            mask_positions: Vec::new(),
            mask_labels: Vec::new(),
            ..self.clone()
        }
    }
}

/// Packs `[CLS] q [SEP] s [SEP]` after truncating to `max_q` / `max_s` tokens.
pub fn pack(q_ids: &[usize], s_ids: &[usize], max_q: usize, max_s: usize) -> Result<EncodedExample> {
    if q_ids.is_empty() {
        return Err(Error::invalid("empty question"));
    }
    if s_ids.is_empty() {
        return Err(Error::invalid("empty summary"));
    }
    let q = &q_ids[..q_ids.len().min(max_q)];
    let s = &s_ids[..s_ids.len().min(max_s)];
    let mut ids = Vec::with_capacity(q.len() + s.len() + 3);
    ids.push(CLS);
    ids.extend_from_slice(q);
    ids.push(SEP);
    ids.extend_from_slice(s);
    ids.push(SEP);
    let mut segments = vec![0; q.len() + 2];
    segments.resize(ids.len(), 1);
    Ok(EncodedExample {
        ids,
        segments,
        q_len: q.len(),
        s_len: s.len(),
        mask_positions: Vec::new(),
        mask_labels: Vec::new(),
        qtype: None,
    })
}

/// `[CLS] q [SEP]` only, for question classification.
pub fn pack_question(q_ids: &[usize], max_q: usize) -> Result<EncodedExample> {
    if q_ids.is_empty() {
        return Err(Error::invalid("empty question"));
    }
    let q = &q_ids[..q_ids.len().min(max_q)];
    let mut ids = Vec::with_capacity(q.len() + 2);
    ids.push(CLS);
    ids.extend_from_slice(q);
    ids.push(SEP);
    Ok(EncodedExample {
        segments: vec![0; ids.len()],
        ids,
        q_len: q.len(),
        s_len: 0,
        mask_positions: Vec::new(),
        mask_labels: Vec::new(),
        qtype: None,
    })
}

/// Additive attention mask: row `i` may attend column `j` iff entry is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub q_span: usize,
    pub s_span: usize,
    entries: Tensor,
}

impl MaskMatrix {
    pub fn n(&self) -> usize {
        self.q_span + self.s_span
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get2(i, j)
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == 0.0
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.entries
    }
}

/// Question rows see the whole question and nothing of the summary; summary
/// row `j` sees the question and summary rows up to and including `j`.
pub fn build_mask_matrix(q_span: usize, s_span: usize) -> MaskMatrix {
    let n = q_span + s_span;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in q_span..n {
            if j > i {
                data[i * n + j] = f64::NEG_INFINITY;
            }
        }
    }
    MaskMatrix {
        q_span,
        s_span,
        entries: Tensor::new(vec![n, n], data).expect("n×n"),
    }
}

/// Knobs for the Cloze masking strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClozeConfig {
    /// Per-token selection probability for sequence-to-sequence masking.
    pub select_rate: f64,
    /// Per-span selection probability for entity masking.
    pub entity_prob: f64,
    /// Lets sequence-to-sequence masking also pick the closing `[SEP]`, which
    /// is how the model learns where a summary ends.
    pub mask_eos: bool,
}

impl Default for ClozeConfig {
    fn default() -> Self {
        ClozeConfig {
            select_rate: 0.15,
            entity_prob: 0.5,
            mask_eos: true,
        }
    }
}

/// What happens to a token picked for sequence-to-sequence masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random(usize),
    Keep,
}

/// 80% `[MASK]`, 10% a uniformly random non-reserved token, 10% unchanged.
pub fn draw_replacement<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize) -> Replacement {
    let u: f64 = rng.random();
    if u < 0.8 {
        Replacement::Mask
    } else if u < 0.9 {
        if vocab_size > NUM_RESERVED {
            Replacement::Random(rng.random_range(NUM_RESERVED..vocab_size))
        } else {
            Replacement::Mask
        }
    } else {
        Replacement::Keep
    }
}

fn finish_masking(mut ex: EncodedExample, mut positions: Vec<usize>) -> EncodedExample {
    positions.sort_unstable();
    positions.dedup();
    ex.mask_labels = positions.iter().map(|&p| ex.ids[p]).collect();
    ex.mask_positions = positions;
    ex
}

/// Cloze task 1: independent per-token selection (at least one forced),
/// then the 80/10/10 replacement rule.
pub fn mask_s2s<R: Rng + ?Sized>(
    example: &EncodedExample,
    rng: &mut R,
    cfg: &ClozeConfig,
    vocab_size: usize,
) -> Result<EncodedExample> {
    let mut candidates: Vec<usize> = example.summary_range().collect();
    if cfg.mask_eos {
        candidates.extend(example.eos_position());
    }
    if candidates.is_empty() {
        return Err(Error::invalid("no maskable summary tokens"));
    }
    let mut chosen: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < cfg.select_rate)
        .collect();
    if chosen.is_empty() {
        chosen.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let base = example.cleared();
    let mut out = finish_masking(base, chosen);
    for &p in &out.mask_positions {
        match draw_replacement(rng, vocab_size) {
            Replacement::Mask => out.ids[p] = MASK,
            Replacement::Random(t) => out.ids[p] = t,
            Replacement::Keep => {}
        }
    }
    Ok(out)
}

/// Cloze task 2: masks one contiguous n-gram, `n` uniform in {1,2,3}
/// (clamped to the summary length) at a uniform start.
pub fn mask_ngram<R: Rng + ?Sized>(example: &EncodedExample, rng: &mut R) -> Result<EncodedExample> {
    let len = example.s_len;
    if len == 0 {
        return Err(Error::invalid("no maskable summary tokens"));
    }
    let n = rng.random_range(1..=3usize).min(len);
    let start = rng.random_range(0..=len - n);
    let offset = example.summary_range().start;
    let positions = (offset + start..offset + start + n).collect();
    let mut out = finish_masking(example.cleared(), positions);
    for &p in &out.mask_positions {
        out.ids[p] = MASK;
    }
    Ok(out)
}

/// Cloze task 3: masks each entity span (token ranges relative to the
/// summary start) with probability `entity_prob`, forcing at least one.
/// Without spans it falls back to [`mask_s2s`].
pub fn mask_entities<R: Rng + ?Sized>(
    example: &EncodedExample,
    spans: &[Range<usize>],
    rng: &mut R,
    cfg: &ClozeConfig,
    vocab_size: usize,
) -> Result<EncodedExample> {
    let spans: Vec<&Range<usize>> = spans
        .iter()
        .filter(|s| !s.is_empty() && s.end <= example.s_len)
        .collect();
    if spans.is_empty() {
        return mask_s2s(example, rng, cfg, vocab_size);
    }
    let mut picked: Vec<&Range<usize>> = spans
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < cfg.entity_prob)
        .collect();
    if picked.is_empty() {
        picked.push(spans[rng.random_range(0..spans.len())]);
    }
    let offset = example.summary_range().start;
    let positions = picked
        .iter()
        .flat_map(|s| (*s).clone())
        .map(|p| p + offset)
        .collect();
    let mut out = finish_masking(example.cleared(), positions);
    for &p in &out.mask_positions {
        out.ids[p] = MASK;
    }
    Ok(out)
}

/// Dictionary of (possibly multi-word) entity surface forms.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gazetteer {
    /// Each entry pre-tokenized into words.
    entries: Vec<Vec<String>>,
}

impl Gazetteer {
    pub fn new<'s>(entries: impl IntoIterator<Item = &'s str>) -> Self {
        let mut entries: Vec<Vec<String>> = entries
            .into_iter()
            .map(pre_tokenize)
            .filter(|w| !w.is_empty())
            .collect();
        // Longest first so the first hit at a position is the longest match.
        entries.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        entries.dedup();
        Gazetteer { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Gazetteer::new(text.lines()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Left-to-right longest match over words; returns word-index ranges.
    pub fn match_words(&self, words: &[String]) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let hit = self
                .entries
                .iter()
                .find(|e| words.len() - i >= e.len() && words[i..i + e.len()] == e[..]);
            match hit {
                Some(e) => {
                    spans.push(i..i + e.len());
                    i += e.len();
                }
                None => i += 1,
            }
        }
        spans
    }
}

/// Tags entities in a token-id sequence; spans index into `ids`.
pub fn tag_entities(ids: &[usize], vocab: &Vocab, gazetteer: &Gazetteer) -> Vec<Range<usize>> {
    if gazetteer.is_empty() {
        return Vec::new();
    }
    let words = vocab.words(ids);
    let texts: Vec<String> = words.iter().map(|(w, _)| w.clone()).collect();
    gazetteer
        .match_words(&texts)
        .into_iter()
        .map(|r| words[r.start].1.start..words[r.end - 1].1.end)
        .collect()
}

/// Candidate lemmas of a word under suffix stripping (s / es / ed / ing).
fn lemma_candidates(word: &str) -> Vec<String> {
    let mut out = vec![word.to_string()];
    let n = word.chars().count();
    let mut strip = |suffix: &str, min_len: usize, add: &str| {
        if n > min_len {
            if let Some(stem) = word.strip_suffix(suffix) {
                out.push(format!("{stem}{add}"));
            }
        }
    };
    strip("s", 2, "");
    strip("es", 3, "");
    strip("ed", 3, "");
    strip("ed", 3, "e");
    strip("ing", 4, "");
    strip("ing", 4, "e");
    out
}

fn lemma_match(word: &str, keyword: &str) -> bool {
    let a = lemma_candidates(word);
    let b = lemma_candidates(keyword);
    a.iter().any(|x| b.contains(x))
}

/// Keyword lemmas per question type (Other has none: it is the fallback).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordTable {
    entries: BTreeMap<QuestionType, Vec<Vec<String>>>,
}

impl Default for KeywordTable {
    fn default() -> Self {
        let raw: [(QuestionType, &[&str]); 6] = [
            (QuestionType::Treatment, &["treat", "treatment", "therapy", "cure"]),
            (
                QuestionType::Testing,
                &["test", "testing", "diagnose", "diagnosis", "screening"],
            ),
            (QuestionType::Cause, &["cause"]),
            (QuestionType::Physician, &["doctor", "physician", "specialist"]),
            (QuestionType::Ingredients, &["ingredient"]),
            (QuestionType::Information, &["information", "find", "what is"]),
        ];
        KeywordTable::from_map(
            raw.iter()
                .map(|(t, ks)| (*t, ks.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
        .expect("default table is valid")
    }
}

impl KeywordTable {
    pub fn from_map(map: BTreeMap<QuestionType, Vec<String>>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (t, phrases) in map {
            if t == QuestionType::Other {
                return Err(Error::Config("the Other type takes no keywords".into()));
            }
            let phrases: Vec<Vec<String>> = phrases
                .iter()
                .map(|p| p.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
                .collect();
            if phrases.iter().any(Vec::is_empty) {
                return Err(Error::Config(format!("empty keyword for {t}")));
            }
            entries.insert(t, phrases);
        }
        Ok(KeywordTable { entries })
    }

    /// Parses `{"Treatment": ["treat", ...], ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("keyword table: {e}")))?;
        let mut map = BTreeMap::new();
        for (k, v) in raw {
            let t: QuestionType = k.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            map.insert(t, v);
        }
        KeywordTable::from_map(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KeywordTable::from_json(&text)
    }

    /// The type whose keyword occurs earliest in `text` (ties at the same
    /// word go to the earlier type in enumeration order); `Other` if none.
    pub fn label(&self, text: &str) -> QuestionType {
        let words: Vec<String> = pre_tokenize(text)
            .into_iter()
            .filter(|w| w.chars().any(char::is_alphanumeric))
            .collect();
        for i in 0..words.len() {
            for (t, phrases) in &self.entries {
                let hit = phrases.iter().any(|p| {
                    words.len() - i >= p.len()
                        && p.iter().zip(&words[i..]).all(|(k, w)| lemma_match(w, k))
                });
                if hit {
                    return *t;
                }
            }
        }
        QuestionType::Other
    }
}

pub fn label_qtype(summary_text: &str, table: &KeywordTable) -> QuestionType {
    table.label(summary_text)
}
