//! TF-IDF question index with cosine nearest-question answer lookup.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::QaRecord;

pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Small English function-word list.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "am", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by", "can",
    "could", "did", "do", "does", "for", "from", "had", "has", "have", "he", "her", "him", "his",
    "how", "i", "if", "in", "into", "is", "it", "its", "me", "my", "of", "on", "or", "our", "she",
    "so", "that", "the", "their", "them", "there", "these", "they", "this", "those", "to", "was",
    "we", "were", "what", "when", "where", "which", "who", "why", "will", "with", "would", "you",
    "your",
];

/// Lowercased word tokens with punctuation dropped.
pub fn index_tokens(text: &str, stopwords: bool) -> Vec<String> {
    let stop: HashSet<&str> = if stopwords {
        STOPWORDS.iter().copied().collect()
    } else {
        HashSet::new()
    };
    crate::tokenizer::pre_tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric) && !stop.contains(t.as_str()))
        .collect()
}

/// `ln((1 + D) / (1 + df)) + 1`.
pub fn smoothed_idf(num_docs: usize, df: usize) -> f64 {
    ((1.0 + num_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocVector {
    pub id: usize,
    /// `(term id, weight)` sorted by term id, unit L2 norm.
    pub weights: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdfIndex {
    pub format_version: u32,
    pub stopwords: bool,
    pub num_docs: usize,
    pub terms: BTreeMap<String, usize>,
    pub df: Vec<usize>,
    pub docs: Vec<DocVector>,
    pub questions: Vec<String>,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub id: usize,
    pub score: f64,
    pub answer: String,
}

fn term_freqs(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    tf
}

fn normalize(mut w: Vec<(usize, f64)>) -> Option<Vec<(usize, f64)>> {
    let norm = w.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    w.iter_mut().for_each(|(_, x)| *x /= norm);
    w.sort_by_key(|(t, _)| *t);
    Some(w)
}

impl TfIdfIndex {
    pub fn build(collection: &[QaRecord], stopwords: bool) -> Result<Self> {
        if collection.is_empty() {
            return Err(Error::invalid("cannot index an empty collection"));
        }
        let tokenized: Vec<Vec<String>> = collection
            .iter()
            .map(|r| index_tokens(&r.question, stopwords))
            .collect();
        let mut terms = BTreeMap::new();
        for toks in &tokenized {
            for t in toks {
                let next = terms.len();
                terms.entry(t.clone()).or_insert(next);
            }
        }
        // Renumber in lexicographic order so the index is independent of insertion order.
        for (i, v) in terms.values_mut().enumerate() {
            *v = i;
        }
        let mut df = vec![0usize; terms.len()];
        for toks in &tokenized {
            for t in term_freqs(toks).keys() {
                df[terms[*t]] += 1;
            }
        }
        let num_docs = collection.len();
        let docs = tokenized
            .iter()
            .enumerate()
            .filter_map(|(id, toks)| {
                let w = term_freqs(toks)
                    .into_iter()
                    .map(|(t, tf)| {
                        let tid = terms[t];
                        (tid, tf as f64 * smoothed_idf(num_docs, df[tid]))
                    })
                    .collect();
                normalize(w).map(|weights| DocVector { id, weights })
            })
            .collect();
        Ok(TfIdfIndex {
            format_version: INDEX_FORMAT_VERSION,
            stopwords,
            num_docs,
            terms,
            df,
            docs,
            questions: collection.iter().map(|r| r.question.clone()).collect(),
            answers: collection.iter().map(|r| r.answer.clone()).collect(),
        })
    }

    /// Unit-norm query vector over in-vocabulary terms; `None` if there are none.
    pub fn query_vector(&self, text: &str) -> Option<Vec<(usize, f64)>> {
        let toks = index_tokens(text, self.stopwords);
        let w = term_freqs(&toks)
            .into_iter()
            .filter_map(|(t, tf)| {
                self.terms
                    .get(t)
                    .map(|&tid| (tid, tf as f64 * smoothed_idf(self.num_docs, self.df[tid])))
            })
            .collect();
        normalize(w)
    }

    /// Top-`k` documents by cosine similarity, ties broken by id.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let Some(q) = self.query_vector(query) else {
            return Ok(Vec::new());
        };
        let q: BTreeMap<usize, f64> = q.into_iter().collect();
        let mut scored: Vec<(usize, f64)> = self
            .docs
            .iter()
            .map(|d| {
                let dot: f64 = d
                    .weights
                    .iter()
                    .filter_map(|(t, w)| q.get(t).map(|qw| qw * w))
                    .sum();
                (d.id, dot.clamp(0.0, 1.0))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(id, score)| Hit {
                id,
                score,
                answer: self.answers[id].clone(),
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        crate::io::write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        let idx: TfIdfIndex = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if idx.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::Data {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("unsupported index format_version {}", idx.format_version),
            });
        }
        Ok(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(q: &str) -> QaRecord {
        QaRecord {
            question: q.into(),
            answer: format!("answer to {q}"),
        }
    }

    #[test]
    fn toy_weights_match_hand_arithmetic() {
        let coll = vec![rec("flu fever flu"), rec("flu cough"), rec("rash")];
        let idx = TfIdfIndex::build(&coll, false).unwrap();
        // D = 3; df(flu) = 2, df(fever) = 1, df(cough) = 1, df(rash) = 1.
        let idf_flu = (4.0f64 / 3.0).ln() + 1.0;
        let idf_one = 2.0f64.ln() + 1.0;
        let (wf, wv) = (2.0 * idf_flu, idf_one);
        let n = (wf * wf + wv * wv).sqrt();
        let d0 = &idx.docs[0].weights;
        let fever = idx.terms["fever"];
        let flu = idx.terms["flu"];
        let get = |t| d0.iter().find(|(x, _)| *x == t).unwrap().1;
        assert!((get(flu) - wf / n).abs() < 1e-12);
        assert!((get(fever) - wv / n).abs() < 1e-12);
        assert_eq!(idx.docs[2].weights, vec![(idx.terms["rash"], 1.0)]);
    }

    #[test]
    fn term_in_every_doc_gets_minimum_idf() {
        assert_eq!(smoothed_idf(5, 5), 1.0);
        assert!(smoothed_idf(5, 1) > smoothed_idf(5, 4));
    }

    #[test]
    fn self_query_and_no_overlap() {
        let coll = vec![rec("what causes flu"), rec("how is diabetes treated"), rec("tests for anemia")];
        let idx = TfIdfIndex::build(&coll, true).unwrap();
        let hits = idx.retrieve("how is diabetes treated", 2).unwrap();
        assert_eq!(hits[0].id, 1);
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert!(idx.retrieve("zebra", 1).unwrap().is_empty());
        assert!(idx.retrieve("what", 1).unwrap().is_empty());
        assert!(idx.retrieve("flu", 0).is_err());
    }

    #[test]
    fn stopword_only_documents_are_excluded() {
        let idx = TfIdfIndex::build(&[rec("what is it"), rec("flu")], true).unwrap();
        assert_eq!(idx.docs.len(), 1);
        for d in &idx.docs {
            let n: f64 = d.weights.iter().map(|(_, w)| w * w).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.bin");
        let idx = TfIdfIndex::build(&[rec("a flu"), rec("b cold")], false).unwrap();
        idx.save(&p).unwrap();
        assert_eq!(TfIdfIndex::load(&p).unwrap(), idx);
    }

    #[test]
    fn all_documents_ranked_monotonically() {
        let coll: Vec<QaRecord> = ["flu a", "flu b", "cold", "flu cold"].iter().map(|q| rec(q)).collect();
        let idx = TfIdfIndex::build(&coll, false).unwrap();
        let hits = idx.retrieve("flu cold", 4).unwrap();
        assert_eq!(hits.len(), 4);
        assert_eq!(hits[0].id, 3);
        for w in hits.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }
}
