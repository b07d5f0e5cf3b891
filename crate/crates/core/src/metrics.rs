//! ROUGE-1/2/L and the LiveQA answer-quality metrics.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Builds a score from overlap counts; empty denominators give 0.
    pub fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(overlap, hyp_total);
        let recall = ratio(overlap, ref_total);
        let f1 = if precision == 0.0 || recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

/// Lowercases and splits on whitespace, with each punctuation mark its own token.
pub fn rouge_tokenize(text: &str) -> Vec<String> {
    crate::tokenizer::pre_tokenize(text)
}

fn ngram_counts<'a, S: AsRef<str>>(tokens: &'a [S], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram overlap, `n` ∈ {1, 2}.
pub fn rouge_n<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> Result<RougeScore> {
    if !(1..=2).contains(&n) {
        return Err(Error::invalid(format!("ROUGE-N supports n = 1 or 2, got {n}")));
    }
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(RougeScore::from_counts(
        overlap,
        h.values().sum(),
        r.values().sum(),
    ))
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> RougeScore {
    RougeScore::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RougeTriple {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

fn mean(scores: &[RougeScore]) -> RougeScore {
    let n = scores.len() as f64;
    RougeScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Macro average over (hypothesis, reference) text pairs.
pub fn corpus_rouge<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<RougeTriple> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::invalid("no pairs to score"));
    }
    let (mut r1, mut r2, mut rl) = (Vec::new(), Vec::new(), Vec::new());
    for (h, r) in hyps.iter().zip(refs) {
        let h = rouge_tokenize(h.as_ref());
        let r = rouge_tokenize(r.as_ref());
        r1.push(rouge_n(&h, &r, 1)?);
        r2.push(rouge_n(&h, &r, 2)?);
        rl.push(rouge_l(&h, &r));
    }
    Ok(RougeTriple {
        rouge1: mean(&r1),
        rouge2: mean(&r2),
        rouge_l: mean(&rl),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct QaMetrics {
    pub avg_score: f64,
    pub succ_2: f64,
    pub succ_3: f64,
    pub succ_4: f64,
    pub prec_2: f64,
    pub prec_3: f64,
    pub prec_4: f64,
}

impl QaMetrics {
    pub fn succ(&self, k: u8) -> f64 {
        match k {
            2 => self.succ_2,
            3 => self.succ_3,
            _ => self.succ_4,
        }
    }

    pub fn prec(&self, k: u8) -> f64 {
        match k {
            2 => self.prec_2,
            3 => self.prec_3,
            _ => self.prec_4,
        }
    }
}

/// `grades[i]` is `None` for an unanswered question; unanswered questions
/// score as grade 1 in the average.
pub fn liveqa_metrics(grades: &[Option<u8>], total: usize) -> Result<QaMetrics> {
    if grades.len() > total {
        return Err(Error::invalid(format!(
            "{} grades for {total} questions",
            grades.len()
        )));
    }
    if let Some(g) = grades.iter().flatten().find(|g| !(1..=4).contains(*g)) {
        return Err(Error::invalid(format!("grade {g} outside 1-4")));
    }
    if total == 0 {
        return Ok(QaMetrics::default());
    }
    let answered: Vec<u8> = grades.iter().flatten().copied().collect();
    let avg_score = answered.iter().map(|&g| f64::from(g - 1)).sum::<f64>() / total as f64;
    let at_least = |k: u8| answered.iter().filter(|&&g| g >= k).count() as f64;
    let succ = |k| at_least(k) / total as f64;
    let prec = |k| {
        if answered.is_empty() {
            0.0
        } else {
            at_least(k) / answered.len() as f64
        }
    };
    Ok(QaMetrics {
        avg_score,
        succ_2: succ(2),
        succ_3: succ(3),
        succ_4: succ(4),
        prec_2: prec(2),
        prec_3: prec(3),
        prec_4: prec(4),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        rouge_tokenize(s)
    }

    #[test]
    fn hand_examples() {
        let s = rouge_n(&toks("the cat"), &toks("the cat sat"), 1).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f1 - 0.8).abs() < 1e-12);

        let s = rouge_n(&toks("a b c"), &toks("a b d"), 2).unwrap();
        assert!((s.precision - 0.5).abs() < 1e-12 && (s.recall - 0.5).abs() < 1e-12 && (s.f1 - 0.5).abs() < 1e-12);

        let s = rouge_l(&toks("the cat sat"), &toks("the cat"));
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12 && s.recall == 1.0 && (s.f1 - 0.8).abs() < 1e-12);

        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), RougeScore::default());
        assert!(rouge_n(&toks("a"), &toks("a"), 3).is_err());
    }

    #[test]
    fn clipping_counts_repeats_once() {
        let s = rouge_n(&toks("the the the"), &toks("the cat"), 1).unwrap();
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn corpus_average() {
        let t = corpus_rouge(&["a b", "x"], &["a b", "y"]).unwrap();
        assert!((t.rouge1.f1 - 0.5).abs() < 1e-12);
        let one = corpus_rouge(&["the cat"], &["the cat sat"]).unwrap();
        assert!((one.rouge1.f1 - 0.8).abs() < 1e-12);
        assert!(corpus_rouge(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn liveqa_hand_examples() {
        let m = liveqa_metrics(&[Some(4), Some(3), Some(2), Some(1)], 4).unwrap();
        assert_eq!(m.avg_score, 1.5);
        assert_eq!(m.succ_2, 0.75);
        assert_eq!(m.succ_4, 0.25);
        assert_eq!(m.prec_2, 0.75);

        let m = liveqa_metrics(&[Some(4), Some(2), Some(2)], 4).unwrap();
        assert_eq!(m.succ_2, 0.75);
        assert_eq!(m.prec_2, 1.0);

        let m = liveqa_metrics(&[None, None], 3).unwrap();
        assert_eq!(m, QaMetrics::default());
        assert!(liveqa_metrics(&[Some(5)], 1).is_err());
        assert!(liveqa_metrics(&[Some(1), Some(1)], 1).is_err());
    }

    proptest! {
        #[test]
        fn rouge_bounded_and_symmetric(
            a in prop::collection::vec(0u8..4, 0..8),
            b in prop::collection::vec(0u8..4, 0..8),
        ) {
            let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let b: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            for n in 1..=2 {
                let ab = rouge_n(&a, &b, n).unwrap();
                let ba = rouge_n(&b, &a, n).unwrap();
                prop_assert_eq!(ab.precision, ba.recall);
                prop_assert_eq!(ab.recall, ba.precision);
                for v in [ab.precision, ab.recall, ab.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            let l = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&l.f1));
            if !a.is_empty() {
                prop_assert_eq!(rouge_l(&a, &a).f1, 1.0);
            }
        }

        #[test]
        fn qa_metric_orderings(grades in prop::collection::vec(prop::option::of(1u8..=4), 0..20), extra in 0usize..5) {
            let total = grades.len() + extra;
            let m = liveqa_metrics(&grades, total).unwrap();
            prop_assert!((0.0..=3.0).contains(&m.avg_score));
            for k in 2..=4u8 {
                prop_assert!(m.prec(k) >= m.succ(k));
            }
            prop_assert!(m.succ_2 >= m.succ_3 && m.succ_3 >= m.succ_4);
            prop_assert!(m.prec_2 >= m.prec_3 && m.prec_3 >= m.prec_4);
        }
    }
}
