//! Beam-search generation by repeatedly filling a trailing `[MASK]`.

use std::cmp::Ordering;

use serde::Serialize;

use crate::corpus::{pack, pack_question, QuestionType, DEFAULT_MAX_Q};
use crate::error::{Error, Result};
use crate::model::{forward_tape, predict_qtype, ModelParams, QtaMode};
use crate::tensor::{log_softmax_row, Tape};
use crate::tokenizer::{Vocab, CLS, MASK, PAD, SEP};

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 20;

/// Tokens the decoder never emits.
pub const BANNED: [usize; 3] = [PAD, CLS, MASK];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Generated summary ids, closing `[SEP]` excluded.
    pub tokens: Vec<usize>,
    /// Sum of natural-log step probabilities, including the `[SEP]` step if any.
    pub log_prob: f64,
    pub finished: bool,
    /// Whether decoding stopped on `[SEP]` rather than on the length limit.
    pub ended_with_sep: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
            ended_with_sep: false,
        }
    }

    /// Number of scored steps.
    pub fn length(&self) -> usize {
        self.tokens.len() + usize::from(self.ended_with_sep)
    }

    /// Length-normalized score used for the final ranking.
    pub fn score(&self) -> f64 {
        self.log_prob / self.length().max(1) as f64
    }

    fn extend(&self, token: usize, lp: f64, max_len: usize) -> Hypothesis {
        let mut tokens = self.tokens.clone();
        let ended_with_sep = token == SEP;
        if !ended_with_sep {
            tokens.push(token);
        }
        let finished = ended_with_sep || tokens.len() >= max_len;
        Hypothesis {
            tokens,
            log_prob: self.log_prob + lp,
            finished,
            ended_with_sep,
        }
    }
}

fn tie_break(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    a.tokens
        .cmp(&b.tokens)
        .then(a.ended_with_sep.cmp(&b.ended_with_sep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub max_len: usize,
    pub max_q: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
            max_q: DEFAULT_MAX_Q,
        }
    }
}

/// Log-probabilities over the vocabulary for the token after `prefix`.
pub fn next_token_log_probs(
    params: &ModelParams,
    question: &[usize],
    prefix: &[usize],
    qtype: Option<QuestionType>,
    max_q: usize,
) -> Result<Vec<f64>> {
    let mut s = prefix.to_vec();
    s.push(MASK);
    let ex = pack(question, &s, max_q, s.len())?;
    let slot = ex.summary_range().end - 1;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fv = forward_tape(
        &mut tape,
        &bound,
        &params.config,
        &ex.ids,
        &ex.segments,
        &ex.mask_matrix(),
        qtype,
        Some(&[slot]),
    )?;
    log_softmax_row(tape.value(fv.logits).row(0))
}

fn check_qtype(params: &ModelParams, qtype: Option<QuestionType>) -> Result<()> {
    match (params.config.qta_mode, qtype) {
        (QtaMode::Explicit, None) => Err(Error::Config("explicit mode decodes with a question type".into())),
        (QtaMode::Explicit, Some(_)) | (_, None) => Ok(()),
        (_, Some(_)) => Err(Error::Config("a question type is only accepted in explicit mode".into())),
    }
}

/// Returns finished hypotheses ranked by length-normalized score
/// (ties by token sequence).
pub fn beam_search(
    params: &ModelParams,
    question: &[usize],
    qtype: Option<QuestionType>,
    opts: &DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    if opts.beam == 0 || opts.max_len == 0 {
        return Err(Error::Config("beam and max_len must be positive".into()));
    }
    check_qtype(params, qtype)?;
    let mut live = vec![Hypothesis::empty()];
    let mut done = Vec::new();
    while !live.is_empty() {
        let mut candidates = Vec::new();
        for h in &live {
            let lp = next_token_log_probs(params, question, &h.tokens, qtype, opts.max_q)?;
            for (tok, &p) in lp.iter().enumerate() {
                if BANNED.contains(&tok) || p == f64::NEG_INFINITY {
                    continue;
                }
                candidates.push(h.extend(tok, p, opts.max_len));
            }
        }
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| tie_break(a, b)));
        candidates.truncate(opts.beam);
        live.clear();
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
    }
    done.sort_by(|a, b| b.score().total_cmp(&a.score()).then_with(|| tie_break(a, b)));
    Ok(done)
}

/// Arg-max decoding (lowest id on ties).
pub fn greedy(
    params: &ModelParams,
    question: &[usize],
    qtype: Option<QuestionType>,
    max_len: usize,
    max_q: usize,
) -> Result<Hypothesis> {
    check_qtype(params, qtype)?;
    let mut h = Hypothesis::empty();
    while !h.finished {
        let lp = next_token_log_probs(params, question, &h.tokens, qtype, max_q)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &p) in lp.iter().enumerate() {
            if BANNED.contains(&tok) {
                continue;
            }
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((tok, p));
            }
        }
        let (tok, p) = best.ok_or_else(|| Error::invalid("vocabulary has no generable tokens"))?;
        h = h.extend(tok, p, max_len);
    }
    Ok(h)
}

/// Recomputes a hypothesis' log-probability step by step.
pub fn replay_log_prob(
    params: &ModelParams,
    question: &[usize],
    tokens: &[usize],
    ended_with_sep: bool,
    qtype: Option<QuestionType>,
    max_q: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..tokens.len() {
        total += next_token_log_probs(params, question, &tokens[..i], qtype, max_q)?[tokens[i]];
    }
    if ended_with_sep {
        total += next_token_log_probs(params, question, tokens, qtype, max_q)?[SEP];
    }
    Ok(total)
}

/// A decoded summary as written by the `summarize` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRecord {
    pub question: String,
    pub summary: String,
    pub score: f64,
    pub qtype: Option<String>,
}

/// Tokenizes, picks the question type the model mode needs, and decodes.
pub fn summarize_text(
    params: &ModelParams,
    classifier: Option<&ModelParams>,
    vocab: &Vocab,
    question: &str,
    opts: &DecodeOptions,
) -> Result<SummaryRecord> {
    let q = vocab.encode(question);
    if q.is_empty() {
        return Err(Error::invalid("question has no tokens"));
    }
    let (infused, reported) = match params.config.qta_mode {
        QtaMode::None => (None, None),
        QtaMode::Implicit => {
            let t = predict_qtype(params, &pack_question(&q, opts.max_q)?)?;
            (None, Some(t))
        }
        QtaMode::Explicit => {
            let cls = classifier.ok_or_else(|| {
                Error::Config("explicit-mode checkpoint has no question classifier".into())
            })?;
            let t = predict_qtype(cls, &pack_question(&q, opts.max_q)?)?;
            (Some(t), Some(t))
        }
    };
    let ranked = beam_search(params, &q, infused, opts)?;
    let best = ranked.first().ok_or_else(|| Error::invalid("decoder produced no hypothesis"))?;
    Ok(SummaryRecord {
        question: question.to_string(),
        summary: vocab.decode(&best.tokens)?,
        score: best.score(),
        qtype: reported.map(|t| t.name().to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, vocab: usize) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::init(ModelConfig::tiny(vocab), &mut rng).unwrap();
        for t in p.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 50.0);
        }
        p
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..5 {
            let p = model(seed, 9);
            let opts = DecodeOptions {
                beam: 1,
                max_len: 5,
                max_q: 100,
            };
            let b = beam_search(&p, &[5, 6, 7], None, &opts).unwrap();
            let g = greedy(&p, &[5, 6, 7], None, 5, 100).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0], g);
        }
    }

    #[test]
    fn outputs_are_bounded_and_replayable() {
        let p = model(3, 9);
        let opts = DecodeOptions {
            beam: 4,
            max_len: 4,
            max_q: 100,
        };
        let out = beam_search(&p, &[5, 8], None, &opts).unwrap();
        assert!(!out.is_empty());
        for h in &out {
            assert!(h.tokens.len() <= 4);
            assert!(h.log_prob <= 0.0);
            assert!(h.tokens.iter().all(|t| !BANNED.contains(t) && *t != SEP));
            let r = replay_log_prob(&p, &[5, 8], &h.tokens, h.ended_with_sep, None, 100).unwrap();
            assert!((r - h.log_prob).abs() < 1e-9);
        }
        for w in out.windows(2) {
            assert!(w[0].score() >= w[1].score());
        }
        assert_eq!(out, beam_search(&p, &[5, 8], None, &opts).unwrap());
    }

    #[test]
    fn explicit_mode_needs_a_type() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::init(ModelConfig::tiny(8).with_mode(QtaMode::Explicit), &mut rng).unwrap();
        assert!(beam_search(&p, &[5], None, &DecodeOptions::default()).is_err());
        assert!(beam_search(&p, &[5], Some(QuestionType::Cause), &DecodeOptions { beam: 2, max_len: 2, max_q: 10 }).is_ok());
    }
}
