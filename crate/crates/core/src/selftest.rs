//! Oracle suites shared by the `selftest` command and the test targets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_mask_matrix, pack, QuestionType};
use crate::decoder::{beam_search, greedy, DecodeOptions, Hypothesis, BANNED};
use crate::error::Result;
use crate::gradcheck::{self, GradCheckReport};
use crate::metrics::{liveqa_metrics, rouge_l, rouge_n, rouge_tokenize};
use crate::model::{self, forward_tape, BoundParams, ModelConfig, ModelParams, QtaMode};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{MASK, SEP};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        SuiteResult {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((p, d)) => SuiteResult::new(name, p, d),
            Err(e) => SuiteResult::new(name, false, format!("error: {e}")),
        }
    }
}

type CaseFn = Box<dyn for<'a> Fn(&mut Tape<'a>, &BTreeMap<String, Var>) -> Result<Var>>;

/// Fixed, irregular weights that turn a tensor into a scalar with a
/// non-trivial gradient everywhere.
fn probe(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + 0.5).sin()).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

/// Named scalar functions, each exercising one tape operation, with their inputs.
pub fn gradient_cases(seed: u64) -> Vec<(String, BTreeMap<String, Tensor>, CaseFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut case = |name: &str, shapes: &[(&str, &[usize])], f: CaseFn| {
        let inputs = shapes
            .iter()
            .map(|(k, s)| (k.to_string(), Tensor::randn(s, 1.0, &mut rng)))
            .collect();
        (name.to_string(), inputs, f)
    };
    let mut mask = Tensor::zeros(&[3, 3]);
    mask.data_mut()[2] = f64::NEG_INFINITY;
    mask.data_mut()[5] = f64::NEG_INFINITY;
    vec![
        case("matmul", &[("a", &[3, 5]), ("b", &[5, 4])], Box::new(|t, v| {
            let y = t.matmul(v["a"], v["b"])?;
            probe(t, y)
        })),
        case("matmul_t", &[("a", &[3, 5]), ("b", &[4, 5])], Box::new(|t, v| {
            let y = t.matmul_t(v["a"], v["b"])?;
            probe(t, y)
        })),
        case("add", &[("a", &[3, 4]), ("b", &[3, 4])], Box::new(|t, v| {
            let y = t.add(v["a"], v["b"])?;
            let y = t.tanh(y);
            probe(t, y)
        })),
        case("mul", &[("a", &[3, 4]), ("b", &[3, 4])], Box::new(|t, v| {
            let y = t.mul(v["a"], v["b"])?;
            probe(t, y)
        })),
        case("add_row", &[("x", &[3, 4]), ("b", &[4])], Box::new(|t, v| {
            let y = t.add_row(v["x"], v["b"])?;
            let y = t.tanh(y);
            probe(t, y)
        })),
        case("add_const+softmax_rows", &[("x", &[3, 3])], Box::new(move |t, v| {
            let y = t.add_const(v["x"], &mask)?;
            let y = t.softmax_rows(y)?;
            probe(t, y)
        })),
        case("scale", &[("x", &[3, 4])], Box::new(|t, v| {
            let y = t.scale(v["x"], -0.37);
            probe(t, y)
        })),
        case("tanh", &[("x", &[3, 4])], Box::new(|t, v| {
            let y = t.tanh(v["x"]);
            probe(t, y)
        })),
        case("gelu", &[("x", &[3, 4])], Box::new(|t, v| {
            let y = t.gelu(v["x"]);
            probe(t, y)
        })),
        case("softmax_rows", &[("x", &[3, 4])], Box::new(|t, v| {
            let y = t.softmax_rows(v["x"])?;
            probe(t, y)
        })),
        case("layer_norm", &[("x", &[3, 4]), ("g", &[4]), ("b", &[4])], Box::new(|t, v| {
            let y = t.layer_norm(v["x"], v["g"], v["b"])?;
            probe(t, y)
        })),
        case("gather_rows", &[("table", &[5, 4])], Box::new(|t, v| {
            let y = t.gather_rows(v["table"], &[4, 0, 4])?;
            let y = t.tanh(y);
            probe(t, y)
        })),
        case("slice_cols+concat_cols", &[("x", &[3, 4]), ("y", &[3, 2])], Box::new(|t, v| {
            let a = t.slice_cols(v["x"], 1, 2)?;
            let b = t.slice_cols(v["x"], 0, 1)?;
            let c = t.concat_cols(&[a, v["y"]])?;
            let c = t.tanh(c);
            let d = t.concat_cols(&[b, a])?;
            let s1 = probe(t, c)?;
            let s2 = probe(t, d)?;
            t.add(s1, s2)
        })),
        case("cross_entropy", &[("logits", &[4, 6])], Box::new(|t, v| {
            t.cross_entropy(v["logits"], &[5, 0, 5], &[0, 2, 3])
        })),
        case("sum", &[("x", &[3, 4])], Box::new(|t, v| {
            let y = t.tanh(v["x"]);
            Ok(t.sum(y))
        })),
    ]
}

/// Tiny model with weights blown up past the init scale, so every
/// non-linearity is exercised away from its linear region.
pub fn scrambled_tiny(vocab: usize, mode: QtaMode, seed: u64, gain: f64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(ModelConfig::tiny(vocab).with_mode(mode), &mut rng)?;
    for (name, t) in p.tensors.iter_mut() {
        let base = name.ends_with(".gain");
        for v in t.data_mut() {
            *v = if base { 1.0 + rng.random_range(-0.5..0.5) } else { *v * gain };
        }
    }
    Ok(p)
}

/// Gradient checks for every tape op, both question-type heads and the whole
/// tiny model in each mode.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for (name, inputs, f) in gradient_cases(seed) {
        out.push((name, gradcheck::check_named(&inputs, &*f)?));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = 8;
    let c = QuestionType::COUNT;
    let up = Tensor::randn(&[5, d], 1.0, &mut rng);
    let inputs: BTreeMap<String, Tensor> = [
        ("h".to_string(), Tensor::randn(&[5, d], 1.0, &mut rng)),
        ("type_embed".to_string(), Tensor::randn(&[c, d], 1.0, &mut rng)),
    ]
    .into();
    out.push((
        "infuse_explicit".into(),
        gradcheck::check_named(&inputs, |t, v| {
            let y = model::infuse_explicit(t, v["h"], v["type_embed"], 3)?;
            let w = t.constant(up.clone());
            let y = t.mul(y, w)?;
            Ok(t.sum(y))
        })?,
    ));
    let inputs: BTreeMap<String, Tensor> = [
        ("h0".to_string(), Tensor::randn(&[1, d], 1.0, &mut rng)),
        ("w_i".to_string(), Tensor::randn(&[d, d], 0.5, &mut rng)),
        ("b_h".to_string(), Tensor::randn(&[d], 0.5, &mut rng)),
        ("u_i".to_string(), Tensor::randn(&[d, c], 0.5, &mut rng)),
        ("b_c".to_string(), Tensor::randn(&[c], 0.5, &mut rng)),
    ]
    .into();
    out.push((
        "qtype_head".into(),
        gradcheck::check_named(&inputs, |t, v| {
            let head = model::qtype_head(t, v["h0"], v["w_i"], v["b_h"], v["u_i"], v["b_c"])?;
            t.cross_entropy(head.logits, &[4], &[0])
        })?,
    ));

    for mode in [QtaMode::None, QtaMode::Explicit, QtaMode::Implicit] {
        let p = scrambled_tiny(12, mode, seed, 10.0)?;
        let ex = pack(&[5, 6, 7], &[8, 9, 10], 100, 20)?;
        let m = build_mask_matrix(ex.q_span(), ex.s_span());
        let cfg = p.config;
        let qtype = (mode == QtaMode::Explicit).then_some(QuestionType::Testing);
        let report = gradcheck::check_named_filtered(
            &p.tensors,
            // The unused tail of the position table only contributes exact zeros.
            |n| n != "embed.position",
            |t, vars| {
                let b = BoundParams { vars: vars.clone() };
                let fv = forward_tape(t, &b, &cfg, &ex.ids, &ex.segments, &m, qtype, Some(&[5, 6, 8]))?;
                let mut loss = t.cross_entropy(fv.logits, &[8, 3, 11], &[0, 1, 2])?;
                if let Some(q) = fv.qtype_logits {
                    let l = t.cross_entropy(q, &[2], &[0])?;
                    loss = t.add(loss, l)?;
                }
                Ok(loss)
            },
        )?;
        out.push((format!("model[{mode:?}]"), report));
    }
    Ok(out)
}

/// The prefix rule, written out directly: question rows see every question
/// column, summary row `i` sees columns `j ≤ i`.
pub fn mask_rule(q_span: usize, i: usize, j: usize) -> bool {
    if i < q_span {
        j < q_span
    } else {
        j <= i
    }
}

/// Compares the mask matrix against [`mask_rule`] on `pairs` random shapes,
/// then checks zero attention in full forward passes.
pub fn mask_suite(pairs: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..pairs {
        let q = rng.random_range(2..=102usize);
        let s = rng.random_range(0..=21usize);
        let m = build_mask_matrix(q, s);
        for i in 0..q + s {
            for j in 0..q + s {
                let want = if mask_rule(q, i, j) { 0.0 } else { f64::NEG_INFINITY };
                if m.get(i, j) != want {
                    mismatches += 1;
                }
            }
        }
    }
    let mut leaked = 0usize;
    for k in 0..5 {
        let p = scrambled_tiny(12, QtaMode::None, seed + k, 20.0)?;
        let q_ids: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(5..12)).collect();
        let s_ids: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(5..12)).collect();
        let ex = pack(&q_ids, &s_ids, 100, 20)?;
        let m = ex.mask_matrix();
        let out = model::forward(&p, &ex, &m, None)?;
        for layer in &out.attention {
            for a in layer {
                for i in 0..ex.q_span() {
                    for j in ex.q_span()..ex.len() {
                        if a.get2(i, j) != 0.0 {
                            leaked += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((
        mismatches == 0 && leaked == 0,
        format!("{pairs} shapes, {mismatches} mismatched entries, {leaked} leaked attention weights"),
    ))
}

/// Exhaustive search over every summary of at most `max_len` generable tokens.
/// Scores come from full forward passes over the packed sequence, not from
/// the decoder's incremental path.
pub fn exhaustive_best(params: &ModelParams, question: &[usize], max_len: usize) -> Result<Hypothesis> {
    let vocab = params.config.vocab_size;
    let step_lp = |prefix: &[usize]| -> Result<Vec<f64>> {
        let mut s = prefix.to_vec();
        s.push(MASK);
        let ex = pack(question, &s, 100, s.len())?;
        let out = model::forward(params, &ex, &ex.mask_matrix(), None)?;
        let row = out.logits.row(ex.q_span() + prefix.len());
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        Ok(row.iter().map(|v| v - max - z.ln()).collect())
    };
    let tokens: Vec<usize> = (0..vocab).filter(|t| !BANNED.contains(t) && *t != SEP).collect();
    let mut best: Option<Hypothesis> = None;
    let mut consider = |h: Hypothesis| {
        let better = match &best {
            None => true,
            Some(b) => h.score() > b.score() || (h.score() == b.score() && h.tokens < b.tokens),
        };
        if better {
            best = Some(h);
        }
    };
    // Depth-first over prefixes carrying the running log-probability.
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let dist = step_lp(&prefix)?;
        consider(Hypothesis {
            tokens: prefix.clone(),
            log_prob: lp + dist[SEP],
            finished: true,
            ended_with_sep: true,
        });
        for &t in &tokens {
            let mut next = prefix.clone();
            next.push(t);
            let nlp = lp + dist[t];
            if next.len() == max_len {
                consider(Hypothesis {
                    tokens: next,
                    log_prob: nlp,
                    finished: true,
                    ended_with_sep: false,
                });
            } else {
                stack.push((next, nlp));
            }
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Beam search with a beam wide enough to hold every sequence must match
/// exhaustive search; beam 1 must match greedy decoding.
pub fn beam_suite(models: usize, vocab: usize, max_len: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wide = vocab.pow(max_len as u32);
    let (mut exact, mut greedy_ok) = (0, 0);
    for k in 0..models {
        let p = scrambled_tiny(vocab, QtaMode::None, seed.wrapping_add(k as u64), 60.0)?;
        let q: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(1..vocab)).collect();
        let oracle = exhaustive_best(&p, &q, max_len)?;
        let opts = DecodeOptions {
            beam: wide,
            max_len,
            max_q: 100,
        };
        let got = beam_search(&p, &q, None, &opts)?;
        let top = &got[0];
        if top.tokens == oracle.tokens
            && top.ended_with_sep == oracle.ended_with_sep
            && (top.score() - oracle.score()).abs() < 1e-9
        {
            exact += 1;
        }
        let one = beam_search(&p, &q, None, &DecodeOptions { beam: 1, ..opts })?;
        if one.len() == 1 && one[0] == greedy(&p, &q, None, max_len, 100)? {
            greedy_ok += 1;
        }
    }
    Ok((
        exact == models && greedy_ok == models,
        format!("beam {wide} optimal on {exact}/{models}, beam 1 greedy on {greedy_ok}/{models}"),
    ))
}

/// Hand-computed ROUGE and LiveQA values.
pub fn metric_suite() -> Result<(bool, String)> {
    let t = |s: &str| rouge_tokenize(s);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let mut fails = Vec::new();
    let r = rouge_n(&t("the cat"), &t("the cat sat"), 1)?;
    if !(close(r.precision, 1.0) && close(r.recall, 2.0 / 3.0) && close(r.f1, 0.8)) {
        fails.push("rouge-1");
    }
    let r = rouge_n(&t("a b c"), &t("a b d"), 2)?;
    if !(close(r.precision, 0.5) && close(r.recall, 0.5) && close(r.f1, 0.5)) {
        fails.push("rouge-2");
    }
    let r = rouge_l(&t("the cat sat"), &t("the cat"));
    if !(close(r.precision, 2.0 / 3.0) && close(r.recall, 1.0) && close(r.f1, 0.8)) {
        fails.push("rouge-l");
    }
    let m = liveqa_metrics(&[Some(4), Some(3), Some(2), Some(1)], 4)?;
    if !(close(m.avg_score, 1.5) && close(m.succ_2, 0.75) && close(m.succ_4, 0.25) && close(m.prec_2, 0.75)) {
        fails.push("liveqa-all-answered");
    }
    let m = liveqa_metrics(&[Some(4), Some(2), Some(2)], 4)?;
    if !(close(m.succ_2, 0.75) && close(m.prec_2, 1.0)) {
        fails.push("liveqa-partial");
    }
    let detail = if fails.is_empty() {
        "all hand values reproduced".to_string()
    } else {
        format!("failed: {}", fails.join(", "))
    };
    Ok((fails.is_empty(), detail))
}

pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    let grads = gradient_suite(seed).map(|reports| {
        let worst = reports
            .iter()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
            .map(|(n, r)| format!("{n} {}", r.worst))
            .unwrap_or_default();
        let max = reports.iter().map(|r| r.1.max_rel_err).fold(0.0, f64::max);
        (
            reports.iter().all(|r| r.1.passes()),
            format!("{} cases, max rel err {max:.2e} at {worst}", reports.len()),
        )
    });
    vec![
        SuiteResult::from_result("gradients", grads),
        SuiteResult::from_result("mask-matrix", mask_suite(100, seed)),
        SuiteResult::from_result("beam-vs-brute-force", beam_suite(5, 6, 4, seed)),
        SuiteResult::from_result("metric-hand-values", metric_suite()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_tape_op_passes_gradient_check() {
        for (name, inputs, f) in gradient_cases(1) {
            let r = gradcheck::check_named(&inputs, &*f).unwrap();
            assert!(r.passes(), "{name}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn mask_rule_small() {
        assert!(mask_suite(10, 3).unwrap().0);
    }

    #[test]
    fn metrics_suite_passes() {
        assert!(metric_suite().unwrap().0);
    }

    #[test]
    fn beam_small() {
        let (ok, detail) = beam_suite(2, 6, 3, 9).unwrap();
        assert!(ok, "{detail}");
    }
}
