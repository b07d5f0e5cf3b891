//! Acceptance criteria, one line of output each. Runs without the libtest
//! harness so the lines stay readable: `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsum::corpus::{
    label_qtype, mask_ngram, mask_s2s, pack, pack_question, ClozeConfig, Gazetteer, KeywordTable,
    QuestionType,
};
use qsum::decoder::greedy;
use qsum::io::{PairRecord, QaRecord};
use qsum::metrics::liveqa_metrics;
use qsum::model::predict_qtype;
use qsum::retrieval::{index_tokens, TfIdfIndex};
use qsum::selftest;
use qsum::tokenizer::MASK;
use qsum::trainer::{prepare_examples, train, Preset, TrainConfig, TrainMode};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = selftest::gradient_suite(2024).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let failing: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passes())
        .map(|(n, r)| format!("{n} ({:.2e} at {})", r.max_rel_err, r.worst))
        .collect();
    let max = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    check(
        failing.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} cases, max rel err {max:.2e}, {:.1}s{}",
            reports.len(),
            elapsed.as_secs_f64(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join("; ")) }
        ),
    )
}

fn mask_matrix_suite() -> Outcome {
    let (ok, detail) = selftest::mask_suite(100, 7).map_err(|e| e.to_string())?;
    check(ok, detail)
}

fn masking_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let vocab_size = 20_005;
    let cfg = ClozeConfig::default();
    let (mut masked, mut random, mut kept, mut total) = (0usize, 0usize, 0usize, 0usize);
    while total < 120_000 {
        let q: Vec<usize> = (0..8).map(|_| rng.random_range(5..vocab_size)).collect();
        let s: Vec<usize> = (0..20).map(|_| rng.random_range(5..vocab_size)).collect();
        let ex = pack(&q, &s, 100, 20).unwrap();
        let out = mask_s2s(&ex, &mut rng, &cfg, vocab_size).unwrap();
        for &p in &out.mask_positions {
            total += 1;
            match out.ids[p] {
                MASK => masked += 1,
                t if t == ex.ids[p] => kept += 1,
                _ => random += 1,
            }
        }
    }
    let f = |c: usize| 100.0 * c as f64 / total as f64;
    let cloze1_ok = (f(masked) - 80.0).abs() <= 1.0 && (f(random) - 10.0).abs() <= 1.0 && (f(kept) - 10.0).abs() <= 1.0;

    let draws = 30_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let s: Vec<usize> = (0..10).map(|_| rng.random_range(5..50)).collect();
        let ex = pack(&[5, 6], &s, 100, 20).unwrap();
        counts[mask_ngram(&ex, &mut rng).unwrap().mask_positions.len() - 1] += 1;
    }
    let g = |c: usize| 100.0 * c as f64 / draws as f64;
    let cloze2_ok = counts.iter().all(|&c| (g(c) - 100.0 / 3.0).abs() <= 2.0);
    check(
        cloze1_ok && cloze2_ok,
        format!(
            "cloze-1 over {total} selections: mask {:.2}% random {:.2}% keep {:.2}%; cloze-2 over {draws} draws: n=1 {:.2}% n=2 {:.2}% n=3 {:.2}%",
            f(masked),
            f(random),
            f(kept),
            g(counts[0]),
            g(counts[1]),
            g(counts[2])
        ),
    )
}

fn overfit_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        steps: 3000,
        batch: 32,
        lr: 2e-2,
        mode,
        preset: Preset::Tiny,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn overfit_oracle() -> Outcome {
    let pairs = common::synthetic_pairs();
    let vocab = common::synthetic_vocab(&pairs);
    let gaz = Gazetteer::new(common::DISEASES);
    let kw = KeywordTable::default();
    let examples = prepare_examples(&pairs, &vocab, &gaz, &kw, 100, 20).map_err(|e| e.to_string())?;

    let t = Instant::now();
    let out = train(&overfit_config(TrainMode::Qfa), &pairs, &vocab, &gaz, &kw).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    // The per-step loss is measured on a fresh random masking, so smooth it.
    let window = 100;
    let s2s: Vec<f64> = out.log.iter().map(|r| r.l_s2s.unwrap()).collect();
    let reached = s2s
        .windows(window)
        .position(|w| w.iter().sum::<f64>() / (window as f64) < 0.05)
        .map(|i| i + window);
    let mut exact = 0;
    for e in &examples {
        let h = greedy(&out.params, e.example.question_ids(), None, 20, 100).map_err(|e| e.to_string())?;
        if h.ended_with_sep && h.tokens == e.example.summary_ids() {
            exact += 1;
        }
    }

    let imp = train(&overfit_config(TrainMode::QtaImplicit), &pairs, &vocab, &gaz, &kw).map_err(|e| e.to_string())?;
    let mut correct = 0;
    for e in &examples {
        let q = pack_question(e.example.question_ids(), 100).map_err(|e| e.to_string())?;
        if Some(predict_qtype(&imp.params, &q).map_err(|e| e.to_string())?) == e.qtype {
            correct += 1;
        }
    }
    check(
        reached.is_some() && exact >= 30 && elapsed < Duration::from_secs(300) && correct == examples.len(),
        format!(
            "qfa: {}-step mean l_s2s < 0.05 {}, greedy exact {exact}/32, {:.1}s; implicit qtype accuracy {correct}/{}",
            window,
            reached.map_or("never".to_string(), |s| format!("at step {s}")),
            elapsed.as_secs_f64(),
            examples.len()
        ),
    )
}

fn beam_oracle() -> Outcome {
    let (ok, detail) = selftest::beam_suite(50, 6, 4, 31).map_err(|e| e.to_string())?;
    check(ok, detail)
}

fn metric_hand_values() -> Outcome {
    let (ok, detail) = selftest::metric_suite().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..1000 {
        let total = rng.random_range(1..40usize);
        let n = rng.random_range(0..=total);
        let grades: Vec<Option<u8>> = (0..n)
            .map(|_| rng.random_bool(0.8).then(|| rng.random_range(1..=4u8)))
            .collect();
        let m = liveqa_metrics(&grades, total).map_err(|e| e.to_string())?;
        if (2..=4).any(|k| m.prec(k) < m.succ(k)) {
            violations += 1;
        }
    }
    check(ok && violations == 0, format!("{detail}; prec@k >= succ@k violated on {violations}/1000 grade vectors"))
}

fn loss_identities() -> Outcome {
    let pairs = common::synthetic_pairs();
    let vocab = common::synthetic_vocab(&pairs);
    let gaz = Gazetteer::new(common::DISEASES);
    let kw = KeywordTable::default();
    let mut bad = Vec::new();
    for mode in [TrainMode::Qfa, TrainMode::QtaImplicit] {
        let cfg = TrainConfig {
            steps: 200,
            batch: 8,
            preset: Preset::Tiny,
            mode,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &pairs, &vocab, &gaz, &kw).map_err(|e| e.to_string())?;
        for r in &out.log {
            let expect = match mode {
                TrainMode::Qfa => r.l_s2s.unwrap() + r.l_ngm.unwrap() + r.l_fwm.unwrap(),
                _ => r.l_s2s.unwrap() + r.l_qtype.unwrap(),
            };
            if r.total != expect {
                bad.push(format!("{mode} step {}", r.step));
            }
        }
    }
    check(
        bad.is_empty(),
        format!("2 x 200 logged steps, {} mismatches{}", bad.len(), bad.first().map_or(String::new(), |b| format!(" (first: {b})"))),
    )
}

fn dense_scores(collection: &[QaRecord], query: &str) -> Option<BTreeMap<usize, f64>> {
    let docs: Vec<Vec<String>> = collection.iter().map(|r| index_tokens(&r.question, true)).collect();
    let mut terms: Vec<&String> = docs.iter().flatten().collect();
    terms.sort();
    terms.dedup();
    let d = docs.len() as f64;
    let idf: Vec<f64> = terms
        .iter()
        .map(|t| {
            let df = docs.iter().filter(|doc| doc.contains(t)).count() as f64;
            ((1.0 + d) / (1.0 + df)).ln() + 1.0
        })
        .collect();
    let dense = |toks: &[String]| -> Vec<f64> {
        terms
            .iter()
            .zip(&idf)
            .map(|(t, w)| toks.iter().filter(|x| x == t).count() as f64 * w)
            .collect()
    };
    let unit = |v: Vec<f64>| -> Option<Vec<f64>> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
    };
    let q = unit(dense(&index_tokens(query, true)))?;
    Some(
        docs.iter()
            .enumerate()
            .filter_map(|(i, doc)| unit(dense(doc)).map(|v| (i, v.iter().zip(&q).map(|(a, b)| a * b).sum())))
            .collect(),
    )
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let mut collection = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while collection.len() < 50 {
        let mut picked: Vec<&str> = (0..rng.random_range(2..7)).map(|_| words[rng.random_range(0..40)].as_str()).collect();
        picked.sort();
        picked.dedup();
        let q = picked.join(" ");
        if seen.insert(q.clone()) {
            collection.push(QaRecord {
                question: q,
                answer: format!("answer {}", collection.len()),
            });
        }
    }
    let idx = TfIdfIndex::build(&collection, true).map_err(|e| e.to_string())?;
    let mut mismatched = 0;
    for _ in 0..100 {
        // Indices past the word list stand for out-of-vocabulary terms.
        let q: Vec<&str> = (0..rng.random_range(1..5))
            .map(|_| words.get(rng.random_range(0..44)).map_or("unseen", String::as_str))
            .collect();
        let q = q.join(" ");
        let hits = idx.retrieve(&q, collection.len()).map_err(|e| e.to_string())?;
        let Some(oracle) = dense_scores(&collection, &q) else {
            if !hits.is_empty() {
                mismatched += 1;
            }
            continue;
        };
        let mut want: Vec<f64> = oracle.values().copied().collect();
        want.sort_by(|a, b| b.total_cmp(a));
        let sorted_ok = hits.len() == want.len() && hits.iter().zip(&want).all(|(h, w)| (h.score - w).abs() < 1e-9);
        let per_doc_ok = hits.iter().all(|h| (oracle[&h.id] - h.score).abs() < 1e-9);
        if !(sorted_ok && per_doc_ok) {
            mismatched += 1;
        }
    }
    let mut self_fail = 0;
    for (i, r) in collection.iter().enumerate() {
        let hits = idx.retrieve(&r.question, 1).map_err(|e| e.to_string())?;
        if hits.first().is_none_or(|h| h.id != i || (h.score - 1.0).abs() > 1e-9) {
            self_fail += 1;
        }
    }
    check(
        mismatched == 0 && self_fail == 0,
        format!("100 queries, {mismatched} differ from dense brute force; self-query misses {self_fail}/50"),
    )
}

fn qtype_heuristic() -> Outcome {
    let kw = KeywordTable::default();
    let a = label_qtype("What are the treatments for mercury poisoning?", &kw);
    let b = label_qtype(
        "where can i get genetic testing for friedreich's, and what are the treatments for it?",
        &kw,
    );
    check(
        a == QuestionType::Treatment && b == QuestionType::Testing,
        format!("mercury poisoning -> {a}, friedreich's -> {b}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ws = common::write_workspace(dir.path());
    let questions = dir.path().join("questions.jsonl");
    let qs: Vec<PairRecord> = common::synthetic_pairs().into_iter().take(6).collect();
    qsum::io::write_jsonl(&questions, &qs).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let ckpt = dir.path().join(format!("ckpt{run}"));
        let out = dir.path().join(format!("summaries{run}.jsonl"));
        let code = common::run_cli(&[
            "--seed", "8", "train", "--mode", "qta-explicit", "--preset", "tiny", "--steps", "30", "--batch", "4",
            "--data", common::p(&ws.data), "--vocab", common::p(&ws.vocab), "--gazetteer", common::p(&ws.gazetteer),
            "--out", common::p(&ckpt),
        ]);
        if code != 0 {
            return Err(format!("train exited {code}"));
        }
        let code = common::run_cli(&[
            "summarize", "--ckpt", common::p(&ckpt), "--input", common::p(&questions), "--beam", "3", "--max-len", "6",
            "--out", common::p(&out),
        ]);
        if code != 0 {
            return Err(format!("summarize exited {code}"));
        }
        let read = |p: std::path::PathBuf| std::fs::read(p).unwrap_or_default();
        outputs.push([
            read(ckpt.join("manifest.json")),
            read(ckpt.join("tensors.bin")),
            read(ckpt.join("train_log.csv")),
            read(out),
        ]);
    }
    let same: Vec<bool> = (0..4).map(|i| outputs[0][i] == outputs[1][i] && !outputs[0][i].is_empty()).collect();
    check(
        same.iter().all(|&s| s),
        format!("manifest {} tensors {} log {} summaries {}", same[0], same[1], same[2], same[3]),
    )
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("mask-matrix suite", mask_matrix_suite),
        ("masking statistics", masking_statistics),
        ("overfit oracle", overfit_oracle),
        ("beam oracle", beam_oracle),
        ("metric hand-values", metric_hand_values),
        ("loss identities", loss_identities),
        ("retrieval oracle", retrieval_oracle),
        ("question-type heuristic", qtype_heuristic),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("[PASS] {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {name}: {d} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
