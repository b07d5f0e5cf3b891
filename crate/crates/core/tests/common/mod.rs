#![allow(dead_code)]

use std::path::{Path, PathBuf};

use qsum::io::{write_jsonl, PairRecord};
use qsum::tokenizer::{build_vocab, Vocab};

pub const DISEASES: [&str; 8] = ["flu", "asthma", "measles", "gout", "acne", "lupus", "mumps", "rabies"];

/// 8 conditions × 4 question types. Each question carries a cue for its type;
/// each summary names the condition and contains exactly one type keyword.
pub fn synthetic_pairs() -> Vec<PairRecord> {
    let mut out = Vec::new();
    for d in DISEASES {
        let pair = |q: String, s: String| PairRecord {
            question: q,
            summary: s,
            qtype: None,
        };
        out.push(pair(
            format!("my daughter has {d} . what medicine can help her recover ?"),
            format!("how to treat {d}"),
        ));
        out.push(pair(
            format!("how do i know for sure if i have {d} , is there an exam ?"),
            format!("how to test for {d}"),
        ));
        out.push(pair(
            format!("why did i get {d} , where does it come from ?"),
            format!("what causes {d}"),
        ));
        out.push(pair(
            format!("who should i see about my {d} , which clinic ?"),
            format!("which doctor treats {d}"),
        ));
    }
    out
}

pub fn corpus_lines(pairs: &[PairRecord]) -> Vec<String> {
    pairs
        .iter()
        .flat_map(|r| [r.question.clone(), r.summary.clone()])
        .collect()
}

/// Large enough that every word of the synthetic set is a single piece.
pub fn synthetic_vocab(pairs: &[PairRecord]) -> Vocab {
    let lines = corpus_lines(pairs);
    build_vocab(lines.iter().map(String::as_str), 200).unwrap()
}

pub struct Workspace {
    pub data: PathBuf,
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub gazetteer: PathBuf,
}

/// Writes the synthetic dataset, a raw-text corpus, its vocabulary and a gazetteer into `dir`.
pub fn write_workspace(dir: &Path) -> Workspace {
    let pairs = synthetic_pairs();
    let data = dir.join("train.jsonl");
    write_jsonl(&data, &pairs).unwrap();
    let corpus = dir.join("corpus.txt");
    std::fs::write(&corpus, corpus_lines(&pairs).join("\n")).unwrap();
    let vocab = dir.join("vocab.txt");
    synthetic_vocab(&pairs).save(&vocab).unwrap();
    let gazetteer = dir.join("ents.txt");
    std::fs::write(&gazetteer, DISEASES.join("\n")).unwrap();
    Workspace {
        data,
        corpus,
        vocab,
        gazetteer,
    }
}

pub fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["qsum"];
    argv.extend_from_slice(args);
    qsum::cli::run(argv)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
