//! Command-line entry point.
//!
//! Option values resolve as flags > `--config` file > built-in defaults, and
//! each command records the resolved values next to its output.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{
    mask_entities, mask_ngram, mask_s2s, ClozeConfig, EncodedExample, Gazetteer, KeywordTable,
    DEFAULT_MAX_Q, DEFAULT_MAX_S,
};
use crate::decoder::{summarize_text, DecodeOptions, SummaryRecord, DEFAULT_BEAM, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::io::{read_collection, read_jsonl, read_pairs, read_text, write_jsonl, write_text, PairRecord};
use crate::metrics::{corpus_rouge, liveqa_metrics};
use crate::model::ModelParams;
use crate::retrieval::{Hit, TfIdfIndex};
use crate::selftest;
use crate::tensor::load_checkpoint;
use crate::tokenizer::{build_vocab, Vocab};
use crate::trainer::{self, prepare_examples, Preset, TrainConfig, TrainMode, CLASSIFIER_PREFIX, VOCAB_FILE};

#[derive(Debug, Parser)]
#[command(name = "qsum", version, about = "Question summarization toolkit")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file with option values for the chosen command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a WordPiece vocabulary from a text corpus.
    BuildVocab(BuildVocabArgs),
    /// Write the three masked variants of every pair for inspection.
    BuildCorpus(BuildCorpusArgs),
    /// Attach heuristic question types to a JSON-lines file of summaries.
    LabelQtypes(LabelArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Generate summaries with beam search.
    Summarize(SummarizeArgs),
    /// Score summaries against references with ROUGE-1/2/L.
    EvalRouge(EvalRougeArgs),
    /// Compute answer-quality metrics from graded answers.
    EvalQa(EvalQaArgs),
    /// Build a TF-IDF index over a question/answer collection.
    Index(IndexArgs),
    /// Answer queries by nearest stored question.
    Retrieve(RetrieveArgs),
    /// Run the built-in oracle suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct BuildVocabArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct BuildCorpusArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[arg(long)]
    max_q: Option<usize>,
    #[arg(long)]
    max_s: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    #[arg(long)]
    keywords: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalRougeArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Debug, Args)]
struct EvalQaArgs {
    /// CSV with a `grade` column (1-4, empty when unanswered).
    #[arg(long)]
    grades: PathBuf,
    #[arg(long)]
    total: usize,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    collection: PathBuf,
    /// Keep function words in the index.
    #[arg(long)]
    no_stopwords: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SelftestArgs {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VocabOptions {
    size: usize,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions { size: 8000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CorpusOptions {
    max_q: usize,
    max_s: usize,
    seed: u64,
    cloze: ClozeConfig,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            max_q: DEFAULT_MAX_Q,
            max_s: DEFAULT_MAX_S,
            seed: 0,
            cloze: ClozeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DecodeConfig {
    beam: usize,
    max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RetrieveOptions {
    k: usize,
}

impl Default for RetrieveOptions {
    fn default() -> Self {
        RetrieveOptions { k: 1 }
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Defaults, overlaid by the config file, overlaid by explicit flags.
fn resolve<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Value>, flags: Map<String, Value>) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(f) = file {
        merge(&mut v, f);
    }
    merge(&mut v, &Value::Object(flags));
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn flags<const N: usize>(pairs: [(&str, Option<Value>); N]) -> Map<String, Value> {
    pairs
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
        .collect()
}

fn json<T: Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|x| serde_json::to_value(x).expect("plain value"))
}

fn load_config_file(path: Option<&Path>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = read_text(path)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if !v.is_object() {
        return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
    }
    Ok(Some(v))
}

/// Records the resolved options alongside an output file.
fn record_config<T: Serialize>(out: &Path, command: &str, options: &T) -> Result<()> {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    let path = out.with_file_name(name);
    let v = serde_json::json!({ "command": command, "options": options });
    info!("resolved {command} options: {v}");
    write_text(&path, &(serde_json::to_string_pretty(&v)? + "\n"))
}

fn load_keywords(path: Option<&Path>) -> Result<KeywordTable> {
    path.map(KeywordTable::load).unwrap_or_else(|| Ok(KeywordTable::default()))
}

fn load_gazetteer(path: Option<&Path>) -> Result<Gazetteer> {
    path.map(Gazetteer::load).unwrap_or_else(|| Ok(Gazetteer::default()))
}

fn build_vocab_cmd(a: &BuildVocabArgs, file: Option<&Value>) -> Result<()> {
    let opts = resolve(VocabOptions::default(), file, flags([("size", json(a.size))]))?;
    let text = read_text(&a.input)?;
    let vocab = build_vocab(text.lines(), opts.size)?;
    vocab.save(&a.output)?;
    info!("wrote {} tokens to {}", vocab.len(), a.output.display());
    record_config(&a.output, "build-vocab", &opts)
}

#[derive(Serialize)]
struct MaskedRecord<'a> {
    pair: usize,
    task: &'static str,
    #[serde(flatten)]
    example: &'a EncodedExample,
}

fn build_corpus_cmd(a: &BuildCorpusArgs, cli: &Cli, file: Option<&Value>) -> Result<()> {
    let opts = resolve(
        CorpusOptions::default(),
        file,
        flags([("max_q", json(a.max_q)), ("max_s", json(a.max_s)), ("seed", json(cli.seed))]),
    )?;
    let vocab = Vocab::load(&a.vocab)?;
    let gaz = load_gazetteer(a.gazetteer.as_deref())?;
    let kw = load_keywords(a.keywords.as_deref())?;
    let records = read_pairs(&a.data)?;
    let examples = prepare_examples(&records, &vocab, &gaz, &kw, opts.max_q, opts.max_s)?;
    // Each pair gets its own stream so the output does not depend on thread scheduling.
    let masked = examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let mut ex = e.example.clone();
            ex.qtype = e.qtype;
            Ok([
                mask_s2s(&ex, &mut rng, &opts.cloze, vocab.len())?,
                mask_ngram(&ex, &mut rng)?,
                mask_entities(&ex, &e.entities, &mut rng, &opts.cloze, vocab.len())?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(masked.len() * 3);
    for (i, m) in masked.iter().enumerate() {
        for (task, ex) in ["s2s", "ngram", "entity"].into_iter().zip(m) {
            rows.push(MaskedRecord {
                pair: i,
                task,
                example: ex,
            });
        }
    }
    write_jsonl(&a.out, &rows)?;
    record_config(&a.out, "build-corpus", &opts)
}

fn label_cmd(a: &LabelArgs) -> Result<()> {
    let kw = load_keywords(a.keywords.as_deref())?;
    let mut rows: Vec<Value> = read_jsonl(&a.input)?;
    for (i, r) in rows.iter_mut().enumerate() {
        let obj = r.as_object_mut().ok_or_else(|| Error::Data {
            path: a.input.clone(),
            line: i + 1,
            msg: "expected a JSON object".into(),
        })?;
        let summary = obj.get("summary").and_then(Value::as_str).ok_or_else(|| Error::Data {
            path: a.input.clone(),
            line: i + 1,
            msg: "missing string field \"summary\"".into(),
        })?;
        let t = kw.label(summary);
        obj.insert("qtype".into(), Value::String(t.name().into()));
    }
    write_jsonl(&a.out, &rows)
}

fn train_cmd(a: &TrainArgs, cli: &Cli, file: Option<&Value>) -> Result<()> {
    let mode = a.mode.as_deref().map(str::parse::<TrainMode>).transpose()?;
    let preset = a.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let config = resolve(
        TrainConfig::default(),
        file,
        flags([
            ("mode", json(mode)),
            ("preset", json(preset)),
            ("steps", json(a.steps)),
            ("batch", json(a.batch)),
            ("lr", json(a.lr)),
            ("seed", json(cli.seed)),
        ]),
    )?;
    config.validate()?;
    info!("resolved train config: {}", serde_json::to_string(&config)?);
    let vocab = Vocab::load(&a.vocab)?;
    let gaz = load_gazetteer(a.gazetteer.as_deref())?;
    let kw = load_keywords(a.keywords.as_deref())?;
    let records = read_pairs(&a.data)?;
    let outcome = trainer::train(&config, &records, &vocab, &gaz, &kw)?;
    trainer::save_run(&a.out, &config, &vocab, &outcome)?;
    if let Some(last) = outcome.log.last() {
        info!("final total loss {:.6}", last.total);
    }
    Ok(())
}

/// Model, optional classifier, vocabulary and training-time `max_q` from a checkpoint directory.
pub fn load_model_dir(dir: &Path) -> Result<(ModelParams, Option<ModelParams>, Vocab, usize)> {
    let ckpt = load_checkpoint(dir)?;
    let params = ModelParams::read_from(&ckpt, "")?
        .ok_or_else(|| Error::invalid(format!("{} holds no model config", dir.display())))?;
    let classifier = ModelParams::read_from(&ckpt, CLASSIFIER_PREFIX)?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != params.config.vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    let max_q = ckpt
        .metadata
        .pointer("/train_config/max_q")
        .and_then(Value::as_u64)
        .map_or(DEFAULT_MAX_Q, |v| v as usize);
    Ok((params, classifier, vocab, max_q))
}

fn summarize_cmd(a: &SummarizeArgs, file: Option<&Value>) -> Result<()> {
    let opts = resolve(
        DecodeConfig::default(),
        file,
        flags([("beam", json(a.beam)), ("max_len", json(a.max_len))]),
    )?;
    let (params, classifier, vocab, max_q) = load_model_dir(&a.ckpt)?;
    let decode = DecodeOptions {
        beam: opts.beam,
        max_len: opts.max_len,
        max_q,
    };
    let questions = read_pairs(&a.input)?;
    let out = questions
        .par_iter()
        .map(|r| summarize_text(&params, classifier.as_ref(), &vocab, &r.question, &decode))
        .collect::<Result<Vec<SummaryRecord>>>()?;
    write_jsonl(&a.out, &out)?;
    record_config(&a.out, "summarize", &opts)
}

fn eval_rouge_cmd(a: &EvalRougeArgs) -> Result<()> {
    let hyp = read_pairs(&a.hyp)?;
    let refs = read_pairs(&a.reference)?;
    let h: Vec<&str> = hyp.iter().map(|r| r.summary.as_str()).collect();
    let r: Vec<&str> = refs.iter().map(|r| r.summary.as_str()).collect();
    let t = corpus_rouge(&h, &r)?;
    println!("metric   precision  recall  f1");
    for (name, s) in [("ROUGE-1", t.rouge1), ("ROUGE-2", t.rouge2), ("ROUGE-L", t.rouge_l)] {
        println!("{name}  {:.4}     {:.4}  {:.4}", s.precision, s.recall, s.f1);
    }
    Ok(())
}

fn read_grades(path: &Path) -> Result<Vec<Option<u8>>> {
    let data_err = |line: usize, msg: String| Error::Data {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| data_err(0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| data_err(1, e.to_string()))?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == "grade")
        .ok_or_else(|| data_err(1, "no \"grade\" column".into()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(i + 2, e.to_string()))?;
        let cell = rec.get(col).unwrap_or("").trim();
        if cell.is_empty() {
            out.push(None);
        } else {
            let g: u8 = cell
                .parse()
                .map_err(|_| data_err(i + 2, format!("grade {cell:?} is not an integer")))?;
            out.push(Some(g));
        }
    }
    Ok(out)
}

fn eval_qa_cmd(a: &EvalQaArgs) -> Result<()> {
    let grades = read_grades(&a.grades)?;
    let m = liveqa_metrics(&grades, a.total)?;
    println!("avgScore(0-3)  {:.4}", m.avg_score);
    println!("succ@2+        {:.4}", m.succ_2);
    println!("succ@3+        {:.4}", m.succ_3);
    println!("succ@4+        {:.4}", m.succ_4);
    println!("prec@2+        {:.4}", m.prec_2);
    println!("prec@3+        {:.4}", m.prec_3);
    println!("prec@4+        {:.4}", m.prec_4);
    Ok(())
}

fn index_cmd(a: &IndexArgs) -> Result<()> {
    let coll = read_collection(&a.collection)?;
    let idx = TfIdfIndex::build(&coll, !a.no_stopwords)?;
    idx.save(&a.out)?;
    info!("indexed {} of {} questions", idx.docs.len(), idx.num_docs);
    Ok(())
}

#[derive(Serialize)]
struct RetrievedRecord<'a> {
    query: &'a str,
    hits: Vec<RetrievedHit<'a>>,
}

#[derive(Serialize)]
struct RetrievedHit<'a> {
    id: usize,
    score: f64,
    question: &'a str,
    answer: String,
}

fn retrieve_cmd(a: &RetrieveArgs, file: Option<&Value>) -> Result<()> {
    let opts = resolve(RetrieveOptions::default(), file, flags([("k", json(a.k))]))?;
    let idx = TfIdfIndex::load(&a.index)?;
    let queries: Vec<PairRecord> = read_jsonl(&a.queries)?;
    let out = queries
        .iter()
        .map(|q| {
            // Summaries are the query when present; raw questions otherwise.
            let text = if q.summary.is_empty() { &q.question } else { &q.summary };
            let hits = idx.retrieve(text, opts.k)?;
            Ok(RetrievedRecord {
                query: text,
                hits: hits
                    .into_iter()
                    .map(|Hit { id, score, answer }| RetrievedHit {
                        id,
                        score,
                        question: &idx.questions[id],
                        answer,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&a.out, &out)?;
    record_config(&a.out, "retrieve", &opts)
}

fn selftest_cmd(cli: &Cli) -> Result<bool> {
    let results = selftest::run_all(cli.seed.unwrap_or(0));
    for r in &results {
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(results.iter().all(|r| r.passed))
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let file = load_config_file(cli.config.as_deref())?;
    let file = file.as_ref();
    match &cli.command {
        Command::BuildVocab(a) => build_vocab_cmd(a, file)?,
        Command::BuildCorpus(a) => build_corpus_cmd(a, cli, file)?,
        Command::LabelQtypes(a) => label_cmd(a)?,
        Command::Train(a) => train_cmd(a, cli, file)?,
        Command::Summarize(a) => summarize_cmd(a, file)?,
        Command::EvalRouge(a) => eval_rouge_cmd(a)?,
        Command::EvalQa(a) => eval_qa_cmd(a)?,
        Command::Index(a) => index_cmd(a)?,
        Command::Retrieve(a) => retrieve_cmd(a, file)?,
        Command::Selftest(_) => return selftest_cmd(cli),
    }
    Ok(true)
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("could not configure {n} threads: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_DATA,
        Err(e) => {
            error!("{e}");
            if e.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_USAGE
            }
        }
    }
}
