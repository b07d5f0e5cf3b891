//! Training loops for the multi-Cloze model and the two question-type variants.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    mask_entities, mask_ngram, mask_s2s, pack, pack_question, tag_entities, ClozeConfig,
    EncodedExample, Gazetteer, KeywordTable, QuestionType,
};
use crate::error::{Error, Result};
use crate::io::PairRecord;
use crate::model::{forward_tape, BoundParams, ModelConfig, ModelParams, QtaMode};
use crate::tensor::{
    clip_global_norm, global_norm, save_checkpoint, AdamConfig, AdamState, Checkpoint, Tape, Tensor, Var,
};
use crate::tokenizer::Vocab;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const CLASSIFIER_LOG: &str = "classifier_log.csv";
pub const RUN_CONFIG: &str = "run_config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CLASSIFIER_PREFIX: &str = "classifier.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Qfa,
    QtaExplicit,
    QtaImplicit,
}

impl TrainMode {
    pub fn qta_mode(self) -> QtaMode {
        match self {
            TrainMode::Qfa => QtaMode::None,
            TrainMode::QtaExplicit => QtaMode::Explicit,
            TrainMode::QtaImplicit => QtaMode::Implicit,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Qfa => "qfa",
            TrainMode::QtaExplicit => "qta-explicit",
            TrainMode::QtaImplicit => "qta-implicit",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "qfa" => Ok(TrainMode::Qfa),
            "qta-explicit" => Ok(TrainMode::QtaExplicit),
            "qta-implicit" => Ok(TrainMode::QtaImplicit),
            _ => Err(Error::Config(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    Paper,
}

impl Preset {
    pub fn config(self, vocab_size: usize) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(vocab_size),
            Preset::Paper => ModelConfig::paper(vocab_size),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub max_q: usize,
    pub max_s: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub preset: Preset,
    pub cloze: ClozeConfig,
    /// Steps for the standalone classifier in explicit mode (defaults to `steps`).
    pub classifier_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 16,
            lr: 7e-5,
            clip: 1.0,
            max_q: 100,
            max_s: 20,
            seed: 0,
            mode: TrainMode::Qfa,
            preset: Preset::Paper,
            cloze: ClozeConfig::default(),
            classifier_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.max_q == 0 || self.max_s == 0 {
            return Err(Error::Config("batch, max_q and max_s must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("lr and clip must be positive".into()));
        }
        let c = &self.cloze;
        if !(0.0..=1.0).contains(&c.select_rate) || !(0.0..=1.0).contains(&c.entity_prob) {
            return Err(Error::Config("Cloze probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-step losses. `total` is the sum of the present components in field order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_s2s: Option<f64>,
    pub l_ngm: Option<f64>,
    pub l_fwm: Option<f64>,
    pub l_qtype: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn new(l_s2s: Option<f64>, l_ngm: Option<f64>, l_fwm: Option<f64>, l_qtype: Option<f64>) -> Self {
        let total = [l_s2s, l_ngm, l_fwm, l_qtype].into_iter().flatten().fold(None, |acc: Option<f64>, x| {
            Some(match acc {
                Some(a) => a + x,
                None => x,
            })
        });
        LossBundle {
            l_s2s,
            l_ngm,
            l_fwm,
            l_qtype,
            total: total.unwrap_or(0.0),
        }
    }

    /// Whether `total` equals the in-order component sum bit for bit.
    pub fn is_consistent(&self) -> bool {
        LossBundle::new(self.l_s2s, self.l_ngm, self.l_fwm, self.l_qtype).total == self.total
    }
}

/// One dataset pair, packed and annotated.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub example: EncodedExample,
    /// Entity spans relative to the summary start.
    pub entities: Vec<std::ops::Range<usize>>,
    pub qtype: Option<QuestionType>,
}

/// Tokenizes, packs and labels pairs. A record's own `qtype` wins over the heuristic.
pub fn prepare_examples(
    records: &[PairRecord],
    vocab: &Vocab,
    gazetteer: &Gazetteer,
    keywords: &KeywordTable,
    max_q: usize,
    max_s: usize,
) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let q = vocab.encode(&r.question);
            let s = vocab.encode(&r.summary);
            let example = pack(&q, &s, max_q, max_s)
                .map_err(|e| Error::invalid(format!("record {}: {e}", i + 1)))?;
            let entities = tag_entities(example.summary_ids(), vocab, gazetteer);
            let qtype = match &r.qtype {
                Some(t) => Some(t.parse()?),
                None => Some(keywords.label(&r.summary)),
            };
            Ok(TrainExample {
                example,
                entities,
                qtype,
            })
        })
        .collect()
}

/// Optimizer-side settings shared by every step function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub clip: f64,
    pub cloze: ClozeConfig,
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: LossBundle,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

fn mean_of(tape: &mut Tape<'_>, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / parts.len() as f64))
}

fn masked_lm_loss(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    ex: &EncodedExample,
    qtype: Option<QuestionType>,
) -> Result<(Var, Option<Var>)> {
    let mask = ex.mask_matrix();
    let fv = forward_tape(
        tape,
        bound,
        cfg,
        &ex.ids,
        &ex.segments,
        &mask,
        qtype,
        Some(&ex.mask_positions),
    )?;
    let rows: Vec<usize> = (0..ex.mask_positions.len()).collect();
    let loss = tape.cross_entropy(fv.logits, &ex.mask_labels, &rows)?;
    Ok((loss, fv.qtype_logits))
}

/// Backward, clip, Adam. Gradients are gathered before the tape is dropped.
fn apply_update(
    params: &mut ModelParams,
    opt: &mut AdamState,
    mut grads: BTreeMap<String, Tensor>,
    clip: f64,
) -> Result<(f64, f64, f64)> {
    let lr = opt.current_lr();
    let grad_norm = global_norm(grads.values());
    clip_global_norm(grads.values_mut(), clip);
    let clipped_norm = global_norm(grads.values());
    opt.update(&mut params.tensors, &grads)?;
    Ok((lr, grad_norm, clipped_norm))
}

fn collect_grads(tape: &Tape<'_>, bound: &BoundParams) -> BTreeMap<String, Tensor> {
    bound
        .vars
        .iter()
        .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g.clone())))
        .collect()
}

fn usable<'e>(batch: &[&'e TrainExample]) -> Result<Vec<&'e TrainExample>> {
    let kept: Vec<&TrainExample> = batch
        .iter()
        .copied()
        .filter(|e| {
            let ok = e.example.s_len > 0;
            if !ok {
                warn!("skipping example without summary tokens");
            }
            ok
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid("every example in the batch was skipped"));
    }
    Ok(kept)
}

/// Multi-Cloze step: three masked variants per example, loss = (s2s + ngm) + fwm.
pub fn train_step_qfa<R: Rng + ?Sized>(
    params: &mut ModelParams,
    opt: &mut AdamState,
    batch: &[&TrainExample],
    rng: &mut R,
    opts: &StepOptions,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if params.config.qta_mode != QtaMode::None {
        return Err(Error::Config("multi-Cloze training needs a model without question-type infusion".into()));
    }
    let batch = usable(batch)?;
    let vocab_size = params.config.vocab_size;
    let mut variants = Vec::with_capacity(batch.len());
    for e in &batch {
        let s2s = mask_s2s(&e.example, rng, &opts.cloze, vocab_size)?;
        let ngm = mask_ngram(&e.example, rng)?;
        let fwm = mask_entities(&e.example, &e.entities, rng, &opts.cloze, vocab_size)?;
        variants.push([s2s, ngm, fwm]);
    }

    let cfg = params.config;
    let (losses, grads) = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut task_losses = Vec::with_capacity(3);
        for task in 0..3 {
            let mut parts = Vec::with_capacity(variants.len());
            for v in &variants {
                parts.push(masked_lm_loss(&mut tape, &bound, &cfg, &v[task], None)?.0);
            }
            task_losses.push(mean_of(&mut tape, &parts)?);
        }
        let sum12 = tape.add(task_losses[0], task_losses[1])?;
        let total = tape.add(sum12, task_losses[2])?;
        tape.backward(total)?;
        let val = |v: Var| tape.value(v).item();
        let bundle = LossBundle {
            l_s2s: Some(val(task_losses[0])),
            l_ngm: Some(val(task_losses[1])),
            l_fwm: Some(val(task_losses[2])),
            l_qtype: None,
            total: val(total),
        };
        (bundle, collect_grads(&tape, &bound))
    };
    let (lr, grad_norm, clipped_norm) = apply_update(params, opt, grads, opts.clip)?;
    Ok(StepReport {
        losses,
        lr,
        grad_norm,
        clipped_norm,
    })
}

/// Question-type step. Explicit: Cloze-1 loss with the type embedding infused.
/// Implicit: Cloze-1 loss plus the type-classification loss.
pub fn train_step_qta<R: Rng + ?Sized>(
    params: &mut ModelParams,
    opt: &mut AdamState,
    batch: &[&TrainExample],
    rng: &mut R,
    opts: &StepOptions,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mode = params.config.qta_mode;
    if mode == QtaMode::None {
        return Err(Error::Config("question-type training needs explicit or implicit mode".into()));
    }
    let batch = usable(batch)?;
    if batch.iter().any(|e| e.qtype.is_none()) {
        return Err(Error::invalid("question-type training needs a label on every example"));
    }
    let vocab_size = params.config.vocab_size;
    let masked = batch
        .iter()
        .map(|e| mask_s2s(&e.example, rng, &opts.cloze, vocab_size))
        .collect::<Result<Vec<_>>>()?;

    let cfg = params.config;
    let (losses, grads) = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut lm_parts = Vec::with_capacity(batch.len());
        let mut cls_parts = Vec::with_capacity(batch.len());
        for (e, m) in batch.iter().zip(&masked) {
            let label = e.qtype.expect("checked above");
            let infused = (mode == QtaMode::Explicit).then_some(label);
            let (l, q) = masked_lm_loss(&mut tape, &bound, &cfg, m, infused)?;
            lm_parts.push(l);
            if let Some(q) = q {
                cls_parts.push(tape.cross_entropy(q, &[label.index()], &[0])?);
            }
        }
        let l_s2s = mean_of(&mut tape, &lm_parts)?;
        let (total, l_qtype) = if cls_parts.is_empty() {
            (l_s2s, None)
        } else {
            let l_q = mean_of(&mut tape, &cls_parts)?;
            (tape.add(l_s2s, l_q)?, Some(l_q))
        };
        tape.backward(total)?;
        let bundle = LossBundle {
            l_s2s: Some(tape.value(l_s2s).item()),
            l_ngm: None,
            l_fwm: None,
            l_qtype: l_qtype.map(|v| tape.value(v).item()),
            total: tape.value(total).item(),
        };
        (bundle, collect_grads(&tape, &bound))
    };
    let (lr, grad_norm, clipped_norm) = apply_update(params, opt, grads, opts.clip)?;
    Ok(StepReport {
        losses,
        lr,
        grad_norm,
        clipped_norm,
    })
}

/// Trains the standalone question classifier on question-only inputs.
pub fn train_step_classifier(
    params: &mut ModelParams,
    opt: &mut AdamState,
    batch: &[&TrainExample],
    max_q: usize,
    clip: f64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inputs = batch
        .iter()
        .map(|e| {
            let label = e
                .qtype
                .ok_or_else(|| Error::invalid("classifier training needs labels"))?;
            Ok((pack_question(e.example.question_ids(), max_q)?, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = params.config;
    let (losses, grads) = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut parts = Vec::with_capacity(inputs.len());
        for (q, label) in &inputs {
            let fv = forward_tape(
                &mut tape,
                &bound,
                &cfg,
                &q.ids,
                &q.segments,
                &q.mask_matrix(),
                None,
                Some(&[]),
            )?;
            let logits = fv
                .qtype_logits
                .ok_or_else(|| Error::Config("classifier needs the implicit head".into()))?;
            parts.push(tape.cross_entropy(logits, &[label.index()], &[0])?);
        }
        let l = mean_of(&mut tape, &parts)?;
        tape.backward(l)?;
        let v = tape.value(l).item();
        (LossBundle::new(None, None, None, Some(v)), collect_grads(&tape, &bound))
    };
    let (lr, grad_norm, clipped_norm) = apply_update(params, opt, grads, clip)?;
    Ok(StepReport {
        losses,
        lr,
        grad_norm,
        clipped_norm,
    })
}

/// Endless epoch-shuffled stream of example indices.
#[derive(Debug, Clone)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(n: usize) -> Self {
        BatchStream {
            order: (0..n).collect(),
            pos: n,
        }
    }

    /// Next `size` indices; reshuffles whenever an epoch is exhausted.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub l_s2s: Option<f64>,
    pub l_ngm: Option<f64>,
    pub l_fwm: Option<f64>,
    pub l_qtype: Option<f64>,
    pub total: f64,
}

impl LogRow {
    fn new(step: u64, r: &StepReport) -> Self {
        LogRow {
            step,
            lr: r.lr,
            l_s2s: r.losses.l_s2s,
            l_ngm: r.losses.l_ngm,
            l_fwm: r.losses.l_fwm,
            l_qtype: r.losses.l_qtype,
            total: r.losses.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub classifier: Option<ModelParams>,
    pub log: Vec<LogRow>,
    pub classifier_log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint {
            metadata: serde_json::json!({ "train_config": config }),
            tensors: BTreeMap::new(),
        };
        self.params.write_into(&mut ckpt, "")?;
        if let Some(c) = &self.classifier {
            c.write_into(&mut ckpt, CLASSIFIER_PREFIX)?;
        }
        Ok(ckpt)
    }
}

/// Runs `config.steps` optimizer steps and returns the trained weights.
pub fn train(
    config: &TrainConfig,
    records: &[PairRecord],
    vocab: &Vocab,
    gazetteer: &Gazetteer,
    keywords: &KeywordTable,
) -> Result<TrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let examples = prepare_examples(records, vocab, gazetteer, keywords, config.max_q, config.max_s)?;
    let model_cfg = config.preset.config(vocab.len()).with_mode(config.mode.qta_mode());
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);
    let mut params = ModelParams::init(model_cfg, &mut init_rng)?;
    info!(
        "training {} ({} parameters) on {} examples for {} steps",
        config.mode,
        params.param_count(),
        examples.len(),
        config.steps
    );

    let opts = StepOptions {
        clip: config.clip,
        cloze: config.cloze,
    };
    let batch_size = config.batch.min(examples.len());
    let mut opt = AdamState::new(AdamConfig::new(config.lr, config.steps));
    let mut stream = BatchStream::new(examples.len());
    let mut log = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let idx = stream.next_batch(batch_size, &mut data_rng);
        let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        let report = match config.mode {
            TrainMode::Qfa => train_step_qfa(&mut params, &mut opt, &batch, &mut data_rng, &opts)?,
            _ => train_step_qta(&mut params, &mut opt, &batch, &mut data_rng, &opts)?,
        };
        log.push(LogRow::new(step + 1, &report));
        if (step + 1) % 100 == 0 {
            info!("step {} total {:.6}", step + 1, report.losses.total);
        }
    }

    let mut classifier = None;
    let mut classifier_log = Vec::new();
    if config.mode == TrainMode::QtaExplicit {
        let steps = config.classifier_steps.unwrap_or(config.steps);
        let cfg = config.preset.config(vocab.len()).with_mode(QtaMode::Implicit);
        let mut cls_rng = ChaCha8Rng::seed_from_u64(config.seed);
        cls_rng.set_stream(2);
        let mut cls = ModelParams::init(cfg, &mut cls_rng)?;
        let mut opt = AdamState::new(AdamConfig::new(config.lr, steps));
        let mut stream = BatchStream::new(examples.len());
        for step in 0..steps {
            let idx = stream.next_batch(batch_size, &mut cls_rng);
            let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
            let report = train_step_classifier(&mut cls, &mut opt, &batch, config.max_q, config.clip)?;
            classifier_log.push(LogRow::new(step + 1, &report));
        }
        classifier = Some(cls);
    }
    Ok(TrainOutcome {
        params,
        classifier,
        log,
        classifier_log,
    })
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["step", "lr", "l_s2s", "l_ngm", "l_fwm", "l_qtype", "total"])
        .map_err(|e| csv_err(path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.lr.to_string(),
            opt(r.l_s2s),
            opt(r.l_ngm),
            opt(r.l_fwm),
            opt(r.l_qtype),
            r.total.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        msg: e.to_string(),
    }
}

/// Writes checkpoint, logs, resolved config and a vocabulary copy into `dir`.
pub fn save_run(dir: &Path, config: &TrainConfig, vocab: &Vocab, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(dir, &outcome.checkpoint(config)?)?;
    write_log(&dir.join(TRAIN_LOG), &outcome.log)?;
    if outcome.classifier.is_some() {
        write_log(&dir.join(CLASSIFIER_LOG), &outcome.classifier_log)?;
    }
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    crate::io::write_text(&dir.join(RUN_CONFIG), &text)?;
    vocab.save(&dir.join(VOCAB_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_vocab;

    fn toy() -> (Vocab, Vec<PairRecord>) {
        let recs = vec![
            PairRecord {
                question: "my son has flu what can we do".into(),
                summary: "how is flu treated".into(),
                qtype: None,
            },
            PairRecord {
                question: "why do people get flu".into(),
                summary: "what causes flu".into(),
                qtype: None,
            },
        ];
        let text: Vec<String> = recs.iter().flat_map(|r| [r.question.clone(), r.summary.clone()]).collect();
        let vocab = build_vocab(text.iter().map(String::as_str), 60).unwrap();
        (vocab, recs)
    }

    fn tiny_config(mode: TrainMode, steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch: 2,
            lr: 1e-3,
            mode,
            preset: Preset::Tiny,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn bundle_total_is_plain_sum() {
        let b = LossBundle::new(Some(1.0), Some(2.0), Some(3.0), None);
        assert_eq!(b.total, 6.0);
        assert!(b.is_consistent());
    }

    #[test]
    fn mode_parsing_accepts_cli_and_config_spellings() {
        assert_eq!("qta-explicit".parse::<TrainMode>().unwrap(), TrainMode::QtaExplicit);
        assert_eq!("qta_implicit".parse::<TrainMode>().unwrap(), TrainMode::QtaImplicit);
        assert!("bogus".parse::<TrainMode>().is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (vocab, recs) = toy();
        let cfg = tiny_config(TrainMode::Qfa, 0);
        let out = train(&cfg, &recs, &vocab, &Gazetteer::default(), &KeywordTable::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = ModelParams::init(ModelConfig::tiny(vocab.len()), &mut rng).unwrap();
        assert_eq!(out.params, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn implicit_initial_qtype_loss_is_ln7_with_zeroed_head() {
        let (vocab, recs) = toy();
        let ex = prepare_examples(&recs, &vocab, &Gazetteer::default(), &KeywordTable::default(), 100, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::init(ModelConfig::tiny(vocab.len()).with_mode(QtaMode::Implicit), &mut rng).unwrap();
        p.get_mut("qta.u_i").unwrap().data_mut().fill(0.0);
        let mut opt = AdamState::new(AdamConfig::new(1e-3, 10));
        let batch: Vec<&TrainExample> = ex.iter().collect();
        let opts = StepOptions {
            clip: 1.0,
            cloze: ClozeConfig::default(),
        };
        let r = train_step_qta(&mut p, &mut opt, &batch, &mut rng, &opts).unwrap();
        assert!((r.losses.l_qtype.unwrap() - 7f64.ln()).abs() < 1e-12);
        assert_eq!(r.losses.total, r.losses.l_s2s.unwrap() + r.losses.l_qtype.unwrap());
    }

    #[test]
    fn explicit_unused_type_rows_get_no_update() {
        let (vocab, recs) = toy();
        let recs: Vec<PairRecord> = recs
            .into_iter()
            .map(|r| PairRecord {
                qtype: Some("Treatment".into()),
                ..r
            })
            .collect();
        let ex = prepare_examples(&recs, &vocab, &Gazetteer::default(), &KeywordTable::default(), 100, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ModelParams::init(ModelConfig::tiny(vocab.len()).with_mode(QtaMode::Explicit), &mut rng).unwrap();
        let before = p.get("qta.type_embed").unwrap().clone();
        let mut opt = AdamState::new(AdamConfig::new(1e-2, 10));
        let batch: Vec<&TrainExample> = ex.iter().collect();
        let opts = StepOptions {
            clip: 1.0,
            cloze: ClozeConfig::default(),
        };
        let r = train_step_qta(&mut p, &mut opt, &batch, &mut rng, &opts).unwrap();
        assert_eq!(r.losses.l_qtype, None);
        assert_eq!(r.losses.total, r.losses.l_s2s.unwrap());
        let after = p.get("qta.type_embed").unwrap();
        let t = QuestionType::Treatment.index();
        for row in 0..QuestionType::COUNT {
            if row == t {
                assert_ne!(after.row(row), before.row(row));
            } else {
                assert_eq!(after.row(row), before.row(row));
            }
        }
    }

    #[test]
    fn explicit_mode_rejects_missing_labels() {
        let (vocab, recs) = toy();
        let mut ex = prepare_examples(&recs, &vocab, &Gazetteer::default(), &KeywordTable::default(), 100, 20).unwrap();
        ex[0].qtype = None;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ModelParams::init(ModelConfig::tiny(vocab.len()).with_mode(QtaMode::Explicit), &mut rng).unwrap();
        let mut opt = AdamState::new(AdamConfig::new(1e-2, 10));
        let batch: Vec<&TrainExample> = ex.iter().collect();
        let opts = StepOptions {
            clip: 1.0,
            cloze: ClozeConfig::default(),
        };
        assert!(train_step_qta(&mut p, &mut opt, &batch, &mut rng, &opts).is_err());
    }

    #[test]
    fn clipped_norm_never_exceeds_clip() {
        let (vocab, recs) = toy();
        let ex = prepare_examples(&recs, &vocab, &Gazetteer::default(), &KeywordTable::default(), 100, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ModelParams::init(ModelConfig::tiny(vocab.len()), &mut rng).unwrap();
        let mut opt = AdamState::new(AdamConfig::new(1e-2, 20));
        let batch: Vec<&TrainExample> = ex.iter().collect();
        let opts = StepOptions {
            clip: 0.01,
            cloze: ClozeConfig::default(),
        };
        for _ in 0..20 {
            let r = train_step_qfa(&mut p, &mut opt, &batch, &mut rng, &opts).unwrap();
            assert!(r.clipped_norm <= opts.clip + 1e-9);
            assert!(r.losses.is_consistent());
        }
    }

    #[test]
    fn single_example_loss_trends_down() {
        let (vocab, recs) = toy();
        let ex = prepare_examples(&recs[..1], &vocab, &Gazetteer::default(), &KeywordTable::default(), 100, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ModelParams::init(ModelConfig::tiny(vocab.len()), &mut rng).unwrap();
        let mut opt = AdamState::new(AdamConfig::new(1e-2, 50));
        let batch = vec![&ex[0]];
        let opts = StepOptions {
            clip: 1.0,
            cloze: ClozeConfig::default(),
        };
        let totals: Vec<f64> = (0..50)
            .map(|_| train_step_qfa(&mut p, &mut opt, &batch, &mut rng, &opts).unwrap().losses.total)
            .collect();
        let avg: Vec<f64> = totals.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        assert!(avg.last().unwrap() < avg.first().unwrap(), "{avg:?}");
    }

    #[test]
    fn same_seed_same_losses() {
        let (vocab, recs) = toy();
        let cfg = tiny_config(TrainMode::QtaImplicit, 5);
        let a = train(&cfg, &recs, &vocab, &Gazetteer::default(), &KeywordTable::default()).unwrap();
        let b = train(&cfg, &recs, &vocab, &Gazetteer::default(), &KeywordTable::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn batch_stream_covers_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = BatchStream::new(5);
        let mut seen = s.next_batch(5, &mut rng);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
