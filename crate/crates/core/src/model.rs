//! Prefix-LM transformer: summed token/position/segment embeddings, pre-norm
//! blocks with additive-mask multi-head attention, a gelu prediction head, and
//! the two question-type infusion variants.
//!
//! Parameters live in a name → tensor map so the optimizer, the gradient
//! checker and the checkpoint format can all treat them uniformly.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedExample, MaskMatrix, QuestionType};
use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const FFN_MULT: usize = 4;
pub const NUM_SEGMENTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QtaMode {
    None,
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub qta_mode: QtaMode,
}

impl ModelConfig {
    /// Two layers, hidden size 8, two heads: small enough for exhaustive checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            vocab_size,
            max_positions: 128,
            qta_mode: QtaMode::None,
        }
    }

    /// Four layers, hidden size 384, twelve heads.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 4,
            hidden: 384,
            heads: 12,
            vocab_size,
            max_positions: 128,
            qta_mode: QtaMode::None,
        }
    }

    pub fn with_mode(mut self, mode: QtaMode) -> Self {
        self.qta_mode = mode;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(Error::Config("layers, hidden and heads must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size <= crate::tokenizer::NUM_RESERVED {
            return Err(Error::Config("vocabulary too small".into()));
        }
        if self.max_positions < 3 {
            return Err(Error::Config("max_positions must be at least 3".into()));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let f = FFN_MULT * d;
        let c = QuestionType::COUNT;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.token".into(), vec![self.vocab_size, d]),
            ("embed.position".into(), vec![self.max_positions, d]),
            ("embed.segment".into(), vec![NUM_SEGMENTS, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("final_ln.gain".into(), vec![d]),
            ("final_ln.bias".into(), vec![d]),
            ("head.w".into(), vec![d, d]),
            ("head.b_t".into(), vec![d]),
            ("head.u".into(), vec![d, self.vocab_size]),
            ("head.b_p".into(), vec![self.vocab_size]),
        ]);
        match self.qta_mode {
            QtaMode::None => {}
            QtaMode::Explicit => out.push(("qta.type_embed".into(), vec![c, d])),
            QtaMode::Implicit => out.extend([
                ("qta.w_i".into(), vec![d, d]),
                ("qta.b_h".into(), vec![d]),
                ("qta.u_i".into(), vec![d, c]),
                ("qta.b_c".into(), vec![c]),
            ]),
        }
        out
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias") || name.contains(".b")
}

/// All weights of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Matrices ~ N(0, 0.02²), biases 0, layer-norm gains 1.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if is_gain(&name) {
                Tensor::full(&shape, 1.0)
            } else if is_bias(&name) {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, rng)
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t)))
                .collect(),
        }
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    left: shape,
                    right: t.shape().to_vec(),
                });
            }
            out.insert(name, t);
        }
        Ok(ModelParams {
            config,
            tensors: out,
        })
    }

    /// Adds this model's tensors (prefixed) and config to a checkpoint.
    pub fn write_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (k, t) in &self.tensors {
            ckpt.tensors.insert(format!("{prefix}{k}"), t.clone());
        }
        let meta = ckpt
            .metadata
            .as_object_mut()
            .ok_or_else(|| Error::invalid("checkpoint metadata must be an object"))?;
        meta.insert(format!("{prefix}model_config"), serde_json::to_value(self.config)?);
        Ok(())
    }

    pub fn read_from(ckpt: &Checkpoint, prefix: &str) -> Result<Option<Self>> {
        let Some(cfg) = ckpt.metadata.get(format!("{prefix}model_config")) else {
            return Ok(None);
        };
        let config: ModelConfig = serde_json::from_value(cfg.clone())?;
        let tensors = ckpt
            .tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect();
        ModelParams::from_tensors(config, tensors).map(Some)
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }
}

/// Handles to the interesting nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Final hidden states `[N × d_h]` (after infusion, if any).
    pub hidden: Var,
    /// Vocabulary logits `[rows × |V|]` for the requested rows.
    pub logits: Var,
    pub logit_rows: Vec<usize>,
    /// Pre-softmax question-type scores `[1 × |C|]` in implicit mode.
    pub qtype_logits: Option<Var>,
    /// Attention probabilities per layer, per head.
    pub attention: Vec<Vec<Var>>,
}

/// `tanh(h_i + type_embed[j])` for every row of `h`.
pub fn infuse_explicit(tape: &mut Tape<'_>, h: Var, type_embed: Var, j: usize) -> Result<Var> {
    let rows = tape.value(type_embed).rows();
    if j >= rows {
        return Err(Error::IndexOutOfRange {
            what: "question type",
            index: j,
            limit: rows,
        });
    }
    let e = tape.gather_rows(type_embed, &[j])?;
    let s = tape.add_row(h, e)?;
    Ok(tape.tanh(s))
}

/// Handles produced by [`qtype_head`].
#[derive(Debug, Clone, Copy)]
pub struct QtypeHead {
    /// `tanh(h_0 W_I + b_h)`, reused for infusion.
    pub h_i: Var,
    pub logits: Var,
    pub probs: Var,
}

pub fn qtype_head(
    tape: &mut Tape<'_>,
    h0: Var,
    w_i: Var,
    b_h: Var,
    u_i: Var,
    b_c: Var,
) -> Result<QtypeHead> {
    let a = tape.matmul(h0, w_i)?;
    let a = tape.add_row(a, b_h)?;
    let h_i = tape.tanh(a);
    let z = tape.matmul(h_i, u_i)?;
    let logits = tape.add_row(z, b_c)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(QtypeHead { h_i, logits, probs })
}

fn attention_block(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    cfg: &ModelConfig,
    l: usize,
    x: Var,
    mask: &Tensor,
) -> Result<(Var, Vec<Var>)> {
    let name = |s: &str| format!("layer{l}.{s}");
    let q = tape.matmul(x, p.get(&name("attn.wq"))?)?;
    let k = tape.matmul(x, p.get(&name("attn.wk"))?)?;
    let v = tape.matmul(x, p.get(&name("attn.wv"))?)?;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let s = tape.matmul_t(qh, kh)?;
        let s = tape.scale(s, scale);
        let s = tape.add_const(s, mask)?;
        let a = tape.softmax_rows(s)?;
        probs.push(a);
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let o = tape.matmul(cat, p.get(&name("attn.wo"))?)?;
    Ok((tape.add_row(o, p.get(&name("attn.bo"))?)?, probs))
}

/// Records one forward pass. `logit_rows` restricts the prediction head to
/// the given positions (all positions when `None`).
#[allow(clippy::too_many_arguments)]
pub fn forward_tape(
    tape: &mut Tape<'_>,
    p: &BoundParams,
    cfg: &ModelConfig,
    ids: &[usize],
    segments: &[usize],
    mask: &MaskMatrix,
    qtype: Option<QuestionType>,
    logit_rows: Option<&[usize]>,
) -> Result<ForwardVars> {
    let n = ids.len();
    if n == 0 || segments.len() != n {
        return Err(Error::invalid("ids and segments must be non-empty and aligned"));
    }
    if n > cfg.max_positions {
        return Err(Error::invalid(format!(
            "sequence of {n} tokens exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    if mask.n() != n {
        return Err(Error::invalid(format!("mask is {}×{0} for {n} tokens", mask.n())));
    }
    match (cfg.qta_mode, qtype) {
        (QtaMode::Explicit, None) => {
            return Err(Error::Config("explicit question-type mode needs a question type".into()))
        }
        (QtaMode::None | QtaMode::Implicit, Some(_)) => {
            return Err(Error::Config(
                "a question type is only accepted in explicit mode".into(),
            ))
        }
        _ => {}
    }

    let positions: Vec<usize> = (0..n).collect();
    let tok = tape.gather_rows(p.get("embed.token")?, ids)?;
    let pos = tape.gather_rows(p.get("embed.position")?, &positions)?;
    let seg = tape.gather_rows(p.get("embed.segment")?, segments)?;
    let x = tape.add(tok, pos)?;
    let mut x = tape.add(x, seg)?;

    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let name = |s: &str| format!("layer{l}.{s}");
        let h = tape.layer_norm(x, p.get(&name("ln1.gain"))?, p.get(&name("ln1.bias"))?)?;
        let (a, probs) = attention_block(tape, p, cfg, l, h, mask.as_tensor())?;
        attention.push(probs);
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, p.get(&name("ln2.gain"))?, p.get(&name("ln2.bias"))?)?;
        let f = tape.matmul(h, p.get(&name("ffn.w1"))?)?;
        let f = tape.add_row(f, p.get(&name("ffn.b1"))?)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, p.get(&name("ffn.w2"))?)?;
        let f = tape.add_row(f, p.get(&name("ffn.b2"))?)?;
        x = tape.add(x, f)?;
    }
    let mut hidden = tape.layer_norm(x, p.get("final_ln.gain")?, p.get("final_ln.bias")?)?;

    let mut qtype_logits = None;
    match cfg.qta_mode {
        QtaMode::None => {}
        QtaMode::Explicit => {
            let j = qtype.expect("checked above").index();
            hidden = infuse_explicit(tape, hidden, p.get("qta.type_embed")?, j)?;
        }
        QtaMode::Implicit => {
            let h0 = tape.gather_rows(hidden, &[0])?;
            let head = qtype_head(
                tape,
                h0,
                p.get("qta.w_i")?,
                p.get("qta.b_h")?,
                p.get("qta.u_i")?,
                p.get("qta.b_c")?,
            )?;
            qtype_logits = Some(head.logits);
            let s = tape.add_row(hidden, head.h_i)?;
            hidden = tape.tanh(s);
        }
    }

    let logit_rows: Vec<usize> = match logit_rows {
        Some(r) => r.to_vec(),
        None => positions,
    };
    let sel = tape.gather_rows(hidden, &logit_rows)?;
    let t = tape.matmul(sel, p.get("head.w")?)?;
    let t = tape.add_row(t, p.get("head.b_t")?)?;
    let t = tape.gelu(t);
    let z = tape.matmul(t, p.get("head.u")?)?;
    let logits = tape.add_row(z, p.get("head.b_p")?)?;

    Ok(ForwardVars {
        hidden,
        logits,
        logit_rows,
        qtype_logits,
        attention,
    })
}

/// Plain-value result of [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub hidden: Tensor,
    /// `[N × |V|]` pre-softmax scores.
    pub logits: Tensor,
    pub qtype_logits: Option<Tensor>,
    /// `[layer][head]` attention probabilities, each `[N × N]`.
    pub attention: Vec<Vec<Tensor>>,
}

/// Inference-only forward over all positions.
pub fn forward(
    params: &ModelParams,
    example: &EncodedExample,
    mask: &MaskMatrix,
    qtype: Option<QuestionType>,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fv = forward_tape(
        &mut tape,
        &bound,
        &params.config,
        &example.ids,
        &example.segments,
        mask,
        qtype,
        None,
    )?;
    Ok(ForwardOutput {
        hidden: tape.value(fv.hidden).clone(),
        logits: tape.value(fv.logits).clone(),
        qtype_logits: fv.qtype_logits.map(|v| tape.value(v).clone()),
        attention: fv
            .attention
            .iter()
            .map(|hs| hs.iter().map(|v| tape.value(*v).clone()).collect())
            .collect(),
    })
}

/// Class distribution of the implicit question-type head for a question-only input.
pub fn qtype_distribution(params: &ModelParams, question: &EncodedExample) -> Result<Vec<f64>> {
    if params.config.qta_mode != QtaMode::Implicit {
        return Err(Error::Config("question-type head needs implicit mode".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fv = forward_tape(
        &mut tape,
        &bound,
        &params.config,
        &question.ids,
        &question.segments,
        &question.mask_matrix(),
        None,
        Some(&[]),
    )?;
    let logits = fv.qtype_logits.expect("implicit mode");
    Ok(tape.value(logits).softmax_rows()?.into_data())
}

/// Arg-max question type (lowest ordinal on ties).
pub fn predict_qtype(params: &ModelParams, question: &EncodedExample) -> Result<QuestionType> {
    let probs = qtype_distribution(params, question)?;
    let best = probs
        .iter()
        .enumerate()
        .fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
    Ok(QuestionType::from_index(best).expect("seven classes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_mask_matrix, pack};
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(mode: QtaMode) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ModelParams::init(ModelConfig::tiny(12).with_mode(mode), &mut rng).unwrap();
        // Larger weights than the init std so the checks exercise non-linear regimes.
        for t in p.tensors.values_mut() {
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
        for (k, t) in p.tensors.iter_mut() {
            if k.ends_with(".gain") {
                t.data_mut().iter_mut().for_each(|v| *v = 1.0 + *v);
            }
        }
        p
    }

    fn sample() -> EncodedExample {
        pack(&[5, 6, 7], &[8, 9, 10], 100, 20).unwrap()
    }

    #[test]
    fn closed_form_param_count() {
        let (v, d, l, p) = (12usize, 8usize, 2usize, 128usize);
        let per_layer = 2 * d + 4 * d * d + d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d;
        let base = v * d + p * d + 2 * d + l * per_layer + 2 * d + d * d + d + d * v + v;
        let c = 7;
        assert_eq!(tiny(QtaMode::None).param_count(), base);
        assert_eq!(tiny(QtaMode::Explicit).param_count(), base + c * d);
        assert_eq!(tiny(QtaMode::Implicit).param_count(), base + d * d + d + d * c + c);
    }

    #[test]
    fn question_rows_never_attend_summary() {
        let p = tiny(QtaMode::None);
        let e = sample();
        let m = e.mask_matrix();
        let out = forward(&p, &e, &m, None).unwrap();
        for layer in &out.attention {
            for a in layer {
                for i in 0..e.len() {
                    let row_sum: f64 = a.row(i).iter().sum();
                    assert!((row_sum - 1.0).abs() < 1e-9);
                    for j in 0..e.len() {
                        if !m.allowed(i, j) {
                            assert_eq!(a.get2(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn summary_prefix_logits_ignore_later_tokens() {
        for mode in [QtaMode::None, QtaMode::Implicit] {
            let p = tiny(mode);
            let e = sample();
            let m = e.mask_matrix();
            let base = forward(&p, &e, &m, None).unwrap();
            for j in e.summary_range() {
                let mut e2 = e.clone();
                e2.ids[j] = if e.ids[j] == 11 { 5 } else { 11 };
                let out = forward(&p, &e2, &m, None).unwrap();
                for r in 0..j {
                    assert_eq!(base.logits.row(r), out.logits.row(r), "row {r} changed by token {j}");
                }
                assert_ne!(base.logits.row(j), out.logits.row(j));
            }
        }
    }

    #[test]
    fn zero_type_embedding_is_plain_tanh() {
        let mut p = tiny(QtaMode::Explicit);
        p.get_mut("qta.type_embed").unwrap().data_mut().fill(0.0);
        let e = sample();
        let m = e.mask_matrix();
        let out = forward(&p, &e, &m, Some(QuestionType::Cause)).unwrap();
        let mut plain = p.clone();
        plain.config.qta_mode = QtaMode::None;
        plain.tensors.remove("qta.type_embed");
        let base = forward(&plain, &e, &m, None).unwrap();
        for (a, b) in out.hidden.data().iter().zip(base.hidden.data()) {
            assert_eq!(*a, b.tanh());
        }
    }

    #[test]
    fn qtype_mode_mismatch_is_a_config_error() {
        let e = sample();
        let m = e.mask_matrix();
        assert!(matches!(
            forward(&tiny(QtaMode::Explicit), &e, &m, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            forward(&tiny(QtaMode::None), &e, &m, Some(QuestionType::Other)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn infuse_explicit_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[3, 2]));
        let q = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.5, -1.0]]).unwrap());
        let out = infuse_explicit(&mut tape, h, q, 1).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(out).row(r), &[0.5f64.tanh(), (-1.0f64).tanh()]);
        }
        assert!(infuse_explicit(&mut tape, h, q, 2).is_err());
    }

    #[test]
    fn infuse_explicit_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let qe = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let up = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let qv = tape.param(&qe);
        let uv = tape.constant(up.clone());
        let out = infuse_explicit(&mut tape, hv, qv, 2).unwrap();
        let w = tape.mul(out, uv).unwrap();
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        let g = tape.grad(qv).unwrap();
        let he = tape.value(out).clone();
        for c in 0..3 {
            let expect: f64 = (0..4).map(|i| (1.0 - he.get2(i, c).powi(2)) * up.get2(i, c)).sum();
            assert!((g.get2(2, c) - expect).abs() < 1e-12);
            for r in [0, 1, 3, 4, 5, 6] {
                assert_eq!(g.get2(r, c), 0.0);
            }
        }
        let inputs = BTreeMap::from([("qe".to_string(), qe)]);
        let report = gradcheck::check_named(&inputs, |tape, v| {
            let hv = tape.constant(h.clone());
            let uv = tape.constant(up.clone());
            let out = infuse_explicit(tape, hv, v["qe"], 2)?;
            let w = tape.mul(out, uv)?;
            Ok(tape.sum(w))
        })
        .unwrap();
        assert!(report.passes(), "{report:?}");
    }

    #[test]
    fn zeroed_qtype_head_is_uniform() {
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::full(&[1, 4], 0.3));
        let w = tape.constant(Tensor::zeros(&[4, 4]));
        let bh = tape.constant(Tensor::zeros(&[4]));
        let u = tape.constant(Tensor::zeros(&[4, 7]));
        let bc = tape.constant(Tensor::zeros(&[7]));
        let head = qtype_head(&mut tape, h0, w, bh, u, bc).unwrap();
        let probs = tape.value(head.probs);
        assert!((probs.sum() - 1.0).abs() < 1e-9);
        for &p in probs.data() {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for mode in [QtaMode::None, QtaMode::Explicit, QtaMode::Implicit] {
            let p = tiny(mode);
            let e = sample();
            let m = build_mask_matrix(e.q_span(), e.s_span());
            let cfg = p.config;
            let qtype = (mode == QtaMode::Explicit).then_some(QuestionType::Testing);
            // Only the rows used by this input carry gradient; restrict the
            // position table to keep the check quick.
            let report = gradcheck::check_named_filtered(
                &p.tensors,
                |n| n != "embed.position",
                |tape, vars| {
                    let b = BoundParams { vars: vars.clone() };
                    let fv = forward_tape(tape, &b, &cfg, &e.ids, &e.segments, &m, qtype, Some(&[5, 6, 8]))?;
                    let mut loss = tape.cross_entropy(fv.logits, &[8, 3, 3], &[0, 1, 2])?;
                    if let Some(q) = fv.qtype_logits {
                        let l = tape.cross_entropy(q, &[2], &[0])?;
                        loss = tape.add(loss, l)?;
                    }
                    Ok(loss)
                },
            )
            .unwrap();
            assert!(report.passes(), "{mode:?}: {report:?}");
        }
    }
}
