//! Wengert-style tape: every op appends a node holding its value and enough
//! saved state to run its vector-Jacobian product in reverse order.
//!
//! Parameters are borrowed into the tape (`Tape::param`) so a forward pass does
//! not copy weight tables. A tape lives for one forward/backward pass.

use std::borrow::Cow;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<Vec<f64>>,
    },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Owned leaf; `requires_grad` decides whether backward fills its gradient.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` received any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_t(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    /// Adds the vector `b` (numel = last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let bd = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(&[x, b]);
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, b), rg))
    }

    /// Adds a constant (non-differentiable) tensor, e.g. an additive attention mask.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_const",
                left: xv.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let data = xv.data().iter().zip(c.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), Op::AddConst(x), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::Scale(x, s), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::Tanh(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), Op::SoftmaxRows(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, xhat, inv_std) =
            kernels::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix (embedding lookup); output is `[ids.len() × cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, c) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(Cow::Owned(out), Op::GatherRows(table, ids.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: start + len,
                limit: c,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(out), Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::invalid("concat_cols row count mismatch"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.needs(parts);
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean negative log-likelihood of `targets[k]` under the softmax of
    /// `logits` row `rows[k]`. Log-softmax is fused for stability.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        if rows.len() != targets.len() {
            return Err(Error::invalid("cross_entropy: targets and positions differ in length"));
        }
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(rows.len());
        for (&r, &t) in rows.iter().zip(targets) {
            if r >= n {
                return Err(Error::IndexOutOfRange {
                    what: "position",
                    index: r,
                    limit: n,
                });
            }
            if t >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "target",
                    index: t,
                    limit: vocab,
                });
            }
            let ls = kernels::log_softmax_row(lv.row(r))?;
            total -= ls[t];
            probs.push(ls.iter().map(|v| v.exp()).collect());
        }
        let out = Tensor::scalar(total / rows.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Cow::Owned(out),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::Sum(x), rg)
    }

    fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node<'a>], v: Var, g: impl FnOnce(&mut [f64])) {
        if !nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
        g(slot.data_mut());
    }

    /// Runs reverse-mode accumulation from a scalar `loss`. Gradients from a
    /// previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let gd = g.data();
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        let da = kernels::matmul_t(&g, bv)?;
                        Self::accumulate(&mut grads, nodes, *a, |s| add_into(s, da.data()));
                    }
                    if nodes[b.0].requires_grad {
                        let db = kernels::t_matmul(av, &g)?;
                        Self::accumulate(&mut grads, nodes, *b, |s| add_into(s, db.data()));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        let da = kernels::matmul(&g, bv)?;
                        Self::accumulate(&mut grads, nodes, *a, |s| add_into(s, da.data()));
                    }
                    if nodes[b.0].requires_grad {
                        let db = kernels::t_matmul(&g, av)?;
                        Self::accumulate(&mut grads, nodes, *b, |s| add_into(s, db.data()));
                    }
                }
                Op::Add(a, b) => {
                    Self::accumulate(&mut grads, nodes, *a, |s| add_into(s, gd));
                    Self::accumulate(&mut grads, nodes, *b, |s| add_into(s, gd));
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    Self::accumulate(&mut grads, nodes, *a, |s| {
                        for ((o, g), y) in s.iter_mut().zip(gd).zip(bd) {
                            *o += g * y;
                        }
                    });
                    Self::accumulate(&mut grads, nodes, *b, |s| {
                        for ((o, g), x) in s.iter_mut().zip(gd).zip(ad) {
                            *o += g * x;
                        }
                    });
                }
                Op::AddRow(x, b) => {
                    Self::accumulate(&mut grads, nodes, *x, |s| add_into(s, gd));
                    let c = nodes[b.0].value.numel();
                    Self::accumulate(&mut grads, nodes, *b, |s| {
                        for (i, g) in gd.iter().enumerate() {
                            s[i % c] += g;
                        }
                    });
                }
                Op::AddConst(x) => {
                    Self::accumulate(&mut grads, nodes, *x, |s| add_into(s, gd));
                }
                Op::Scale(x, k) => {
                    Self::accumulate(&mut grads, nodes, *x, |s| {
                        for (o, g) in s.iter_mut().zip(gd) {
                            *o += g * k;
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = nodes[i].value.data();
                    Self::accumulate(&mut grads, nodes, *x, |s| {
                        for ((o, g), t) in s.iter_mut().zip(gd).zip(y) {
                            *o += g * (1.0 - t * t);
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xd = nodes[x.0].value.data();
                    Self::accumulate(&mut grads, nodes, *x, |s| {
                        for ((o, g), v) in s.iter_mut().zip(gd).zip(xd) {
                            *o += g * kernels::gelu_grad_scalar(*v);
                        }
                    });
                }
                Op::SoftmaxRows(x) => {
                    let y = &nodes[i].value;
                    let c = y.cols();
                    Self::accumulate(&mut grads, nodes, *x, |s| {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &gd[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                s[r * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = nodes[x.0].value.cols();
                    let rows = nodes[x.0].value.rows();
                    let gn = nodes[gain.0].value.data();
                    Self::accumulate(&mut grads, nodes, *x, |s| {
                        let mut dxhat = vec![0.0; c];
                        for r in 0..rows {
                            let gr = &gd[r * c..(r + 1) * c];
                            let hr = &xhat[r * c..(r + 1) * c];
                            for j in 0..c {
                                dxhat[j] = gr[j] * gn[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                            let mean_dh =
                                dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                s[r * c + j] += inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                            }
                        }
                    });
                    Self::accumulate(&mut grads, nodes, *gain, |s| {
                        for (k, g) in gd.iter().enumerate() {
                            s[k % c] += g * xhat[k];
                        }
                    });
                    Self::accumulate(&mut grads, nodes, *bias, |s| {
                        for (k, g) in gd.iter().enumerate() {
                            s[k % c] += g;
                        }
                    });
                }
                Op::GatherRows(table, ids) => {
                    let c = nodes[table.0].value.cols();
                    Self::accumulate(&mut grads, nodes, *table, |s| {
                        for (k, &id) in ids.iter().enumerate() {
                            add_into(&mut s[id * c..(id + 1) * c], &gd[k * c..(k + 1) * c]);
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let c = nodes[x.0].value.cols();
                    let len = g.cols();
                    Self::accumulate(&mut grads, nodes, *x, |s| {
                        for r in 0..g.rows() {
                            add_into(
                                &mut s[r * c + start..r * c + start + len],
                                &gd[r * len..(r + 1) * len],
                            );
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pc = nodes[p.0].value.cols();
                        Self::accumulate(&mut grads, nodes, *p, |s| {
                            for r in 0..g.rows() {
                                add_into(
                                    &mut s[r * pc..(r + 1) * pc],
                                    &gd[r * total + offset..r * total + offset + pc],
                                );
                            }
                        });
                        offset += pc;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    rows,
                    targets,
                    probs,
                } => {
                    let v = nodes[logits.0].value.cols();
                    let scale = gd[0] / rows.len() as f64;
                    Self::accumulate(&mut grads, nodes, *logits, |s| {
                        for ((&r, &t), p) in rows.iter().zip(targets).zip(probs) {
                            let dst = &mut s[r * v..(r + 1) * v];
                            for (o, pv) in dst.iter_mut().zip(p) {
                                *o += scale * pv;
                            }
                            dst[t] -= scale;
                        }
                    });
                }
                Op::Sum(x) => {
                    let g0 = gd[0];
                    Self::accumulate(&mut grads, nodes, *x, |s| {
                        for o in s.iter_mut() {
                            *o += g0;
                        }
                    });
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
