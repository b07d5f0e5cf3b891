//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule on the tape.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor so entries whose true gradient is ~0 are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks every entry of every named input of the scalar function `f`.
pub fn check_named<F>(inputs: &BTreeMap<String, Tensor>, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>, &BTreeMap<String, Var>) -> Result<Var>,
{
    check_named_filtered(inputs, |_| true, f)
}

/// Like [`check_named`] but only perturbs inputs whose name passes `select`.
pub fn check_named_filtered<S, F>(
    inputs: &BTreeMap<String, Tensor>,
    select: S,
    f: F,
) -> Result<GradCheckReport>
where
    S: Fn(&str) -> bool,
    F: for<'a> Fn(&mut Tape<'a>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let eval = |vals: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|(k, t)| (k.clone(), tape.param(t)))
            .collect::<BTreeMap<_, _>>();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(k, t)| (k.clone(), tape.param(t)))
        .collect::<BTreeMap<_, _>>();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: BTreeMap<String, Tensor> = vars
        .iter()
        .map(|(k, v)| {
            let g = tape
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            (k.clone(), g)
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut work = inputs.clone();
    for name in inputs.keys().filter(|n| select(n)) {
        for i in 0..inputs[name].numel() {
            let orig = inputs[name].data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[name].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = format!("{name}[{i}]");
                }
            }
        }
    }
    Ok(report)
}
