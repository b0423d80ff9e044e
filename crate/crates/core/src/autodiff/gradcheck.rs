use std::collections::BTreeMap;

use rayon::prelude::*;

use super::tape::{Tape, VarId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over all checked coordinates of
    /// `|analytic - central difference| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Leaf name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Coordinates excluded because the +/-h evaluations crossed a ReLU kink.
    pub excluded: Vec<(String, usize)>,
    /// Number of coordinates actually compared.
    pub checked: usize,
}

/// Expression under test: binds already-registered leaves to an output.
pub trait ScalarExpr: Sync {
    fn eval(&self, tape: &mut Tape, leaves: &BTreeMap<String, VarId>) -> Result<VarId>;
}

impl<F> ScalarExpr for F
where
    F: Fn(&mut Tape, &BTreeMap<String, VarId>) -> Result<VarId> + Sync,
{
    fn eval(&self, tape: &mut Tape, leaves: &BTreeMap<String, VarId>) -> Result<VarId> {
        self(tape, leaves)
    }
}

fn run_forward(
    f: &dyn ScalarExpr,
    point: &[(String, Tensor)],
    tweak: Option<(usize, usize, f64)>,
) -> Result<(Tape, VarId, f64)> {
    let mut tape = Tape::new();
    let mut ids = BTreeMap::new();
    for (li, (name, tensor)) in point.iter().enumerate() {
        let mut value = tensor.clone();
        if let Some((tl, tc, delta)) = tweak {
            if tl == li {
                value.data_mut()[tc] += delta;
            }
        }
        ids.insert(name.clone(), tape.leaf(name.clone(), value)?);
    }
    let out = f.eval(&mut tape, &ids)?;
    let v = tape.value(out).scalar_value().map_err(|_| Error::ShapeMismatch {
        op: "check_gradient",
        detail: "expression under test must evaluate to a 1x1 tensor".into(),
    })?;
    Ok((tape, out, v))
}

/// Compare analytic gradients of a scalar expression against central finite
/// differences at `point`.
///
/// Coordinates where the perturbed evaluations land on different sides of a
/// ReLU kink are excluded from the maximum: the derivative does not exist
/// there and the comparison would be meaningless.
pub fn check_gradient(
    f: &dyn ScalarExpr,
    point: &[(String, Tensor)],
    h: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::InvalidInput(format!("step h must be positive, got {h}")));
    }

    let (mut tape, out, _) = run_forward(f, point, None)?;
    let center_signs = tape.relu_signs().to_vec();
    let analytic = tape.backward(out, &Tensor::scalar(1.0))?;

    let mut coords = Vec::new();
    for (li, (name, tensor)) in point.iter().enumerate() {
        for ci in 0..tensor.len() {
            coords.push((li, name.clone(), ci));
        }
    }

    // (rel_error, excluded) per coordinate, in coordinate order.
    let results: Result<Vec<(f64, bool)>> = coords
        .par_iter()
        .map(|(li, name, ci)| {
            let context = |e: Error| {
                Error::NonFinite {
                    op: "check_gradient",
                    detail: format!("perturbing leaf {name:?} coordinate {ci}: {e}"),
                }
            };
            let (plus_tape, _, f_plus) =
                run_forward(f, point, Some((*li, *ci, h))).map_err(context)?;
            let (minus_tape, _, f_minus) =
                run_forward(f, point, Some((*li, *ci, -h))).map_err(context)?;
            let crossed = plus_tape.relu_signs() != center_signs
                || minus_tape.relu_signs() != center_signs;
            if crossed {
                return Ok((0.0, true));
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic
                .get(name)
                .map(|t| t.data()[*ci])
                .unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            Ok((rel, false))
        })
        .collect();
    let results = results?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        excluded: Vec::new(),
        checked: 0,
    };
    for ((li, name, ci), (rel, excluded)) in coords.iter().zip(&results) {
        let _ = li;
        if *excluded {
            report.excluded.push((name.clone(), *ci));
            continue;
        }
        report.checked += 1;
        if *rel > report.max_rel_error {
            report.max_rel_error = *rel;
            report.worst = Some((name.clone(), *ci));
        }
    }
    Ok(report)
}
