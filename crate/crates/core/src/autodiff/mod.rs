//! Dense-array computation with record-and-replay reverse-mode
//! differentiation.
//!
//! Everything learnable in the crate is expressed through [`Tape`]
//! operations: a forward pass records primitives define-by-run, and
//! [`Tape::backward`] walks the record in reverse to accumulate gradients
//! with respect to every named leaf. Softmax and logsumexp are max-shifted;
//! all public operations reject non-finite outputs.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, GradCheckReport, ScalarExpr};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;

use std::collections::BTreeMap;

use crate::error::Result;

/// Evaluate an expression over named inputs on a fresh tape.
///
/// Returns the tape (retained for a backward pass) and the output handle.
pub fn evaluate<F>(f: F, inputs: &[(String, Tensor)]) -> Result<(Tape, VarId)>
where
    F: FnOnce(&mut Tape, &BTreeMap<String, VarId>) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let mut ids = BTreeMap::new();
    for (name, tensor) in inputs {
        ids.insert(name.clone(), tape.leaf(name.clone(), tensor.clone())?);
    }
    let out = f(&mut tape, &ids)?;
    Ok((tape, out))
}

/// Reverse pass over a completed forward tape.
pub fn gradient(tape: &mut Tape, output: VarId, seed: &Tensor) -> Result<Gradients> {
    tape.backward(output, seed)
}
