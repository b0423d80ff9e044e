//! Small shared building blocks for tape-based model code.

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// How parameter tensors become tape variables: bound as fresh named leaves
/// (training, inference) or resolved against leaves someone else bound (the
/// gradient-check harness).
pub(crate) trait ParamBinder {
    fn bind(&mut self, tape: &mut Tape, name: String, value: &Tensor) -> Result<VarId>;
}

/// Registers each parameter as a new leaf carrying its value.
pub(crate) struct LeafBinder;

impl ParamBinder for LeafBinder {
    fn bind(&mut self, tape: &mut Tape, name: String, value: &Tensor) -> Result<VarId> {
        tape.leaf(name, value.clone())
    }
}

/// Resolves parameter names against pre-bound leaves.
pub(crate) struct LookupBinder<'a>(pub &'a std::collections::BTreeMap<String, VarId>);

impl ParamBinder for LookupBinder<'_> {
    fn bind(&mut self, _tape: &mut Tape, name: String, _value: &Tensor) -> Result<VarId> {
        self.0
            .get(&name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("no bound leaf named {name:?}")))
    }
}

/// Affine map parameters: `x . weight + bias` with `weight: in x out`,
/// `bias: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(fan_in, fan_out), bias: Tensor::zeros(1, fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Learned per-feature scale and shift applied after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl NormParams {
    pub fn identity(width: usize) -> Self {
        Self { scale: Tensor::filled(1, width, 1.0), shift: Tensor::zeros(1, width) }
    }
}

pub(crate) fn linear(tape: &mut Tape, x: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
    let wx = tape.matmul(x, weight)?;
    tape.add(wx, bias)
}

/// Per-feature normalization over the keypoint axis with learned scale and
/// shift: each feature column is standardized across the rows of the set.
/// Deterministic for any set size, unlike batch statistics.
pub(crate) fn feature_norm(tape: &mut Tape, x: VarId, scale: VarId, shift: VarId) -> Result<VarId> {
    let rows = tape.value(x).rows();
    if rows == 0 {
        return Err(Error::ShapeMismatch { op: "feature_norm", detail: "zero rows".into() });
    }
    let inv_m = 1.0 / rows as f64;
    let col_sum = tape.sum_cols(x)?;
    let mean = tape.scale(col_sum, inv_m)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let sq_sum = tape.sum_cols(sq)?;
    let var = tape.scale(sq_sum, inv_m)?;
    let var_eps = tape.add_scalar(var, NORM_EPS)?;
    let std = tape.sqrt(var_eps)?;
    let standardized = tape.div(centered, std)?;
    let scaled = tape.mul(standardized, scale)?;
    tape.add(scaled, shift)
}

/// Uniform initialization with variance preserved across the affine map.
pub(crate) fn glorot_uniform(
    rng: &mut rand_chacha::ChaCha12Rng,
    fan_in: usize,
    fan_out: usize,
) -> LinearParams {
    use rand::Rng;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut weight = Tensor::zeros(fan_in, fan_out);
    for v in weight.data_mut() {
        *v = rng.random_range(-limit..limit);
    }
    LinearParams { weight, bias: Tensor::zeros(1, fan_out) }
}
