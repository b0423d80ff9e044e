use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Constant,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId, f64),
    Relu(VarId),
    Exp(VarId),
    Log(VarId),
    Sqrt(VarId),
    Transpose(VarId),
    SoftmaxRows(VarId),
    LogsumexpRows(VarId),
    LogsumexpCols(VarId),
    SumRows(VarId),
    SumCols(VarId),
    SumAll(VarId),
    ConcatRows(VarId, VarId),
    ConcatCols(VarId, VarId),
    SliceCols(VarId, usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar output with respect to every named leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn from_map(by_leaf: BTreeMap<String, Tensor>) -> Self {
        Self { by_leaf }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_leaf.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_leaf.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_leaf
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// Define-by-run computation tape: records primitive operations during the
/// forward pass and replays them in reverse to accumulate gradients.
///
/// Every public operation validates shapes up front and checks the output for
/// non-finite values, so a tape that built successfully holds only finite
/// tensors. One tape serves one evaluation; it is rebuilt per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    /// Post-activation sign of every ReLU input, in recording order. Two runs
    /// of the same expression with perturbed inputs can be compared entry by
    /// entry to detect kink crossings.
    relu_signs: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn relu_signs(&self) -> &[bool] {
        &self.relu_signs
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<VarId> {
        if let Some((r, c)) = value.first_non_finite() {
            return Err(Error::NonFinite { op: op_name(&op), detail: format!("output entry ({r}, {c})") });
        }
        self.nodes.push(Node { op, value });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Bind a named parameter leaf. Gradients are reported against this name.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Result<VarId> {
        let name = name.into();
        if self.nodes.iter().any(|n| matches!(&n.op, Op::Leaf(existing) if *existing == name)) {
            return Err(Error::InvalidInput(format!("duplicate leaf name {name:?}")));
        }
        self.push(Op::Leaf(name), value)
    }

    /// Record a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k_matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k_binary("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push(Op::Div(a, b), v)
    }

    pub fn scale(&mut self, a: VarId, factor: f64) -> Result<VarId> {
        let v = k_map(self.value(a), |x| x * factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn add_scalar(&mut self, a: VarId, offset: f64) -> Result<VarId> {
        let v = k_map(self.value(a), |x| x + offset);
        self.push(Op::AddScalar(a, offset), v)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let signs: Vec<bool> = self.value(a).data().iter().map(|x| *x > 0.0).collect();
        self.relu_signs.extend(signs);
        let v = k_map(self.value(a), |x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        let v = k_map(self.value(a), f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        let v = k_map(self.value(a), f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        let v = k_map(self.value(a), f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).transposed();
        self.push(Op::Transpose(a), v)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId> {
        let v = k_softmax_rows(self.value(a))?;
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn logsumexp_rows(&mut self, a: VarId) -> Result<VarId> {
        let v = k_logsumexp_rows(self.value(a))?;
        self.push(Op::LogsumexpRows(a), v)
    }

    pub fn logsumexp_cols(&mut self, a: VarId) -> Result<VarId> {
        let v = k_logsumexp_cols(self.value(a))?;
        self.push(Op::LogsumexpCols(a), v)
    }

    pub fn sum_rows(&mut self, a: VarId) -> Result<VarId> {
        let v = k_sum_rows(self.value(a));
        self.push(Op::SumRows(a), v)
    }

    pub fn sum_cols(&mut self, a: VarId) -> Result<VarId> {
        let v = k_sum_cols(self.value(a));
        self.push(Op::SumCols(a), v)
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k_concat_rows(self.value(a), self.value(b))?;
        self.push(Op::ConcatRows(a, b), v)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = k_concat_cols(self.value(a), self.value(b))?;
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> Result<VarId> {
        let v = k_slice_cols(self.value(a), start, end)?;
        self.push(Op::SliceCols(a, start, end), v)
    }

    /// Reverse pass: propagate `seed` from `output` back to every leaf.
    ///
    /// Consumes the tape logically; a second call is an error.
    pub fn backward(&mut self, output: VarId, seed: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;

        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("seed is {:?} but output is {:?}", seed.shape(), out_shape),
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf(_) | Op::Constant => {
                    grads[i] = Some(g); // keep for collection below
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = k_matmul_nt(&g, bv);
                    let gb = k_matmul_tn(av, &g);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Add(a, b) => {
                    let ga = reduce_to_shape(&g, self.value(*a).shape());
                    let gb = reduce_to_shape(&g, self.value(*b).shape());
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to_shape(&g, self.value(*a).shape());
                    let mut gb = reduce_to_shape(&g, self.value(*b).shape());
                    for x in gb.data_mut() {
                        *x = -*x;
                    }
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Mul(a, b) => {
                    let (ga, gb) = k_binary_backward(&g, self.value(*a), self.value(*b), |_x, y, up| up * y, |x, _y, up| up * x);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Div(a, b) => {
                    let (ga, gb) = k_binary_backward(&g, self.value(*a), self.value(*b), |_x, y, up| up / y, |x, y, up| -up * x / (y * y));
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Scale(a, factor) => {
                    let mut ga = g.clone();
                    let f = *factor;
                    for x in ga.data_mut() {
                        *x *= f;
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::AddScalar(a, _) => {
                    accumulate(&mut grads, a.0, g);
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let mut ga = g.clone();
                    for (x, inp) in ga.data_mut().iter_mut().zip(av.data()) {
                        if *inp <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Exp(a) => {
                    let yv = &self.nodes[i].value;
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(yv.data()) {
                        *x *= y;
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Log(a) => {
                    let av = self.value(*a);
                    let mut ga = g.clone();
                    for (x, inp) in ga.data_mut().iter_mut().zip(av.data()) {
                        *x /= inp;
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Sqrt(a) => {
                    let yv = &self.nodes[i].value;
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(yv.data()) {
                        *x /= 2.0 * y;
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a.0, g.transposed());
                }
                Op::SoftmaxRows(a) => {
                    let yv = &self.nodes[i].value;
                    let (r, c) = (yv.rows(), yv.cols());
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        let dot: f64 = (0..c).map(|j| g.at(row, j) * yv.at(row, j)).sum();
                        for j in 0..c {
                            ga.set(row, j, yv.at(row, j) * (g.at(row, j) - dot));
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::LogsumexpRows(a) => {
                    let av = self.value(*a);
                    let yv = &self.nodes[i].value;
                    let (r, c) = (av.rows(), av.cols());
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        let gi = g.at(row, 0);
                        let lse = yv.at(row, 0);
                        for j in 0..c {
                            ga.set(row, j, gi * (av.at(row, j) - lse).exp());
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::LogsumexpCols(a) => {
                    let av = self.value(*a);
                    let yv = &self.nodes[i].value;
                    let (r, c) = (av.rows(), av.cols());
                    let mut ga = Tensor::zeros(r, c);
                    for j in 0..c {
                        let gj = g.at(0, j);
                        let lse = yv.at(0, j);
                        for row in 0..r {
                            ga.set(row, j, gj * (av.at(row, j) - lse).exp());
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::SumRows(a) => {
                    let av = self.value(*a);
                    let (r, c) = (av.rows(), av.cols());
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        let gi = g.at(row, 0);
                        for j in 0..c {
                            ga.set(row, j, gi);
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let (r, c) = (av.rows(), av.cols());
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        for j in 0..c {
                            ga.set(row, j, g.at(0, j));
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    let gi = g.at(0, 0);
                    accumulate(&mut grads, a.0, Tensor::filled(av.rows(), av.cols(), gi));
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).rows();
                    let c = g.cols();
                    let rb = self.value(*b).rows();
                    let mut ga = Tensor::zeros(ra, c);
                    let mut gb = Tensor::zeros(rb, c);
                    ga.data_mut().copy_from_slice(&g.data()[..ra * c]);
                    gb.data_mut().copy_from_slice(&g.data()[ra * c..]);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = (self.value(*a).rows(), self.value(*a).cols());
                    let cb = self.value(*b).cols();
                    let mut ga = Tensor::zeros(r, ca);
                    let mut gb = Tensor::zeros(r, cb);
                    for row in 0..r {
                        for j in 0..ca {
                            ga.set(row, j, g.at(row, j));
                        }
                        for j in 0..cb {
                            gb.set(row, j, g.at(row, ca + j));
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::SliceCols(a, start, _end) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for row in 0..g.rows() {
                        for j in 0..g.cols() {
                            ga.set(row, start + j, g.at(row, j));
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
            }
        }

        let mut by_leaf = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(name) = &node.op {
                let grad = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                by_leaf.insert(name.clone(), grad);
            }
        }
        Ok(Gradients { by_leaf })
    }

    /// Recompute every node from its recorded operation and inputs.
    ///
    /// Returns the recomputed values in recording order; for a healthy tape
    /// they are bit-identical to the stored ones.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf(_) | Op::Constant => node.value.clone(),
                Op::MatMul(a, b) => k_matmul(&values[a.0], &values[b.0])?,
                Op::Add(a, b) => k_binary("add", &values[a.0], &values[b.0], |x, y| x + y)?,
                Op::Sub(a, b) => k_binary("sub", &values[a.0], &values[b.0], |x, y| x - y)?,
                Op::Mul(a, b) => k_binary("mul", &values[a.0], &values[b.0], |x, y| x * y)?,
                Op::Div(a, b) => k_binary("div", &values[a.0], &values[b.0], |x, y| x / y)?,
                Op::Scale(a, f) => k_map(&values[a.0], |x| x * f),
                Op::AddScalar(a, o) => k_map(&values[a.0], |x| x + o),
                Op::Relu(a) => k_map(&values[a.0], |x| x.max(0.0)),
                Op::Exp(a) => k_map(&values[a.0], f64::exp),
                Op::Log(a) => k_map(&values[a.0], f64::ln),
                Op::Sqrt(a) => k_map(&values[a.0], f64::sqrt),
                Op::Transpose(a) => values[a.0].transposed(),
                Op::SoftmaxRows(a) => k_softmax_rows(&values[a.0])?,
                Op::LogsumexpRows(a) => k_logsumexp_rows(&values[a.0])?,
                Op::LogsumexpCols(a) => k_logsumexp_cols(&values[a.0])?,
                Op::SumRows(a) => k_sum_rows(&values[a.0]),
                Op::SumCols(a) => k_sum_cols(&values[a.0]),
                Op::SumAll(a) => Tensor::scalar(values[a.0].data().iter().sum()),
                Op::ConcatRows(a, b) => k_concat_rows(&values[a.0], &values[b.0])?,
                Op::ConcatCols(a, b) => k_concat_cols(&values[a.0], &values[b.0])?,
                Op::SliceCols(a, s, e) => k_slice_cols(&values[a.0], *s, *e)?,
            };
            values.push(v);
        }
        Ok(values)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf(_) => "leaf",
        Op::Constant => "constant",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(..) => "relu",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Transpose(..) => "transpose",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LogsumexpRows(..) => "logsumexp_rows",
        Op::LogsumexpCols(..) => "logsumexp_cols",
        Op::SumRows(..) => "sum_rows",
        Op::SumCols(..) => "sum_cols",
        Op::SumAll(..) => "sum_all",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
    }
}

fn accumulate(grads: &mut [Option<Tensor>], slot: usize, g: Tensor) {
    match &mut grads[slot] {
        Some(existing) => {
            for (x, y) in existing.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        none => *none = Some(g),
    }
}

// ---- kernels (shared by forward, replay, and backward) ----

fn k_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{}x{} . {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        for p in 0..k {
            let aip = a.at(i, p);
            if aip == 0.0 {
                continue;
            }
            let brow = b.row_slice(p);
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `g . b^T` without materializing the transpose.
fn k_matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.rows(), g.cols(), b.rows());
    let mut out = Tensor::zeros(m, k);
    for i in 0..m {
        let grow = g.row_slice(i);
        for p in 0..k {
            let brow = b.row_slice(p);
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            out.set(i, p, acc);
        }
    }
    out
}

/// `a^T . g` without materializing the transpose.
fn k_matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), g.cols());
    let mut out = Tensor::zeros(k, n);
    for i in 0..m {
        let arow = a.row_slice(i);
        let grow = g.row_slice(i);
        for (p, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn broadcast_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize)> {
    let pick = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (pick(a[0], b[0]), pick(a[1], b[1])) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            detail: format!("cannot broadcast {}x{} with {}x{}", a[0], a[1], b[0], b[1]),
        }),
    }
}

fn k_binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (r, c) = broadcast_dims(op, a.shape(), b.shape())?;
    let mut out = Tensor::zeros(r, c);
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    for i in 0..r {
        for j in 0..c {
            let av = a.at(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j });
            let bv = b.at(if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j });
            out.set(i, j, f(av, bv));
        }
    }
    Ok(out)
}

/// Backward for broadcasting binaries: walks the output grid once,
/// accumulating into the (possibly broadcast) input slots.
fn k_binary_backward(
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) -> (Tensor, Tensor) {
    let (r, c) = (g.rows(), g.cols());
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let mut ga = Tensor::zeros(ar, ac);
    let mut gb = Tensor::zeros(br, bc);
    for i in 0..r {
        for j in 0..c {
            let (ai, aj) = (if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j });
            let (bi, bj) = (if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j });
            let (av, bv, up) = (a.at(ai, aj), b.at(bi, bj), g.at(i, j));
            ga.set(ai, aj, ga.at(ai, aj) + da(av, bv, up));
            gb.set(bi, bj, gb.at(bi, bj) + db(av, bv, up));
        }
    }
    (ga, gb)
}

/// Sum `grad` over any dimension that was broadcast up from size 1.
fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    let (tr, tc) = (shape[0], shape[1]);
    if grad.rows() == tr && grad.cols() == tc {
        return grad.clone();
    }
    let mut out = Tensor::zeros(tr, tc);
    for i in 0..grad.rows() {
        for j in 0..grad.cols() {
            let (oi, oj) = (if tr == 1 { 0 } else { i }, if tc == 1 { 0 } else { j });
            out.set(oi, oj, out.at(oi, oj) + grad.at(i, j));
        }
    }
    out
}

fn k_map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for x in out.data_mut() {
        *x = f(*x);
    }
    out
}

fn k_softmax_rows(a: &Tensor) -> Result<Tensor> {
    if a.cols() == 0 {
        return Err(Error::ShapeMismatch { op: "softmax_rows", detail: "zero columns".into() });
    }
    let (r, c) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let row = a.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..c {
            out.set(i, j, out.at(i, j) / sum);
        }
    }
    Ok(out)
}

fn k_logsumexp_rows(a: &Tensor) -> Result<Tensor> {
    if a.cols() == 0 {
        return Err(Error::ShapeMismatch { op: "logsumexp_rows", detail: "zero columns".into() });
    }
    let r = a.rows();
    let mut out = Tensor::zeros(r, 1);
    for i in 0..r {
        let row = a.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.set(i, 0, m + sum.ln());
    }
    Ok(out)
}

fn k_logsumexp_cols(a: &Tensor) -> Result<Tensor> {
    if a.rows() == 0 {
        return Err(Error::ShapeMismatch { op: "logsumexp_cols", detail: "zero rows".into() });
    }
    let (r, c) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(1, c);
    for j in 0..c {
        let mut m = f64::NEG_INFINITY;
        for i in 0..r {
            m = m.max(a.at(i, j));
        }
        let mut sum = 0.0;
        for i in 0..r {
            sum += (a.at(i, j) - m).exp();
        }
        out.set(0, j, m + sum.ln());
    }
    Ok(out)
}

fn k_sum_rows(a: &Tensor) -> Tensor {
    let r = a.rows();
    let mut out = Tensor::zeros(r, 1);
    for i in 0..r {
        out.set(i, 0, a.row_slice(i).iter().sum());
    }
    out
}

fn k_sum_cols(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(1, c);
    for i in 0..r {
        for j in 0..c {
            out.set(0, j, out.at(0, j) + a.at(i, j));
        }
    }
    out
}

fn k_concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "concat_rows",
            detail: format!("{} vs {} columns", a.cols(), b.cols()),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), data)
}

fn k_concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "concat_cols",
            detail: format!("{} vs {} rows", a.rows(), b.rows()),
        });
    }
    let (r, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(r * (ca + cb));
    for i in 0..r {
        data.extend_from_slice(a.row_slice(i));
        data.extend_from_slice(b.row_slice(i));
    }
    Tensor::matrix(r, ca + cb, data)
}

fn k_slice_cols(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    if start > end || end > a.cols() {
        return Err(Error::ShapeMismatch {
            op: "slice_cols",
            detail: format!("range {start}..{end} out of 0..{}", a.cols()),
        });
    }
    let r = a.rows();
    let mut data = Vec::with_capacity(r * (end - start));
    for i in 0..r {
        data.extend_from_slice(&a.row_slice(i)[start..end]);
    }
    Tensor::matrix(r, end - start, data)
}
