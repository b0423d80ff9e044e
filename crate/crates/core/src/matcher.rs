//! Optimal matching layer: pairwise scores, dustbin augmentation, log-domain
//! Sinkhorn normalization, and hard match extraction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};

/// Pairwise match scores `S[i][j] = <f_i^A, f_j^B>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub s: Tensor,
}

/// Scores augmented with a dustbin row and column holding the learned scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedScores {
    pub s_bar: Tensor,
    pub z: f64,
}

/// Soft partial assignment: the `(M+1) x (N+1)` transport plan whose last row
/// and column absorb unmatched keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAssignment {
    pub p_bar: Tensor,
    /// `log(p_bar)`, kept alongside because the loss consumes log entries.
    pub log_p_bar: Tensor,
}

impl PartialAssignment {
    /// Interior `M x N` view (dustbins dropped).
    pub fn interior(&self) -> Tensor {
        let (mp1, np1) = (self.p_bar.rows(), self.p_bar.cols());
        let (m, n) = (mp1 - 1, np1 - 1);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                out.set(i, j, self.p_bar.at(i, j));
            }
        }
        out
    }

    /// Max row-sum residual against the augmented marginal `a = [1, .., 1, N]`.
    pub fn row_residual(&self) -> f64 {
        let (mp1, np1) = (self.p_bar.rows(), self.p_bar.cols());
        let (m, n) = (mp1 - 1, np1 - 1);
        let mut worst = 0.0f64;
        for i in 0..mp1 {
            let target = if i == m { n as f64 } else { 1.0 };
            let sum: f64 = (0..np1).map(|j| self.p_bar.at(i, j)).sum();
            worst = worst.max((sum - target).abs());
        }
        worst
    }

    /// Max column-sum residual against `b = [1, .., 1, M]`.
    pub fn col_residual(&self) -> f64 {
        let (mp1, np1) = (self.p_bar.rows(), self.p_bar.cols());
        let (m, n) = (mp1 - 1, np1 - 1);
        let mut worst = 0.0f64;
        for j in 0..np1 {
            let target = if j == n { m as f64 } else { 1.0 };
            let sum: f64 = (0..mp1).map(|i| self.p_bar.at(i, j)).sum();
            worst = worst.max((sum - target).abs());
        }
        worst
    }
}

/// One extracted correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

/// Hard matches plus the indices left unmatched on each side.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl MatchSet {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.i, m.j)).collect()
    }
}

// ---- tape-level builders (training path) ----

/// `S = f_a . f_b^T` on tape.
pub fn compute_scores_on_tape(tape: &mut Tape, f_a: VarId, f_b: VarId) -> Result<VarId> {
    if tape.value(f_a).cols() != tape.value(f_b).cols() {
        return Err(Error::ShapeMismatch {
            op: "compute_scores",
            detail: format!(
                "descriptor widths differ: {} vs {}",
                tape.value(f_a).cols(),
                tape.value(f_b).cols()
            ),
        });
    }
    let f_b_t = tape.transpose(f_b)?;
    tape.matmul(f_a, f_b_t)
}

/// Append the dustbin row and column, all filled with the scalar `z`.
pub fn augment_on_tape(tape: &mut Tape, scores: VarId, z: VarId) -> Result<VarId> {
    let (m, n) = (tape.value(scores).rows(), tape.value(scores).cols());
    let ones_col = tape.constant(Tensor::filled(m, 1, 1.0))?;
    let z_col = tape.mul(ones_col, z)?;
    let right = tape.concat_cols(scores, z_col)?;
    let ones_row = tape.constant(Tensor::filled(1, n + 1, 1.0))?;
    let z_row = tape.mul(ones_row, z)?;
    tape.concat_rows(right, z_row)
}

/// Log-domain Sinkhorn outputs on tape.
pub struct SinkhornVars {
    /// `log P_bar = S_bar + u (+) v`; the loss reads entries of this.
    pub log_assignment: VarId,
    /// `P_bar = exp(log_assignment)`.
    pub assignment: VarId,
}

/// Orientation rule that makes finite-iteration Sinkhorn exactly equivariant
/// to swapping the two images: a swapped call must perform the mirrored
/// arithmetic of the original one. Decide by shape, and for square inputs by
/// comparing the sorted row-sum and column-sum profiles (invariant to
/// keypoint permutations, odd under transposition).
fn should_transpose(s_bar: &Tensor) -> bool {
    let (r, c) = (s_bar.rows(), s_bar.cols());
    if r != c {
        return r > c;
    }
    let mut row_sums: Vec<f64> = (0..r).map(|i| s_bar.row_slice(i).iter().sum()).collect();
    let mut col_sums: Vec<f64> = (0..c)
        .map(|j| (0..r).map(|i| s_bar.at(i, j)).sum())
        .collect();
    row_sums.sort_by(|a, b| a.partial_cmp(b).unwrap());
    col_sums.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (rs, cs) in row_sums.iter().zip(&col_sums) {
        if rs < cs {
            return false;
        }
        if rs > cs {
            return true;
        }
    }
    false
}

/// Run `iterations` full (u, v) alternations plus a final row update in the
/// canonical orientation, so one marginal matches exactly and the other's
/// residual measures convergence.
pub fn sinkhorn_on_tape(tape: &mut Tape, s_bar: VarId, iterations: usize) -> Result<SinkhornVars> {
    if should_transpose(tape.value(s_bar)) {
        let st = tape.transpose(s_bar)?;
        let out = sinkhorn_oriented(tape, st, iterations)?;
        return Ok(SinkhornVars {
            log_assignment: tape.transpose(out.log_assignment)?,
            assignment: tape.transpose(out.assignment)?,
        });
    }
    sinkhorn_oriented(tape, s_bar, iterations)
}

fn sinkhorn_oriented(tape: &mut Tape, s_bar: VarId, iterations: usize) -> Result<SinkhornVars> {
    if iterations == 0 {
        return Err(Error::InvalidInput("sinkhorn needs at least one iteration".into()));
    }
    let (mp1, np1) = (tape.value(s_bar).rows(), tape.value(s_bar).cols());
    if mp1 < 2 || np1 < 2 {
        return Err(Error::InvalidInput(format!(
            "augmented scores must be at least 2x2, got {mp1}x{np1}"
        )));
    }
    let (m, n) = (mp1 - 1, np1 - 1);

    let mut log_a = vec![0.0; mp1];
    log_a[m] = (n as f64).ln();
    let mut log_b = vec![0.0; np1];
    log_b[n] = (m as f64).ln();
    let log_a = tape.constant(Tensor::col(log_a))?;
    let log_b = tape.constant(Tensor::row(log_b))?;

    let mut v = tape.constant(Tensor::zeros(1, np1))?;
    let mut u;
    let row_update = |tape: &mut Tape, v: VarId| -> Result<VarId> {
        let sv = tape.add(s_bar, v)?;
        let lse = tape.logsumexp_rows(sv)?;
        tape.sub(log_a, lse)
    };
    u = row_update(tape, v)?;
    for _ in 0..iterations {
        let su = tape.add(s_bar, u)?;
        let lse_c = tape.logsumexp_cols(su)?;
        v = tape.sub(log_b, lse_c)?;
        u = row_update(tape, v)?;
    }
    let su = tape.add(s_bar, u)?;
    let log_assignment = tape.add(su, v)?;
    let assignment = tape.exp(log_assignment)?;
    Ok(SinkhornVars { log_assignment, assignment })
}

// ---- value-level operations ----

pub fn compute_scores(f_a: &Tensor, f_b: &Tensor) -> Result<ScoreMatrix> {
    let mut tape = Tape::new();
    let a = tape.constant(f_a.clone())?;
    let b = tape.constant(f_b.clone())?;
    let s = compute_scores_on_tape(&mut tape, a, b)?;
    Ok(ScoreMatrix { s: tape.value(s).clone() })
}

pub fn augment_with_dustbins(scores: &ScoreMatrix, z: f64) -> AugmentedScores {
    let (m, n) = (scores.s.rows(), scores.s.cols());
    let mut s_bar = Tensor::filled(m + 1, n + 1, z);
    for i in 0..m {
        for j in 0..n {
            s_bar.set(i, j, scores.s.at(i, j));
        }
    }
    AugmentedScores { s_bar, z }
}

/// Entropy-regularized assignment of the augmented scores.
pub fn sinkhorn(augmented: &AugmentedScores, iterations: usize) -> Result<PartialAssignment> {
    if !augmented.s_bar.all_finite() {
        let (r, c) = augmented.s_bar.first_non_finite().unwrap();
        return Err(Error::NonFinite { op: "sinkhorn", detail: format!("score entry ({r}, {c})") });
    }
    let mut tape = Tape::new();
    let s_bar = tape.constant(augmented.s_bar.clone())?;
    let vars = sinkhorn_on_tape(&mut tape, s_bar, iterations)?;
    Ok(PartialAssignment {
        p_bar: tape.value(vars.assignment).clone(),
        log_p_bar: tape.value(vars.log_assignment).clone(),
    })
}

/// Default confidence threshold for retaining matches.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.2;

/// Hard matches: interior cells that are the strict maximum of both their row
/// and their column (mutual argmax) and reach the confidence threshold.
pub fn extract_matches(assignment: &PartialAssignment, threshold: f64) -> MatchSet {
    let interior = assignment.interior();
    let (m, n) = (interior.rows(), interior.cols());
    let mut set = MatchSet::default();
    let mut matched_a = vec![false; m];
    let mut matched_b = vec![false; n];
    for i in 0..m {
        for j in 0..n {
            let p = interior.at(i, j);
            if p < threshold || p <= 0.0 {
                continue;
            }
            let strict_row_max = (0..n).all(|jj| jj == j || interior.at(i, jj) < p);
            let strict_col_max = (0..m).all(|ii| ii == i || interior.at(ii, j) < p);
            if strict_row_max && strict_col_max {
                set.matches.push(Match { i, j, confidence: p.min(1.0) });
                matched_a[i] = true;
                matched_b[j] = true;
            }
        }
    }
    set.unmatched_a = (0..m).filter(|&i| !matched_a[i]).collect();
    set.unmatched_b = (0..n).filter(|&j| !matched_b[j]).collect();
    set
}

/// Exact linear-assignment oracle: the score-maximizing injective mapping
/// over `min(M, N)` pairs, solved with the Hungarian algorithm on the padded
/// square cost matrix. Kept independent of the transport path; sized for
/// test matrices.
pub fn hungarian_oracle(scores: &ScoreMatrix) -> Result<Vec<(usize, usize)>> {
    let (m, n) = (scores.s.rows(), scores.s.cols());
    const LIMIT: usize = 12;
    if m > LIMIT || n > LIMIT {
        return Err(Error::InvalidInput(format!(
            "hungarian oracle limited to {LIMIT}x{LIMIT}, got {m}x{n}"
        )));
    }
    if m == 0 || n == 0 {
        return Ok(Vec::new());
    }
    let size = m.max(n);
    // minimize cost = -score; padding rows/cols carry zero cost
    let cost = |i: usize, j: usize| -> f64 {
        if i < m && j < n {
            -scores.s.at(i, j)
        } else {
            0.0
        }
    };

    // Hungarian algorithm with potentials, 1-indexed internally.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut assignment = vec![0usize; size + 1]; // column -> row
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        assignment[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = assignment[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[assignment[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assignment[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assignment[j0] = assignment[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    for j in 1..=size {
        let i = assignment[j];
        if i >= 1 && i - 1 < m && j - 1 < n {
            pairs.push((i - 1, j - 1));
        }
    }
    pairs.sort_unstable();
    Ok(pairs)
}
