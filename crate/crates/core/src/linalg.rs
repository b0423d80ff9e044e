//! Small dense linear-algebra helpers: Gaussian elimination and a Jacobi
//! eigensolver for symmetric matrices. Sized for geometry problems (8x8,
//! 9x9); not a general-purpose library.

use crate::error::{Error, Result};

/// Solve `A x = b` in place via Gaussian elimination with partial pivoting.
pub fn solve(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = a.len();
    for (i, row) in a.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidInput(format!("row {i} has {} entries in an {n}x{n} system", row.len())));
        }
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Degenerate(format!("singular system at column {col}")));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Eigenvector of a symmetric matrix belonging to its smallest eigenvalue,
/// via cyclic Jacobi rotations. Returns `(eigenvalues_ascending, vector)`.
pub fn smallest_eigenvector_symmetric(mat: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = mat.len();
    let mut a: Vec<Vec<f64>> = mat.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&a)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let smallest = order[0];
    let vector: Vec<f64> = (0..n).map(|k| v[k][smallest]).collect();
    Ok((eigenvalues, vector))
}

fn frobenius(a: &[Vec<f64>]) -> f64 {
    a.iter().flat_map(|r| r.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn solves_small_system() {
        let mut a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let mut b = vec![5.0, 10.0];
        let x = solve(&mut a, &mut b).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_system_is_detected() {
        let mut a = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        let mut b = vec![1.0, 2.0];
        assert!(solve(&mut a, &mut b).is_err());
    }

    #[test]
    fn jacobi_finds_smallest_eigenpair() {
        // Symmetric matrix with known spectrum: diag(1, 5, 10) conjugated by
        // a rotation is messy to write down, so test against a hand-checked
        // matrix instead.
        let m = vec![
            vec![4.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 2.0],
        ];
        let (vals, vec_) = smallest_eigenvector_symmetric(&m).unwrap();
        // residual check: (M - lambda I) v ~ 0
        let lambda = vals[0];
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += m[i][j] * vec_[j];
            }
            assert_relative_eq!(acc, lambda * vec_[i], epsilon = 1e-10);
        }
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }
}
