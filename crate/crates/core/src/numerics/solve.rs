//! SPD linear solves via Cholesky factorization.

use super::matrix::Matrix;
use super::SYMMETRY_TOL;
use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `L L^T = m`. Fails naming the
/// first non-positive pivot.
fn cholesky(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = m.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(Error::NotPositiveDefinite {
                        pivot: i,
                        value: acc,
                    });
                }
                l.set(i, j, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `m * sol = rhs` for symmetric positive definite `m`, one RHS per
/// column of `rhs`.
pub fn solve_spd(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if m.rows() != rhs.rows() {
        return Err(Error::ShapeMismatch {
            op: "solve_spd",
            left_rows: m.rows(),
            left_cols: m.cols(),
            right_rows: rhs.rows(),
            right_cols: rhs.cols(),
        });
    }
    let gap = m.asymmetry();
    if gap > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            gap,
            tol: SYMMETRY_TOL,
        });
    }
    let l = cholesky(&m.symmetrized())?;
    let n = m.rows();
    let mut sol = Matrix::zeros(n, rhs.cols());
    for c in 0..rhs.cols() {
        // forward: L y = b
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = rhs.get(i, c);
            for k in 0..i {
                acc -= l.get(i, k) * y[k];
            }
            y[i] = acc / l.get(i, i);
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in (i + 1)..n {
                acc -= l.get(k, i) * sol.get(k, c);
            }
            sol.set(i, c, acc / l.get(i, i));
        }
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn identity_solve_returns_rhs() {
        let b = Matrix::from_rows(&[vec![1.0], vec![-2.0], vec![3.0]]).unwrap();
        let sol = solve_spd(&Matrix::identity(3), &b).unwrap();
        assert_eq!(sol, b);
    }

    #[test]
    fn diagonal_solve_hand_case() {
        let m = Matrix::diag(&[2.0, 4.0]);
        let b = Matrix::from_rows(&[vec![2.0], vec![8.0]]).unwrap();
        let sol = solve_spd(&m, &b).unwrap();
        assert!((sol.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((sol.get(1, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn random_spd_multiply_back() {
        let mut s = RngStream::new(123, 9);
        let a = s.gaussian_matrix(6, 6);
        // A A^T + I is comfortably SPD
        let m = a
            .matmul(&a.transpose())
            .unwrap()
            .add(&Matrix::identity(6))
            .unwrap();
        let rhs = s.gaussian_matrix(6, 3);
        let sol = solve_spd(&m, &rhs).unwrap();
        let back = m.matmul(&sol).unwrap();
        let resid = back.sub(&rhs).unwrap().frobenius_norm();
        assert!(
            resid <= 1e-8 * rhs.frobenius_norm(),
            "solve residual {resid} too large"
        );
    }

    #[test]
    fn ill_conditioned_within_budget() {
        // condition number 1e8: residual must still meet the 1e-8 relative bound
        let n = 5;
        let mut s = RngStream::new(55, 2);
        let q = crate::numerics::sym_eig(
            &{
                let a = s.gaussian_matrix(n, n);
                a.add(&a.transpose()).unwrap()
            },
        )
        .unwrap()
        .eigenvectors;
        let lambdas: Vec<f64> = (0..n)
            .map(|i| 1e-8_f64.powf(i as f64 / (n - 1) as f64))
            .collect();
        let m = {
            let d = Matrix::diag(&lambdas);
            q.matmul(&d).unwrap().matmul(&q.transpose()).unwrap()
        };
        let rhs = s.gaussian_matrix(n, 1);
        let sol = solve_spd(&m, &rhs).unwrap();
        let resid = m.matmul(&sol).unwrap().sub(&rhs).unwrap().frobenius_norm();
        assert!(
            resid <= 1e-8 * rhs.frobenius_norm(),
            "residual {resid} on condition-1e8 system"
        );
    }

    #[test]
    fn rejects_indefinite_naming_pivot() {
        let m = Matrix::diag(&[1.0, -3.0]);
        match solve_spd(&m, &Matrix::zeros(2, 1)) {
            Err(Error::NotPositiveDefinite { pivot, value }) => {
                assert_eq!(pivot, 1);
                assert!(value < 0.0);
            }
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }
}
