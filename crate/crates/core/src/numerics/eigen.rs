//! Symmetric eigendecomposition: Householder tridiagonalization followed by
//! the implicitly shifted QL iteration (the classic EISPACK `tred2`/`tql2`
//! pair). Matrix sizes here stay at a few hundred, which this handles with
//! plenty of accuracy headroom for the reconstruction bounds asserted in
//! tests.

use super::matrix::Matrix;
use super::SYMMETRY_TOL;
use crate::error::{Error, Result};

const MAX_QL_ITERS: usize = 64;

/// Eigendecomposition of a symmetric matrix: `V diag(λ) V^T` with
/// eigenvalues ascending and orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Columns are the eigenvectors, ordered like `eigenvalues`.
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// `V diag(λ) V^T`, for reconstruction checks.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (k, &lam) in self.eigenvalues.iter().enumerate() {
                    acc += self.eigenvectors.get(i, k) * lam * self.eigenvectors.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// Applies `f` to each eigenvalue and reassembles `V diag(f(λ)) V^T`.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mapped = SymEig {
            eigenvalues: self.eigenvalues.iter().map(|&l| f(l)).collect(),
            eigenvectors: self.eigenvectors.clone(),
        };
        mapped.reconstruct()
    }

    /// `V^T v`, the coefficients of `v` in the eigenbasis.
    pub fn to_eigenbasis(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.eigenvectors.transpose().matvec(v)
    }

    /// `V c`, back from eigenbasis coefficients.
    pub fn from_eigenbasis(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.eigenvectors.matvec(c)
    }
}

fn validate_symmetric(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let gap = m.asymmetry();
    if gap > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            gap,
            tol: SYMMETRY_TOL,
        });
    }
    Ok(m.symmetrized())
}

/// Full eigendecomposition of a symmetric matrix. Inputs asymmetric beyond
/// [`SYMMETRY_TOL`] (relative to the largest entry) are rejected; anything
/// within tolerance is symmetrized first.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    let sym = validate_symmetric(m)?;
    let n = sym.rows();
    if n == 0 {
        return Err(Error::InvalidConfig("eigendecomposition of empty matrix".into()));
    }
    let mut v = sym;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;
    Ok(SymEig {
        eigenvalues: d,
        eigenvectors: v,
    })
}

/// Least eigenvalue of a symmetric matrix (λ_min).
pub fn least_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(sym_eig(m)?.eigenvalues[0])
}

/// Householder reduction to tridiagonal form, accumulating the orthogonal
/// transform in `v`.
fn tred2(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v.get(n - 1, j);
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v.get(i - 1, j);
                v.set(i, j, 0.0);
                v.set(j, i, 0.0);
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for item in e.iter_mut().take(i) {
                *item = 0.0;
            }

            for j in 0..i {
                let f = d[j];
                v.set(j, i, f);
                let mut g = e[j] + v.get(j, j) * f;
                for k in (j + 1)..i {
                    g += v.get(k, j) * d[k];
                    e[k] += v.get(k, j) * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    let upd = v.get(k, j) - (f * e[k] + g * d[k]);
                    v.set(k, j, upd);
                }
                d[j] = v.get(i - 1, j);
                v.set(i, j, 0.0);
            }
        }
        d[i] = h;
    }

    // Accumulate transformations.
    for i in 0..n.saturating_sub(1) {
        v.set(n - 1, i, v.get(i, i));
        v.set(i, i, 1.0);
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v.get(k, i + 1) / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v.get(k, i + 1) * v.get(k, j);
                }
                for k in 0..=i {
                    let upd = v.get(k, j) - g * d[k];
                    v.set(k, j, upd);
                }
            }
        }
        for k in 0..=i {
            v.set(k, i + 1, 0.0);
        }
    }
    for j in 0..n {
        d[j] = v.get(n - 1, j);
        v.set(n - 1, j, 0.0);
    }
    v.set(n - 1, n - 1, 1.0);
    e[0] = 0.0;
}

/// Implicitly shifted QL on the tridiagonal form, then an ascending sort of
/// eigenpairs.
fn tql2(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0_f64;
    let mut tst1 = 0.0_f64;
    let eps = 2.0_f64.powi(-52);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERS {
                    return Err(Error::NonFinite("QL iteration failed to converge"));
                }

                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0_f64;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0_f64;
                let mut s2 = 0.0_f64;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);

                    for k in 0..n {
                        h = v.get(k, i + 1);
                        v.set(k, i + 1, s * v.get(k, i) + c * h);
                        v.set(k, i, c * v.get(k, i) - s * h);
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;

                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }

    // Selection sort into ascending order, swapping eigenvector columns along.
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for j in (i + 1)..n {
            if d[j] < p {
                k = j;
                p = d[j];
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for j in 0..n {
                let tmp = v.get(j, i);
                v.set(j, i, v.get(j, k));
                v.set(j, k, tmp);
            }
        }
    }
    Ok(())
}
