//! Dense Cholesky and LDLᵀ factorizations plus the triangular solves built on
//! them. Matrices are small (K ≤ a handful for covariances, N* for inducing
//! Gram matrices), so everything here is the textbook right-looking variant.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter added once to the diagonal of a near-singular covariance.
pub const COVARIANCE_JITTER: f64 = 1e-6;

/// Lower Cholesky factor `L` with `L Lᵀ = a`. Only the lower triangle of `a`
/// is read.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.ncols(),
        });
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Cholesky with the covariance jitter policy: try as-is, then once with
/// `1e-6 · trace/K` added to the diagonal. Returns the factor and the jitter
/// that was applied.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    match cholesky(a) {
        Ok(l) => Ok((l, 0.0)),
        Err(first) => {
            let n = a.nrows().max(1);
            let jitter = COVARIANCE_JITTER * a.trace() / n as f64;
            if !(jitter > 0.0) {
                return Err(first);
            }
            let mut b = a.clone();
            for i in 0..a.nrows() {
                b[(i, i)] += jitter;
            }
            cholesky(&b).map(|l| (l, jitter))
        }
    }
}

/// `Σ = L · diag(d) · Lᵀ` with unit lower-triangular `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ldl {
    pub l: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl Ldl {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        compose_ldl(&self.l, self.d.as_slice())
    }
}

/// `L · diag(d) · Lᵀ` for any lower-triangular `l`.
pub fn compose_ldl(l: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let n = l.nrows();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..=j {
                s += l[(i, k)] * d[k] * l[(j, k)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    out
}

/// Root-free LDLᵀ factorization. Fails on the first non-positive pivot and
/// reports it.
pub fn ldl_decompose(a: &DMatrix<f64>) -> Result<Ldl> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.ncols(),
        });
    }
    let mut l = DMatrix::<f64>::identity(n, n);
    let mut d = DVector::<f64>::zeros(n);
    for j in 0..n {
        let mut dj = a[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if !(dj > 0.0) || !dj.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: dj });
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(Ldl { l, d })
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `L x = b` treating the diagonal of `L` as ones.
pub fn solve_unit_lower(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s;
    }
    x
}

/// Solves `Lᵀ x = b` treating the diagonal of `L` as ones.
pub fn solve_unit_lower_transpose(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s;
    }
    x
}

/// `ln det(L Lᵀ)` from a Cholesky factor.
pub fn log_det_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Symmetric within `rel_tol` of the largest absolute entry.
pub fn is_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for i in 0..a.nrows() {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

/// Nearest-SPD repair by eigenvalue clipping at `rel_floor · λ_max`.
pub fn clip_eigenvalues(a: &DMatrix<f64>, rel_floor: f64) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
    let floor = rel_floor * max;
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
