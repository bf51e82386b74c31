//! Dense least-squares kernels used by the regression.

use nalgebra::{DMatrix, DVector, SVD};

/// Minimum-norm least squares `argmin |A x - b|` via SVD with a relative
/// singular-value cutoff.
pub(crate) fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let p = a.ncols();
    if p == 0 {
        return DVector::zeros(0);
    }
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    if smax == 0.0 {
        return DVector::zeros(p);
    }
    let cutoff = smax * f64::EPSILON * a.nrows().max(p) as f64;
    let u = svd.u.as_ref().expect("u computed");
    let v_t = svd.v_t.as_ref().expect("v_t computed");
    let utb = u.transpose() * b;
    let mut x = DVector::zeros(p);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            x += v_t.row(i).transpose() * (utb[i] / s);
        }
    }
    x
}

/// Row space / null space split of a constraint matrix.
pub(crate) struct ConstraintBasis {
    /// `V_r Sigma_r^{-1} U_r^T`: maps `h` to the minimum-norm particular solution.
    pub pinv: DMatrix<f64>,
    /// Orthonormal basis of the null space, `p x (p - rank)`.
    pub null: DMatrix<f64>,
    pub rank: usize,
}

/// Relative rank cutoff for constraint matrices, and an absolute floor
/// below which a constraint is treated as vacuous.
const RANK_RTOL: f64 = 1e-10;
const RANK_ATOL: f64 = 1e-13;

pub(crate) fn constraint_basis(c: &DMatrix<f64>) -> ConstraintBasis {
    let (q, p) = c.shape();
    // pad to at least p rows so the SVD returns a full p x p V
    let padded = if q < p {
        let mut m = DMatrix::zeros(p, p);
        m.rows_mut(0, q).copy_from(c);
        m
    } else {
        c.clone()
    };
    let svd = SVD::new(padded, true, true);
    let u = svd.u.as_ref().expect("u computed");
    let v_t = svd.v_t.as_ref().expect("v_t computed");
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let cutoff = (smax * RANK_RTOL).max(RANK_ATOL);
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > cutoff).collect();
    let rank = keep.len();
    let mut pinv = DMatrix::zeros(p, q);
    for &i in &keep {
        let s = svd.singular_values[i];
        let vi = v_t.row(i).transpose();
        let ui = u.column(i).rows(0, q).into_owned();
        pinv += vi * ui.transpose() / s;
    }
    let null_idx: Vec<usize> = (0..p).filter(|i| !keep.contains(i)).collect();
    let mut null = DMatrix::zeros(p, null_idx.len());
    for (c, &i) in null_idx.iter().enumerate() {
        null.set_column(c, &v_t.row(i).transpose());
    }
    ConstraintBasis { pinv, null, rank }
}

/// `argmin |A x - b|` subject to `C x = h`, by null-space elimination:
/// `x = x_p + Z w` with `x_p = C^+ h`, `Z` spanning `ker C`.
pub(crate) fn eq_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, c: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
    if c.nrows() == 0 || a.ncols() == 0 {
        return lstsq(a, b);
    }
    let basis = constraint_basis(c);
    if basis.rank == 0 {
        return lstsq(a, b);
    }
    let xp = &basis.pinv * h;
    if basis.null.ncols() == 0 {
        return xp;
    }
    let az = a * &basis.null;
    let w = lstsq(&az, &(b - a * &xp));
    xp + &basis.null * w
}

/// Copies the listed columns of `m`.
pub(crate) fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}
