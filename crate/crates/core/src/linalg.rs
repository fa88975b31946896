//! Dense symmetric positive-definite helpers that lean on matrix products,
//! which are much faster than the column-by-column triangular solves for the
//! sizes met in kernel fits.

use nalgebra::{DMatrix, DMatrixView};

/// Inverse of a lower-triangular matrix by block recursion.
fn lower_inverse(l: DMatrixView<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= 64 {
        let mut inv = DMatrix::zeros(n, n);
        for j in 0..n {
            inv[(j, j)] = 1.0 / l[(j, j)];
            for i in j + 1..n {
                let mut s = 0.0;
                for k in j..i {
                    s += l[(i, k)] * inv[(k, j)];
                }
                inv[(i, j)] = -s / l[(i, i)];
            }
        }
        return inv;
    }
    let h = n / 2;
    let a = lower_inverse(l.view((0, 0), (h, h)));
    let c = lower_inverse(l.view((h, h), (n - h, n - h)));
    let b = -(&c * l.view((h, 0), (n - h, h)) * &a);
    let mut inv = DMatrix::zeros(n, n);
    inv.view_mut((0, 0), (h, h)).copy_from(&a);
    inv.view_mut((h, h), (n - h, n - h)).copy_from(&c);
    inv.view_mut((h, 0), (n - h, h)).copy_from(&b);
    inv
}

/// Inverse and log-determinant of a symmetric positive-definite matrix, or
/// `None` when the Cholesky factorization fails.
pub(crate) fn spd_inverse(v: DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = v.cholesky()?;
    let l = chol.l_dirty();
    let n = l.nrows();
    let mut logdet = 0.0;
    for i in 0..n {
        logdet += 2.0 * l[(i, i)].ln();
    }
    // the strict upper part of l_dirty holds garbage; lower_inverse never reads it
    let li = lower_inverse(l.as_view());
    let inv = li.transpose() * li;
    Some((inv, logdet))
}
