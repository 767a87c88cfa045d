//! Dense factorization helpers backing the tensor-train kernels.
//!
//! Wraps faer's QR/SVD behind ndarray in/out. A failed direct SVD falls back
//! to an eigendecomposition of the Gram matrix; the fallback is logged, and
//! only a failure of both paths is an error.

use faer::Mat;
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

fn to_faer(a: &Array2<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Thin QR: `a` (m x n) -> (Q: m x k, R: k x n), k = min(m, n).
pub fn thin_qr(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let qr = to_faer(a).qr();
    let q = qr.compute_thin_Q();
    let r = qr.thin_R();
    (from_faer(q.as_ref()), from_faer(r.as_ref()))
}

/// Thin SVD: `a` (m x n) -> (U: m x k, s: k, Vt: k x n) with singular values
/// descending. Falls back to the Gram-matrix route if the direct SVD fails.
pub fn thin_svd(a: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    let m = to_faer(a);
    match m.thin_svd() {
        Ok(svd) => {
            let k = svd.S().dim();
            let s = Array1::from_shape_fn(k, |i| svd.S()[i]);
            let u = from_faer(svd.U().as_ref());
            let v = from_faer(svd.V().as_ref());
            Ok((u, s, v.reversed_axes().as_standard_layout().to_owned()))
        }
        Err(e) => {
            log::warn!(
                "direct SVD failed on {}x{} matrix ({e:?}); falling back to Gram eigendecomposition",
                a.nrows(),
                a.ncols()
            );
            gram_svd(a).map_err(|inner| Error::Svd {
                rows: a.nrows(),
                cols: a.ncols(),
                detail: format!("direct: {e:?}; fallback: {inner}"),
            })
        }
    }
}

/// SVD via the eigendecomposition of the smaller Gram matrix. Less accurate
/// for tiny singular values (error ~ sqrt(machine eps) relative), which is
/// acceptable for a truncation fallback.
fn gram_svd(a: &Array2<f64>) -> std::result::Result<(Array2<f64>, Array1<f64>, Array2<f64>), String> {
    let (m, n) = a.dim();
    let k = m.min(n);
    let tall = m >= n;
    // Gram over the smaller side.
    let g = if tall { a.t().dot(a) } else { a.dot(&a.t()) };
    let evd = to_faer(&g)
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| format!("eigendecomposition failed: {e:?}"))?;
    // Ascending eigenvalues from faer; we want descending singular values.
    let dim = g.nrows();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| evd.S()[j].partial_cmp(&evd.S()[i]).unwrap());
    let mut s = Array1::zeros(k);
    let mut w = Array2::zeros((dim, k));
    for (col, &src) in order.iter().take(k).enumerate() {
        s[col] = evd.S()[src].max(0.0).sqrt();
        for r in 0..dim {
            w[[r, col]] = evd.U()[(r, src)];
        }
    }
    // Recover the other factor: A v = sigma u (tall) or A^T u = sigma v.
    let other = if tall { a.dot(&w) } else { a.t().dot(&w) };
    let mut u = Array2::zeros((m, k));
    let mut vt = Array2::zeros((k, n));
    for col in 0..k {
        let sigma = s[col];
        if tall {
            for r in 0..n {
                vt[[col, r]] = w[[r, col]];
            }
            for r in 0..m {
                u[[r, col]] = if sigma > 0.0 { other[[r, col]] / sigma } else { 0.0 };
            }
        } else {
            for r in 0..m {
                u[[r, col]] = w[[r, col]];
            }
            for r in 0..n {
                vt[[col, r]] = if sigma > 0.0 { other[[r, col]] / sigma } else { 0.0 };
            }
        }
    }
    Ok((u, s, vt))
}

/// Smallest kept rank so the discarded singular-value tail satisfies
/// sqrt(sum_{i>=r} s_i^2) <= delta; always keeps at least one column.
/// Returns (rank, discarded tail sum of squares).
pub fn truncation_rank(s: &Array1<f64>, delta: f64) -> (usize, f64) {
    let k = s.len();
    let budget = delta * delta;
    let mut tail = 0.0;
    let mut rank = k;
    // Walk from the smallest singular value up while the tail fits.
    for i in (1..k).rev() {
        let cand = tail + s[i] * s[i];
        if cand <= budget {
            tail = cand;
            rank = i;
        } else {
            break;
        }
    }
    // delta = 0: drop only exact zeros (handled above since cand = 0 passes).
    (rank.max(1), tail)
}
