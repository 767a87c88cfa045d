//! Tensor-train (TT) vectors and operators.
//!
//! A TT vector stores a d-way tensor as a chain of 3-way cores
//! G_k(r_{k-1}, n_k, r_k) with boundary ranks 1; an element is the chained
//! matrix product G_1[i_1] G_2[i_2] ... G_d[i_d]. Storage is linear in the
//! mode sizes for fixed ranks, which is what makes the 4D kinetic solver
//! affordable. Operators (matrices in TT form) live in [`operator`], the
//! rank-adaptive approximate matvec in [`amen`].

pub mod amen;
pub mod linalg;
pub mod operator;
pub mod snapshot;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayViewD, Axis};

use crate::error::{Error, Result};

pub use amen::{amen_apply, AmenOptions};
pub use operator::{CoreSlice, OperatorCore, TtOperator};

/// Result metadata of a truncation or an adaptive apply.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundingReport {
    pub requested_eps: f64,
    /// Relative Frobenius error estimate of the operation.
    pub achieved_rel_error: f64,
    /// Bond ranks including the boundary 1s (length d+1).
    pub ranks: Vec<usize>,
    pub sweeps_used: usize,
    /// False when an iterative scheme hit its sweep limit without meeting eps.
    pub converged: bool,
}

/// Tensor-train vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TtVector {
    cores: Vec<Array3<f64>>,
}

impl TtVector {
    /// Builds from cores, validating boundary ranks and bond consistency.
    pub fn new(cores: Vec<Array3<f64>>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Tt("TT vector needs at least one core".into()));
        }
        if cores[0].dim().0 != 1 {
            return Err(Error::Tt(format!(
                "first core must have left rank 1, got {}",
                cores[0].dim().0
            )));
        }
        if cores[cores.len() - 1].dim().2 != 1 {
            return Err(Error::Tt(format!(
                "last core must have right rank 1, got {}",
                cores[cores.len() - 1].dim().2
            )));
        }
        for k in 0..cores.len() {
            let (r0, n, r1) = cores[k].dim();
            if r0 == 0 || n == 0 || r1 == 0 {
                return Err(Error::Tt(format!("core {k} has a zero dimension")));
            }
            if k + 1 < cores.len() && r1 != cores[k + 1].dim().0 {
                return Err(Error::Tt(format!(
                    "bond mismatch between cores {k} and {}: {} vs {}",
                    k + 1,
                    r1,
                    cores[k + 1].dim().0
                )));
            }
        }
        Ok(TtVector { cores })
    }

    pub fn d(&self) -> usize {
        self.cores.len()
    }

    pub fn cores(&self) -> &[Array3<f64>] {
        &self.cores
    }

    pub fn core(&self, k: usize) -> &Array3<f64> {
        &self.cores[k]
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.dim().1).collect()
    }

    /// Bond ranks [1, r_1, ..., r_{d-1}, 1].
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = Vec::with_capacity(self.d() + 1);
        r.push(1);
        for c in &self.cores {
            r.push(c.dim().2);
        }
        r
    }

    /// Total stored elements across cores.
    pub fn cell_count(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }

    /// Single element by chained core products.
    pub fn element(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.d());
        let first = &self.cores[0];
        let mut row: Array1<f64> = first.index_axis(Axis(1), idx[0]).row(0).to_owned();
        for (k, &i) in idx.iter().enumerate().skip(1) {
            let mat = self.cores[k].index_axis(Axis(1), i);
            row = row.dot(&mat);
        }
        debug_assert_eq!(row.len(), 1);
        row[0]
    }

    /// Multiplies the tensor by a scalar (applied to the first core).
    pub fn scale(&mut self, a: f64) {
        self.cores[0].mapv_inplace(|x| a * x);
    }

    /// TT-SVD of a dense tensor with relative Frobenius tolerance `eps`,
    /// distributed as eps/sqrt(d-1) per unfolding.
    pub fn from_dense(x: ArrayViewD<'_, f64>, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::Tt(format!("eps must be >= 0, got {eps}")));
        }
        let d = x.ndim();
        if d == 0 {
            return Err(Error::Tt("cannot decompose a 0-way tensor".into()));
        }
        let sizes: Vec<usize> = x.shape().to_vec();
        let total: usize = sizes.iter().product();
        if total == 0 {
            return Err(Error::Tt("cannot decompose a tensor with empty modes".into()));
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let delta = if d > 1 {
            eps * norm / ((d - 1) as f64).sqrt()
        } else {
            0.0
        };
        let flat = x.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
        let mut w = Array2::from_shape_vec((sizes[0], total / sizes[0]), flat)
            .expect("row-major reshape");
        let mut cores: Vec<Array3<f64>> = Vec::with_capacity(d);
        let mut r_prev = 1usize;
        for k in 0..d - 1 {
            // w rows: (r_prev * n_k), cols: remaining modes.
            let (u, s, vt) = linalg::thin_svd(&w)?;
            let (rank, _) = linalg::truncation_rank(&s, delta);
            let u_r = u.slice(ndarray::s![.., ..rank]).to_owned();
            cores.push(
                u_r.into_shape_with_order((r_prev, sizes[k], rank))
                    .expect("core reshape"),
            );
            // Carry S * Vt into the next unfolding.
            let mut sv = vt.slice(ndarray::s![..rank, ..]).to_owned();
            for (i, mut srow) in sv.outer_iter_mut().enumerate() {
                srow.mapv_inplace(|v| v * s[i]);
            }
            let rest: usize = sizes[k + 1..].iter().product();
            let next_cols = rest / sizes[k + 1];
            w = sv
                .into_shape_with_order((rank * sizes[k + 1], next_cols))
                .expect("unfolding reshape");
            r_prev = rank;
        }
        cores.push(
            w.into_shape_with_order((r_prev, sizes[d - 1], 1))
                .expect("last core reshape"),
        );
        TtVector::new(cores)
    }

    /// Contracts the chain back to a dense tensor.
    pub fn to_dense(&self) -> ArrayD<f64> {
        let sizes = self.mode_sizes();
        let mut acc: Array2<f64> = {
            let (_, n, r) = self.cores[0].dim();
            self.cores[0]
                .clone()
                .into_shape_with_order((n, r))
                .expect("first core unfold")
        };
        for core in &self.cores[1..] {
            let (r0, n, r1) = core.dim();
            let rows = acc.nrows();
            let mat = core
                .clone()
                .into_shape_with_order((r0, n * r1))
                .expect("core unfold");
            acc = acc
                .dot(&mat)
                .into_shape_with_order((rows * n, r1))
                .expect("accumulator reshape");
        }
        acc.into_shape_with_order(ndarray::IxDyn(&sizes))
            .expect("dense reshape")
    }

    /// Frobenius inner product of two TT vectors via the transfer-matrix
    /// chain; exact up to floating point, no rank growth.
    pub fn dot(&self, other: &TtVector) -> Result<f64> {
        if self.mode_sizes() != other.mode_sizes() {
            return Err(Error::Tt(format!(
                "dot: mode sizes differ: {:?} vs {:?}",
                self.mode_sizes(),
                other.mode_sizes()
            )));
        }
        // m[alpha, beta] accumulates the contraction of the first k cores.
        let (_, n0, rx) = self.cores[0].dim();
        let (_, _, ry) = other.cores[0].dim();
        let x0 = self.cores[0]
            .clone()
            .into_shape_with_order((n0, rx))
            .expect("unfold");
        let y0 = other.cores[0]
            .clone()
            .into_shape_with_order((n0, ry))
            .expect("unfold");
        let mut m = x0.t().dot(&y0);
        for k in 1..self.d() {
            let xc = &self.cores[k];
            let yc = &other.cores[k];
            let (rx0, n, rx1) = xc.dim();
            let (ry0, _, ry1) = yc.dim();
            let ymat = yc
                .clone()
                .into_shape_with_order((ry0, n * ry1))
                .expect("unfold");
            // t[alpha, i, beta'] = sum_beta m[alpha, beta] y[beta, i, beta']
            let t = m
                .dot(&ymat)
                .into_shape_with_order((rx0 * n, ry1))
                .expect("reshape");
            let xmat = xc
                .clone()
                .into_shape_with_order((rx0 * n, rx1))
                .expect("unfold");
            m = xmat.t().dot(&t);
        }
        debug_assert_eq!(m.dim(), (1, 1));
        Ok(m[[0, 0]])
    }

    /// Frobenius norm (via self inner product, clamped at zero).
    pub fn norm(&self) -> f64 {
        self.dot(self).expect("self dot").max(0.0).sqrt()
    }

    /// a*x + y by core concatenation; ranks add. a = 0 returns y unchanged.
    pub fn axpy(a: f64, x: &TtVector, y: &TtVector) -> Result<TtVector> {
        if x.mode_sizes() != y.mode_sizes() {
            return Err(Error::Tt(format!(
                "axpy: mode sizes differ: {:?} vs {:?}",
                x.mode_sizes(),
                y.mode_sizes()
            )));
        }
        if a == 0.0 {
            return Ok(y.clone());
        }
        let d = x.d();
        if d == 1 {
            let mut c = y.cores[0].clone();
            c.scaled_add(a, &x.cores[0]);
            return TtVector::new(vec![c]);
        }
        let mut cores = Vec::with_capacity(d);
        for k in 0..d {
            let xc = &x.cores[k];
            let yc = &y.cores[k];
            let (rx0, n, rx1) = xc.dim();
            let (ry0, _, ry1) = yc.dim();
            let core = if k == 0 {
                // [a*x | y] along the right bond.
                let mut c = Array3::zeros((1, n, rx1 + ry1));
                c.slice_mut(ndarray::s![.., .., ..rx1])
                    .assign(&xc.mapv(|v| a * v));
                c.slice_mut(ndarray::s![.., .., rx1..]).assign(yc);
                c
            } else if k == d - 1 {
                let mut c = Array3::zeros((rx0 + ry0, n, 1));
                c.slice_mut(ndarray::s![..rx0, .., ..]).assign(xc);
                c.slice_mut(ndarray::s![rx0.., .., ..]).assign(yc);
                c
            } else {
                let mut c = Array3::zeros((rx0 + ry0, n, rx1 + ry1));
                c.slice_mut(ndarray::s![..rx0, .., ..rx1]).assign(xc);
                c.slice_mut(ndarray::s![rx0.., .., rx1..]).assign(yc);
                c
            };
            cores.push(core);
        }
        TtVector::new(cores)
    }

    /// Right-orthogonalizes cores d-1..1 in place (QR sweeps); afterwards the
    /// whole tensor norm equals the Frobenius norm of core 0. Ranks can only
    /// shrink. Returns the norm.
    pub fn orthogonalize_right(&mut self) -> f64 {
        for k in (1..self.d()).rev() {
            let (r0, n, r1) = self.cores[k].dim();
            // QR of the transposed right unfolding makes the rows of the new
            // core orthonormal.
            let mat = self.cores[k]
                .clone()
                .into_shape_with_order((r0, n * r1))
                .expect("unfold");
            let at = mat.t().as_standard_layout().to_owned();
            let (q, r) = linalg::thin_qr(&at);
            let r_new = q.ncols();
            let qt = q.t().as_standard_layout().to_owned();
            self.cores[k] = qt
                .into_shape_with_order((r_new, n, r1))
                .expect("core reshape");
            // Absorb R^T into the previous core's right bond.
            let prev = &self.cores[k - 1];
            let (p0, pn, _) = prev.dim();
            let pmat = prev
                .clone()
                .into_shape_with_order((p0 * pn, r0))
                .expect("unfold");
            let rt = r.t().as_standard_layout().to_owned();
            self.cores[k - 1] = pmat
                .dot(&rt)
                .into_shape_with_order((p0, pn, r_new))
                .expect("core reshape");
        }
        self.cores[0].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// SVD rounding to relative tolerance `eps`: one right-orthogonalization
    /// sweep, then a left-to-right truncation sweep with per-bond budget
    /// eps*|x|/sqrt(d-1). Ranks never increase; eps = 0 only removes bonds
    /// whose trailing singular values are exactly zero.
    pub fn round(&self, eps: f64) -> Result<(TtVector, RoundingReport)> {
        if !(eps >= 0.0) {
            return Err(Error::Tt(format!("eps must be >= 0, got {eps}")));
        }
        let mut out = self.clone();
        let norm = out.orthogonalize_right();
        let d = out.d();
        if d == 1 || norm == 0.0 {
            let report = RoundingReport {
                requested_eps: eps,
                achieved_rel_error: 0.0,
                ranks: out.ranks(),
                sweeps_used: 1,
                converged: true,
            };
            return Ok((out, report));
        }
        let delta = eps * norm / ((d - 1) as f64).sqrt();
        let mut discarded_sq = 0.0;
        for k in 0..d - 1 {
            let (r0, n, r1) = out.cores[k].dim();
            let mat = out.cores[k]
                .clone()
                .into_shape_with_order((r0 * n, r1))
                .expect("unfold");
            let (u, s, vt) = linalg::thin_svd(&mat)?;
            let (rank, tail) = linalg::truncation_rank(&s, delta);
            discarded_sq += tail;
            let u_r = u.slice(ndarray::s![.., ..rank]).to_owned();
            out.cores[k] = u_r
                .into_shape_with_order((r0, n, rank))
                .expect("core reshape");
            let mut sv = vt.slice(ndarray::s![..rank, ..]).to_owned();
            for (i, mut row) in sv.outer_iter_mut().enumerate() {
                row.mapv_inplace(|v| v * s[i]);
            }
            let next = &out.cores[k + 1];
            let (_, nn, nr) = next.dim();
            let nmat = next
                .clone()
                .into_shape_with_order((r1, nn * nr))
                .expect("unfold");
            out.cores[k + 1] = sv
                .dot(&nmat)
                .into_shape_with_order((rank, nn, nr))
                .expect("core reshape");
        }
        let report = RoundingReport {
            requested_eps: eps,
            achieved_rel_error: discarded_sq.sqrt() / norm,
            ranks: out.ranks(),
            sweeps_used: 1,
            converged: true,
        };
        Ok((out, report))
    }
}
