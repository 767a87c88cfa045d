//! Matrix operators in tensor-train form.
//!
//! An operator core is a 4-way array A_k(r_{k-1}, n_k, m_k, r_k) stored as a
//! grid of (left, right) rank slices, each an n_k x m_k matrix. Slices carry
//! structure (identity, diagonal, permutation, rank-one, dense) so the huge
//! fused-space cores of the convection propagators stay O(n) instead of
//! O(n^2). The exact matvec multiplies ranks elementwise; the rank-adaptive
//! one lives in [`super::amen`].

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

use super::TtVector;

/// One (left-rank, right-rank) block of an operator core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreSlice {
    Zero,
    /// scale * I (square cores only).
    Identity { scale: f64 },
    /// diag(d).
    Diagonal(Array1<f64>),
    /// scale * P with P[i, perm[i]] = 1: out[i] = scale * x[perm[i]].
    Permutation { perm: Vec<u32>, scale: f64 },
    /// scale * col * row^T.
    RankOne {
        col: Array1<f64>,
        row: Array1<f64>,
        scale: f64,
    },
    Dense(Array2<f64>),
}

impl CoreSlice {
    /// out += S * x, with x of shape (cols, p) and out of shape (rows, p).
    pub fn apply_acc(&self, x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        match self {
            CoreSlice::Zero => {}
            CoreSlice::Identity { scale } => out.scaled_add(*scale, &x),
            CoreSlice::Diagonal(d) => {
                for (i, mut row) in out.outer_iter_mut().enumerate() {
                    row.scaled_add(d[i], &x.row(i));
                }
            }
            CoreSlice::Permutation { perm, scale } => {
                for (i, mut row) in out.outer_iter_mut().enumerate() {
                    row.scaled_add(*scale, &x.row(perm[i] as usize));
                }
            }
            CoreSlice::RankOne { col, row, scale } => {
                let t = row.dot(&x); // (p,)
                for (i, mut orow) in out.outer_iter_mut().enumerate() {
                    orow.scaled_add(*scale * col[i], &t);
                }
            }
            CoreSlice::Dense(a) => general_mat_mul(1.0, a, &x, 1.0, &mut out),
        }
    }

    /// Dense n x m matrix of this slice (tests and small operators).
    pub fn materialize(&self, rows: usize, cols: usize) -> Array2<f64> {
        let mut m = Array2::zeros((rows, cols));
        match self {
            CoreSlice::Zero => {}
            CoreSlice::Identity { scale } => {
                assert_eq!(rows, cols);
                for i in 0..rows {
                    m[[i, i]] = *scale;
                }
            }
            CoreSlice::Diagonal(d) => {
                assert_eq!(rows, cols);
                for i in 0..rows {
                    m[[i, i]] = d[i];
                }
            }
            CoreSlice::Permutation { perm, scale } => {
                for i in 0..rows {
                    m[[i, perm[i] as usize]] = *scale;
                }
            }
            CoreSlice::RankOne { col, row, scale } => {
                for i in 0..rows {
                    for j in 0..cols {
                        m[[i, j]] = *scale * col[i] * row[j];
                    }
                }
            }
            CoreSlice::Dense(a) => m.assign(a),
        }
        m
    }

    fn check_dims(&self, rows: usize, cols: usize) -> Result<()> {
        let ok = match self {
            CoreSlice::Zero => true,
            CoreSlice::Identity { .. } => rows == cols,
            CoreSlice::Diagonal(d) => rows == cols && d.len() == rows,
            CoreSlice::Permutation { perm, .. } => {
                perm.len() == rows && perm.iter().all(|&p| (p as usize) < cols)
            }
            CoreSlice::RankOne { col, row, .. } => col.len() == rows && row.len() == cols,
            CoreSlice::Dense(a) => a.dim() == (rows, cols),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Tt(format!(
                "core slice incompatible with {rows}x{cols} block"
            )))
        }
    }
}

/// Operator core: (left_rank x right_rank) grid of n x m slices.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorCore {
    pub left_rank: usize,
    pub rows: usize,
    pub cols: usize,
    pub right_rank: usize,
    /// Row-major (left, right) slice grid: index a * right_rank + b.
    pub slices: Vec<CoreSlice>,
}

impl OperatorCore {
    pub fn new(
        left_rank: usize,
        rows: usize,
        cols: usize,
        right_rank: usize,
        slices: Vec<CoreSlice>,
    ) -> Result<Self> {
        if slices.len() != left_rank * right_rank {
            return Err(Error::Tt(format!(
                "operator core needs {} slices, got {}",
                left_rank * right_rank,
                slices.len()
            )));
        }
        for s in &slices {
            s.check_dims(rows, cols)?;
        }
        Ok(OperatorCore {
            left_rank,
            rows,
            cols,
            right_rank,
            slices,
        })
    }

    /// Diagonal rank-1 core wrapping a single slice.
    pub fn single(rows: usize, cols: usize, slice: CoreSlice) -> Result<Self> {
        OperatorCore::new(1, rows, cols, 1, vec![slice])
    }

    pub fn slice(&self, a: usize, b: usize) -> &CoreSlice {
        &self.slices[a * self.right_rank + b]
    }

    /// Contraction over (j, a): given t laid out per left-rank block as
    /// (left_rank, cols, p), accumulate into out (right_rank, rows, p):
    /// out[b, i, :] += sum_{a, j} A[a, i, j, b] t[a, j, :].
    pub fn contract_in(&self, t: &Array3<f64>, out: &mut Array3<f64>) {
        debug_assert_eq!(t.dim().0, self.left_rank);
        debug_assert_eq!(t.dim().1, self.cols);
        debug_assert_eq!(out.dim().0, self.right_rank);
        debug_assert_eq!(out.dim().1, self.rows);
        for a in 0..self.left_rank {
            let tin = t.index_axis(ndarray::Axis(0), a);
            for b in 0..self.right_rank {
                let slice = self.slice(a, b);
                if matches!(slice, CoreSlice::Zero) {
                    continue;
                }
                let o = out.index_axis_mut(ndarray::Axis(0), b);
                slice.apply_acc(tin, o);
            }
        }
    }

    /// Mirror contraction over (j, b): given t as (right_rank, cols, p),
    /// accumulate into out (left_rank, rows, p):
    /// out[a, i, :] += sum_{b, j} A[a, i, j, b] t[b, j, :].
    pub fn contract_out(&self, t: &Array3<f64>, out: &mut Array3<f64>) {
        debug_assert_eq!(t.dim().0, self.right_rank);
        debug_assert_eq!(t.dim().1, self.cols);
        debug_assert_eq!(out.dim().0, self.left_rank);
        debug_assert_eq!(out.dim().1, self.rows);
        for b in 0..self.right_rank {
            let tin = t.index_axis(ndarray::Axis(0), b);
            for a in 0..self.left_rank {
                let slice = self.slice(a, b);
                if matches!(slice, CoreSlice::Zero) {
                    continue;
                }
                let o = out.index_axis_mut(ndarray::Axis(0), a);
                slice.apply_acc(tin, o);
            }
        }
    }
}

/// Tensor-train operator (matrix product operator).
#[derive(Debug, Clone, PartialEq)]
pub struct TtOperator {
    cores: Vec<OperatorCore>,
}

impl TtOperator {
    pub fn new(cores: Vec<OperatorCore>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Tt("TT operator needs at least one core".into()));
        }
        if cores[0].left_rank != 1 || cores[cores.len() - 1].right_rank != 1 {
            return Err(Error::Tt("TT operator boundary ranks must be 1".into()));
        }
        for k in 0..cores.len() - 1 {
            if cores[k].right_rank != cores[k + 1].left_rank {
                return Err(Error::Tt(format!(
                    "operator bond mismatch between cores {k} and {}",
                    k + 1
                )));
            }
        }
        Ok(TtOperator { cores })
    }

    /// Identity operator for the given mode sizes.
    pub fn identity(mode_sizes: &[usize]) -> Self {
        let cores = mode_sizes
            .iter()
            .map(|&n| OperatorCore::single(n, n, CoreSlice::Identity { scale: 1.0 }).unwrap())
            .collect();
        TtOperator { cores }
    }

    /// Builds from dense 4-way slice grids (tests / small operators).
    pub fn from_dense_cores(cores: Vec<ndarray::Array4<f64>>) -> Result<Self> {
        let mut out = Vec::with_capacity(cores.len());
        for c in cores {
            let (r0, n, m, r1) = c.dim();
            let mut slices = Vec::with_capacity(r0 * r1);
            for a in 0..r0 {
                for b in 0..r1 {
                    let mut s = Array2::zeros((n, m));
                    for i in 0..n {
                        for j in 0..m {
                            s[[i, j]] = c[[a, i, j, b]];
                        }
                    }
                    slices.push(CoreSlice::Dense(s));
                }
            }
            out.push(OperatorCore::new(r0, n, m, r1, slices)?);
        }
        TtOperator::new(out)
    }

    pub fn d(&self) -> usize {
        self.cores.len()
    }

    pub fn cores(&self) -> &[OperatorCore] {
        &self.cores
    }

    pub fn core(&self, k: usize) -> &OperatorCore {
        &self.cores[k]
    }

    pub fn row_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.rows).collect()
    }

    pub fn col_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.cols).collect()
    }

    /// Bond ranks [1, r_1, ..., 1].
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![1];
        for c in &self.cores {
            r.push(c.right_rank);
        }
        r
    }

    /// Exact matvec y = A x: result ranks are the elementwise products
    /// r(A)_k * r(x)_k. No truncation.
    pub fn apply_exact(&self, x: &TtVector) -> Result<TtVector> {
        if self.col_sizes() != x.mode_sizes() {
            return Err(Error::Tt(format!(
                "apply: operator columns {:?} do not match vector modes {:?}",
                self.col_sizes(),
                x.mode_sizes()
            )));
        }
        let mut cores = Vec::with_capacity(self.d());
        for (ac, xc) in self.cores.iter().zip(x.cores().iter()) {
            let (rx0, m, rx1) = xc.dim();
            debug_assert_eq!(m, ac.cols);
            let ra0 = ac.left_rank;
            let ra1 = ac.right_rank;
            let n = ac.rows;
            // x core as (m, rx0 * rx1) matrix: rows indexed by the mode.
            let xmat = xc
                .clone()
                .permuted_axes([1, 0, 2])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((m, rx0 * rx1))
                .expect("x unfold");
            // y[(a, alpha), i, (b, beta)]: A-rank major composite bonds.
            let mut y = Array3::zeros((ra0 * rx0, n, ra1 * rx1));
            let mut buf = Array2::zeros((n, rx0 * rx1));
            for a in 0..ra0 {
                for b in 0..ra1 {
                    let slice = ac.slice(a, b);
                    if matches!(slice, CoreSlice::Zero) {
                        continue;
                    }
                    buf.fill(0.0);
                    slice.apply_acc(xmat.view(), buf.view_mut());
                    // Scatter buf (n, rx0*rx1) into the (a, b) block.
                    for alpha in 0..rx0 {
                        for beta in 0..rx1 {
                            let col = alpha * rx1 + beta;
                            for i in 0..n {
                                y[[a * rx0 + alpha, i, b * rx1 + beta]] += buf[[i, col]];
                            }
                        }
                    }
                }
            }
            cores.push(y);
        }
        TtVector::new(cores)
    }

    /// Dense matrix with row/column multi-indices flattened in row-major
    /// (first mode slowest) order, matching `TtVector::to_dense`.
    pub fn to_dense_matrix(&self) -> Array2<f64> {
        let mut acc: Array3<f64> = Array3::ones((1, 1, 1));
        for core in &self.cores {
            let (rows, cols, _) = acc.dim();
            let n = core.rows;
            let m = core.cols;
            let mut next = Array3::zeros((rows * n, cols * m, core.right_rank));
            for a in 0..core.left_rank {
                for b in 0..core.right_rank {
                    let s = core.slice(a, b);
                    if matches!(s, CoreSlice::Zero) {
                        continue;
                    }
                    let sm = s.materialize(n, m);
                    for big_i in 0..rows {
                        for big_j in 0..cols {
                            let w = acc[[big_i, big_j, a]];
                            if w == 0.0 {
                                continue;
                            }
                            for i in 0..n {
                                for j in 0..m {
                                    next[[big_i * n + i, big_j * m + j, b]] += w * sm[[i, j]];
                                }
                            }
                        }
                    }
                }
            }
            acc = next;
        }
        let (r, c, _) = acc.dim();
        acc.index_axis_move(ndarray::Axis(2), 0)
            .into_shape_with_order((r, c))
            .expect("flatten")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tt::TtVector;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array4, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tt(shape: &[usize], ranks: &[usize], seed: u64) -> TtVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.len();
        let mut cores = Vec::new();
        for k in 0..d {
            let r0 = if k == 0 { 1 } else { ranks[k - 1] };
            let r1 = if k == d - 1 { 1 } else { ranks[k] };
            cores.push(Array3::from_shape_fn((r0, shape[k], r1), |_| {
                rng.gen_range(-1.0..1.0)
            }));
        }
        TtVector::new(cores).unwrap()
    }

    fn random_mpo(shape: &[usize], ranks: &[usize], seed: u64) -> TtOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.len();
        let mut cores = Vec::new();
        for k in 0..d {
            let r0 = if k == 0 { 1 } else { ranks[k - 1] };
            let r1 = if k == d - 1 { 1 } else { ranks[k] };
            cores.push(Array4::from_shape_fn(
                (r0, shape[k], shape[k], r1),
                |_| rng.gen_range(-1.0..1.0),
            ));
        }
        TtOperator::from_dense_cores(cores).unwrap()
    }

    fn flatten(x: &ArrayD<f64>) -> Vec<f64> {
        x.as_standard_layout().iter().copied().collect()
    }

    #[test]
    fn identity_apply_is_exact() {
        let x = random_tt(&[4, 5, 3], &[2, 3], 5);
        let id = TtOperator::identity(&[4, 5, 3]);
        let y = id.apply_exact(&x).unwrap();
        assert_eq!(y.ranks(), x.ranks());
        let err: f64 = y
            .to_dense()
            .iter()
            .zip(x.to_dense().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(err.sqrt() < 1e-13 * x.norm());
    }

    #[test]
    fn apply_matches_dense_matvec() {
        let shape = [3usize, 4, 2];
        let a = random_mpo(&shape, &[2, 3], 41);
        let x = random_tt(&shape, &[3, 2], 42);
        let y = a.apply_exact(&x).unwrap();
        // Ranks multiply elementwise.
        assert_eq!(y.ranks(), vec![1, 2 * 3, 3 * 2, 1]);
        let amat = a.to_dense_matrix();
        let xv = flatten(&x.to_dense());
        let expect = amat.dot(&Array1::from(xv));
        let got = flatten(&y.to_dense());
        for (g, e) in got.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-10);
        }
    }

    #[test]
    fn structured_slices_match_their_dense_forms() {
        let n = 6;
        let p = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((n, p), |_| rng.gen_range(-1.0..1.0));
        let slices = vec![
            CoreSlice::Identity { scale: -1.5 },
            CoreSlice::Diagonal(Array1::from_shape_fn(n, |i| i as f64 - 2.0)),
            CoreSlice::Permutation {
                perm: (0..n as u32).map(|i| (i + 2) % n as u32).collect(),
                scale: 0.5,
            },
            CoreSlice::RankOne {
                col: Array1::from_shape_fn(n, |i| (i as f64).sin()),
                row: Array1::from_shape_fn(n, |i| (i as f64 + 0.5).cos()),
                scale: 2.0,
            },
            CoreSlice::Dense(Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0))),
        ];
        for s in &slices {
            let mut out = Array2::zeros((n, p));
            s.apply_acc(x.view(), out.view_mut());
            let expect = s.materialize(n, n).dot(&x);
            for (a, b) in out.iter().zip(expect.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        // Zero slice leaves the accumulator untouched.
        let mut out = Array2::from_elem((n, p), 7.0);
        CoreSlice::Zero.apply_acc(x.view(), out.view_mut());
        assert!(out.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn permutation_shift_convention() {
        // perm[i] = i+1 mod n gives (S x)_i = x_{i+1}: pulls from the right.
        let n = 5;
        let perm: Vec<u32> = (0..n as u32).map(|i| (i + 1) % n as u32).collect();
        let s = CoreSlice::Permutation { perm, scale: 1.0 };
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let mut out = Array2::zeros((n, 1));
        s.apply_acc(x.view(), out.view_mut());
        assert_eq!(
            out.column(0).to_vec(),
            vec![1.0, 2.0, 3.0, 4.0, 0.0]
        );
    }

    #[test]
    fn mixed_structure_operator_matches_dense() {
        // Rank-2 operator with structured slices on a 3-mode space.
        let n0 = 4;
        let n1 = 3;
        let n2 = 5;
        let c0 = OperatorCore::new(
            1,
            n0,
            n0,
            2,
            vec![
                CoreSlice::Identity { scale: 0.7 },
                CoreSlice::Diagonal(Array1::from_shape_fn(n0, |i| 0.1 * i as f64 + 0.4)),
            ],
        )
        .unwrap();
        let c1 = OperatorCore::new(
            2,
            n1,
            n1,
            2,
            vec![
                CoreSlice::Identity { scale: 1.0 },
                CoreSlice::Zero,
                CoreSlice::Zero,
                CoreSlice::Permutation {
                    perm: (0..n1 as u32).map(|i| (i + 1) % n1 as u32).collect(),
                    scale: 1.0,
                },
            ],
        )
        .unwrap();
        let c2 = OperatorCore::new(
            2,
            n2,
            n2,
            1,
            vec![
                CoreSlice::RankOne {
                    col: Array1::from_shape_fn(n2, |i| 1.0 / (1.0 + i as f64)),
                    row: Array1::ones(n2),
                    scale: 0.25,
                },
                CoreSlice::Identity { scale: -1.0 },
            ],
        )
        .unwrap();
        let op = TtOperator::new(vec![c0, c1, c2]).unwrap();
        let x = random_tt(&[n0, n1, n2], &[2, 2], 77);
        let y = op.apply_exact(&x).unwrap();
        let amat = op.to_dense_matrix();
        let expect = amat.dot(&Array1::from(flatten(&x.to_dense())));
        for (g, e) in flatten(&y.to_dense()).iter().zip(expect.iter()) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-11);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = TtOperator::identity(&[4, 5]);
        let x = random_tt(&[4, 6], &[2], 3);
        assert!(a.apply_exact(&x).is_err());
    }

    #[test]
    fn dense_matrix_of_identity() {
        let id = TtOperator::identity(&[2, 3]);
        let m = id.to_dense_matrix();
        assert_eq!(m.dim(), (6, 6));
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m[[i, j]], if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
