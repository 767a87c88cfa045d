//! Ion kinetic stage: four split convections of the 4-d phase-space density
//! and a BGK relaxation toward the local Maxwellian, each expressed as a
//! low-rank structured operator on the 3-mode tensor layout, with dense
//! twins that serve both as oracle and as the full-format backend.
//!
//! Layout conventions, fixed project-wide:
//! - dense distributions are `(n_x, n_x, n_v, n_v)` arrays indexed (x, y, v, w);
//! - the tensor layout fuses the spatial pair with x fastest: `s = ix + n_x*iy`;
//! - an update with Courant number c pulls from upstream:
//!   `out_i = sum_k alpha_k(c) * in_{i+k}`, periodic along every axis.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, Axis, Ix3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::gradient;
use crate::physics::GridSpec;
use crate::tt::{amen_apply, AmenOptions, CoreSlice, OperatorCore, RoundingReport, TtOperator, TtVector};

/// Interpolation weights `(alpha_{-2} .. alpha_2)` for a cyclic shift by
/// Courant number c: the degree-4 Lagrange basis on offsets {-2..2}
/// evaluated at -c. No stability guard; see [`cross_coeffs`].
pub fn cross_coeffs_unchecked(c: f64) -> [f64; 5] {
    [
        c * (c + 1.0) * (c - 1.0) * (c + 2.0) / 24.0,
        -c * (c + 1.0) * (c + 2.0) * (c - 2.0) / 6.0,
        (c + 1.0) * (c - 1.0) * (c + 2.0) * (c - 2.0) / 4.0,
        -c * (c - 1.0) * (c + 2.0) * (c - 2.0) / 6.0,
        c * (c + 1.0) * (c - 1.0) * (c - 2.0) / 24.0,
    ]
}

/// Checked weights; the scheme is stable only for |c| < 1.
pub fn cross_coeffs(c: f64) -> Result<[f64; 5]> {
    // NaN fails the comparison and is rejected too.
    if c.abs() < 1.0 {
        Ok(cross_coeffs_unchecked(c))
    } else {
        Err(Error::Courant {
            context: "shift interpolation weights".into(),
            max_c: c.abs(),
        })
    }
}

fn check_courant(max_c: f64, context: &str) -> Result<()> {
    if max_c < 1.0 {
        Ok(())
    } else {
        Err(Error::Courant {
            context: context.into(),
            max_c,
        })
    }
}

/// Row k holds alpha_{k-2} over the node list; callers have already checked
/// that every |fac * vals[j]| < 1.
fn coeff_table(vals: &[f64], fac: f64) -> Array2<f64> {
    let mut t = Array2::zeros((5, vals.len()));
    for (j, &v) in vals.iter().enumerate() {
        let a = cross_coeffs_unchecked(fac * v);
        for k in 0..5 {
            t[[k, j]] = a[k];
        }
    }
    t
}

fn shift_perm(n: usize, k: i64) -> Vec<u32> {
    let n = n as i64;
    (0..n).map(|i| (i + k).rem_euclid(n) as u32).collect()
}

/// Shift of the x part of the fused index s = ix + n_x*iy.
fn fused_shift_perm_x(n_x: usize, k: i64) -> Vec<u32> {
    let n = n_x as i64;
    let mut p = Vec::with_capacity(n_x * n_x);
    for iy in 0..n {
        for ix in 0..n {
            p.push(((ix + k).rem_euclid(n) + n * iy) as u32);
        }
    }
    p
}

fn fused_shift_perm_y(n_x: usize, k: i64) -> Vec<u32> {
    let n = n_x as i64;
    let mut p = Vec::with_capacity(n_x * n_x);
    for iy in 0..n {
        for ix in 0..n {
            p.push((ix + n * (iy + k).rem_euclid(n)) as u32);
        }
    }
    p
}

fn shift_slices(perm_of: impl Fn(i64) -> Vec<u32>) -> Vec<CoreSlice> {
    (-2..=2)
        .map(|k| {
            if k == 0 {
                CoreSlice::Identity { scale: 1.0 }
            } else {
                CoreSlice::Permutation {
                    perm: perm_of(k),
                    scale: 1.0,
                }
            }
        })
        .collect()
}

fn diag_slices(table: &Array2<f64>) -> Vec<CoreSlice> {
    table
        .outer_iter()
        .map(|row| CoreSlice::Diagonal(row.to_owned()))
        .collect()
}

/// Rank-r diagonal core that forwards each bond channel unchanged.
fn pass_through(n: usize, r: usize) -> Result<OperatorCore> {
    let mut slices = Vec::with_capacity(r * r);
    for a in 0..r {
        for b in 0..r {
            slices.push(if a == b {
                CoreSlice::Identity { scale: 1.0 }
            } else {
                CoreSlice::Zero
            });
        }
    }
    OperatorCore::new(r, n, n, r, slices)
}

fn identity_core(n: usize) -> Result<OperatorCore> {
    OperatorCore::single(n, n, CoreSlice::Identity { scale: 1.0 })
}

/// Transport along x over `tau_sub`: the spatial core carries the five cyclic
/// x-shifts, the v core the matching v-dependent weights; w is untouched.
pub fn build_mx(g: &GridSpec, tau_sub: f64) -> Result<TtOperator> {
    let max_c = (tau_sub * g.v_abs_max() / g.h()).abs();
    check_courant(max_c, "ion transport, x axis")?;
    let n_s = g.n_s();
    let spatial = OperatorCore::new(1, n_s, n_s, 5, shift_slices(|k| fused_shift_perm_x(g.n_x, k)))?;
    let weights = coeff_table(&g.velocity_grid(), tau_sub / g.h());
    let v_core = OperatorCore::new(5, g.n_v, g.n_v, 1, diag_slices(&weights))?;
    TtOperator::new(vec![spatial, v_core, identity_core(g.n_v)?])
}

/// Transport along y: y-shifts paired with w-dependent weights; the v core
/// forwards all five shift channels unchanged.
pub fn build_my(g: &GridSpec, tau_sub: f64) -> Result<TtOperator> {
    let max_c = (tau_sub * g.v_abs_max() / g.h()).abs();
    check_courant(max_c, "ion transport, y axis")?;
    let n_s = g.n_s();
    let spatial = OperatorCore::new(1, n_s, n_s, 5, shift_slices(|k| fused_shift_perm_y(g.n_x, k)))?;
    let weights = coeff_table(&g.velocity_grid(), tau_sub / g.h());
    let w_core = OperatorCore::new(5, g.n_v, g.n_v, 1, diag_slices(&weights))?;
    TtOperator::new(vec![spatial, pass_through(g.n_v, 5)?, w_core])
}

/// Acceleration along v by the x electric field (-phi_x): point-wise weights
/// on the fused spatial index, cyclic shifts on the v index.
pub fn build_mv(phi: &Array2<f64>, g: &GridSpec, tau_sub: f64) -> Result<TtOperator> {
    debug_assert_eq!(phi.dim(), (g.n_x, g.n_x));
    let (gx, _) = gradient(phi, g.h());
    let accel = fuse_field(&gx.mapv(|t| -t));
    let fac = tau_sub / g.h_v();
    let max_c = accel.iter().fold(0.0f64, |m, &a| m.max((fac * a).abs()));
    check_courant(max_c, "ion acceleration, v axis")?;
    let weights = coeff_table(accel.as_slice().expect("contiguous"), fac);
    let n_s = g.n_s();
    let spatial = OperatorCore::new(1, n_s, n_s, 5, diag_slices(&weights))?;
    let v_core = OperatorCore::new(5, g.n_v, g.n_v, 1, shift_slices(|k| shift_perm(g.n_v, k)))?;
    TtOperator::new(vec![spatial, v_core, identity_core(g.n_v)?])
}

/// Acceleration along w by the constant drive minus phi_y.
pub fn build_mw(phi: &Array2<f64>, g: &GridSpec, drive: f64, tau_sub: f64) -> Result<TtOperator> {
    debug_assert_eq!(phi.dim(), (g.n_x, g.n_x));
    let (_, gy) = gradient(phi, g.h());
    let accel = fuse_field(&gy.mapv(|t| drive - t));
    let fac = tau_sub / g.h_v();
    let max_c = accel.iter().fold(0.0f64, |m, &a| m.max((fac * a).abs()));
    check_courant(max_c, "ion acceleration, w axis")?;
    let weights = coeff_table(accel.as_slice().expect("contiguous"), fac);
    let n_s = g.n_s();
    let spatial = OperatorCore::new(1, n_s, n_s, 5, diag_slices(&weights))?;
    let w_core = OperatorCore::new(5, g.n_v, g.n_v, 1, shift_slices(|k| shift_perm(g.n_v, k)))?;
    TtOperator::new(vec![spatial, pass_through(g.n_v, 5)?, w_core])
}

/// BGK relaxation propagator over `tau_half`: `exp(-tau_half)` keeps the
/// state, the complement projects onto the local Maxwellian. Rank 2: the
/// second bond channel applies the velocity-space quadrature projector on
/// both velocity modes.
pub fn build_mr(g: &GridSpec, tau_half: f64) -> Result<TtOperator> {
    debug_assert!(tau_half >= 0.0);
    let decay = (-tau_half).exp();
    let proj = CoreSlice::RankOne {
        col: gaussian_profile(g),
        row: Array1::ones(g.n_v),
        scale: g.h_v(),
    };
    let n_s = g.n_s();
    let spatial = OperatorCore::new(
        1,
        n_s,
        n_s,
        2,
        vec![
            CoreSlice::Identity { scale: decay },
            CoreSlice::Identity { scale: 1.0 - decay },
        ],
    )?;
    let v_core = OperatorCore::new(
        2,
        g.n_v,
        g.n_v,
        2,
        vec![
            CoreSlice::Identity { scale: 1.0 },
            CoreSlice::Zero,
            CoreSlice::Zero,
            proj.clone(),
        ],
    )?;
    let w_core = OperatorCore::new(2, g.n_v, g.n_v, 1, vec![CoreSlice::Identity { scale: 1.0 }, proj])?;
    TtOperator::new(vec![spatial, v_core, w_core])
}

/// exp(-v^2/2)/sqrt(2 pi) sampled on the velocity nodes.
pub fn gaussian_profile(g: &GridSpec) -> Array1<f64> {
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    Array1::from_iter(
        g.velocity_grid()
            .into_iter()
            .map(|v| norm * (-0.5 * v * v).exp()),
    )
}

/// Flatten an (x, y) field into the fused spatial index s = ix + n_x*iy.
pub fn fuse_field(field: &Array2<f64>) -> Array1<f64> {
    let (nx, ny) = field.dim();
    let mut out = Array1::zeros(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            out[ix + nx * iy] = field[[ix, iy]];
        }
    }
    out
}

pub fn unfuse_field(fused: ArrayView1<'_, f64>, n_x: usize) -> Array2<f64> {
    debug_assert_eq!(fused.len() % n_x, 0);
    Array2::from_shape_fn((n_x, fused.len() / n_x), |(ix, iy)| fused[ix + n_x * iy])
}

fn fuse_distribution(f: &Array4<f64>) -> Array3<f64> {
    let (nx, ny, nv, nw) = f.dim();
    debug_assert_eq!(nx, ny);
    let swapped = f.view().permuted_axes([1, 0, 2, 3]);
    swapped
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((nx * ny, nv, nw))
        .expect("contiguous after standardizing")
}

fn unfuse_distribution(a: &Array3<f64>, n_x: usize) -> Array4<f64> {
    let (n_s, nv, nw) = a.dim();
    debug_assert_eq!(n_s, n_x * n_x);
    let std = a.as_standard_layout();
    let split = std
        .view()
        .into_shape_with_order((n_x, n_x, nv, nw))
        .expect("contiguous after standardizing");
    split
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

/// Compress a dense distribution into tensor form; eps = 0 keeps it exact.
pub fn distribution_to_tt(f: &Array4<f64>, eps: f64) -> Result<TtVector> {
    let fused = fuse_distribution(f);
    TtVector::from_dense(fused.view().into_dyn(), eps)
}

pub fn distribution_from_tt(f: &TtVector, n_x: usize) -> Result<Array4<f64>> {
    let dense = f.to_dense();
    let a3 = dense
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Tt("distribution tensor must have exactly 3 modes".into()))?;
    Ok(unfuse_distribution(&a3, n_x))
}

/// Rank-1 distribution ni(x, y) * gauss(v) * gauss(w).
pub fn maxwellian_tt(ni: &Array2<f64>, g: &GridSpec) -> Result<TtVector> {
    debug_assert_eq!(ni.dim(), (g.n_x, g.n_x));
    let fused = fuse_field(ni);
    let mut spatial = Array3::zeros((1, g.n_s(), 1));
    spatial.slice_mut(s![0, .., 0]).assign(&fused);
    let gauss = gaussian_profile(g);
    let vel = Array3::from_shape_fn((1, g.n_v, 1), |(_, j, _)| gauss[j]);
    TtVector::new(vec![spatial, vel.clone(), vel])
}

pub fn maxwellian_dense(ni: &Array2<f64>, g: &GridSpec) -> Array4<f64> {
    let gauss = gaussian_profile(g);
    Array4::from_shape_fn((g.n_x, g.n_x, g.n_v, g.n_v), |(ix, iy, j1, j2)| {
        ni[[ix, iy]] * gauss[j1] * gauss[j2]
    })
}

/// Ion density by rectangle quadrature over both velocity axes.
pub fn compute_ni_dense(f: &Array4<f64>, g: &GridSpec) -> Array2<f64> {
    let hv2 = g.h_v() * g.h_v();
    f.sum_axis(Axis(3)).sum_axis(Axis(2)) * hv2
}

/// Same quadrature as a tensor contraction: both velocity cores hit all-ones
/// vectors, so the result carries no truncation error.
pub fn compute_ni_tt(f: &TtVector, g: &GridSpec) -> Result<Array2<f64>> {
    if f.mode_sizes() != [g.n_s(), g.n_v, g.n_v] {
        return Err(Error::Tt(format!(
            "distribution modes {:?} do not match an n_x={} n_v={} grid",
            f.mode_sizes(),
            g.n_x,
            g.n_v
        )));
    }
    let w_sum = f.core(2).sum_axis(Axis(2)).sum_axis(Axis(1)); // (r2,)
    let v_sum = f.core(1).sum_axis(Axis(1)); // (r1, r2)
    let weights = v_sum.dot(&w_sum); // (r1,)
    let spatial = f.core(0).index_axis(Axis(0), 0); // (n_s, r1)
    let fused = spatial.dot(&weights) * (g.h_v() * g.h_v());
    Ok(unfuse_field(fused.view(), g.n_x))
}

fn standard_slice<'a>(f: &'a Array4<f64>, backup: &'a mut Option<Array4<f64>>) -> &'a [f64] {
    if let Some(s) = f.as_slice() {
        return s;
    }
    *backup = Some(f.as_standard_layout().into_owned());
    backup.as_ref().unwrap().as_slice().expect("standard layout")
}

/// Dense twin of [`build_mx`]: same weights, same upstream convention.
pub fn dense_transport_x(f: &Array4<f64>, g: &GridSpec, tau_sub: f64) -> Result<Array4<f64>> {
    let (nx, ny, nv, nw) = f.dim();
    debug_assert_eq!((nx, ny, nv, nw), (g.n_x, g.n_x, g.n_v, g.n_v));
    let max_c = (tau_sub * g.v_abs_max() / g.h()).abs();
    check_courant(max_c, "ion transport, x axis")?;
    let weights = coeff_table(&g.velocity_grid(), tau_sub / g.h());
    let mut backup = None;
    let fs = standard_slice(f, &mut backup);
    let mut out = Array4::zeros(f.raw_dim());
    let block = ny * nv * nw;
    out.as_slice_mut()
        .expect("freshly allocated")
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(i1, chunk)| {
            for koff in 0..5usize {
                let src_i1 = (i1 + nx + koff - 2) % nx;
                let src = &fs[src_i1 * block..][..block];
                for i2 in 0..ny {
                    for j1 in 0..nv {
                        let a = weights[[koff, j1]];
                        let base = (i2 * nv + j1) * nw;
                        for j2 in 0..nw {
                            chunk[base + j2] += a * src[base + j2];
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Dense twin of [`build_my`].
pub fn dense_transport_y(f: &Array4<f64>, g: &GridSpec, tau_sub: f64) -> Result<Array4<f64>> {
    let (nx, ny, nv, nw) = f.dim();
    debug_assert_eq!((nx, ny, nv, nw), (g.n_x, g.n_x, g.n_v, g.n_v));
    let max_c = (tau_sub * g.v_abs_max() / g.h()).abs();
    check_courant(max_c, "ion transport, y axis")?;
    let weights = coeff_table(&g.velocity_grid(), tau_sub / g.h());
    let mut backup = None;
    let fs = standard_slice(f, &mut backup);
    let mut out = Array4::zeros(f.raw_dim());
    let block = ny * nv * nw;
    out.as_slice_mut()
        .expect("freshly allocated")
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(i1, chunk)| {
            let plane = &fs[i1 * block..][..block];
            for i2 in 0..ny {
                for koff in 0..5usize {
                    let src = &plane[((i2 + ny + koff - 2) % ny) * nv * nw..][..nv * nw];
                    let dst = &mut chunk[i2 * nv * nw..][..nv * nw];
                    for j1 in 0..nv {
                        for j2 in 0..nw {
                            dst[j1 * nw + j2] += weights[[koff, j2]] * src[j1 * nw + j2];
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Dense twin of [`build_mv`].
pub fn dense_accel_v(f: &Array4<f64>, phi: &Array2<f64>, g: &GridSpec, tau_sub: f64) -> Result<Array4<f64>> {
    let (nx, ny, nv, nw) = f.dim();
    debug_assert_eq!((nx, ny, nv, nw), (g.n_x, g.n_x, g.n_v, g.n_v));
    let (gx, _) = gradient(phi, g.h());
    let fac = tau_sub / g.h_v();
    let max_c = gx.iter().fold(0.0f64, |m, &t| m.max((fac * t).abs()));
    check_courant(max_c, "ion acceleration, v axis")?;
    let mut backup = None;
    let fs = standard_slice(f, &mut backup);
    let mut out = Array4::zeros(f.raw_dim());
    let block = ny * nv * nw;
    out.as_slice_mut()
        .expect("freshly allocated")
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(i1, chunk)| {
            for i2 in 0..ny {
                let al = cross_coeffs_unchecked(-fac * gx[[i1, i2]]);
                let src = &fs[(i1 * ny + i2) * nv * nw..][..nv * nw];
                let dst = &mut chunk[i2 * nv * nw..][..nv * nw];
                for (koff, &a) in al.iter().enumerate() {
                    for j1 in 0..nv {
                        let sj = (j1 + nv + koff - 2) % nv;
                        let row = &src[sj * nw..][..nw];
                        let drow = &mut dst[j1 * nw..][..nw];
                        for j2 in 0..nw {
                            drow[j2] += a * row[j2];
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Dense twin of [`build_mw`].
pub fn dense_accel_w(
    f: &Array4<f64>,
    phi: &Array2<f64>,
    g: &GridSpec,
    drive: f64,
    tau_sub: f64,
) -> Result<Array4<f64>> {
    let (nx, ny, nv, nw) = f.dim();
    debug_assert_eq!((nx, ny, nv, nw), (g.n_x, g.n_x, g.n_v, g.n_v));
    let (_, gy) = gradient(phi, g.h());
    let fac = tau_sub / g.h_v();
    let max_c = gy
        .iter()
        .fold(0.0f64, |m, &t| m.max((fac * (drive - t)).abs()));
    check_courant(max_c, "ion acceleration, w axis")?;
    // Wrapped source index per shift, hoisted out of the hot loop.
    let sidx: Vec<Vec<usize>> = (0..5)
        .map(|koff| (0..nw).map(|j2| (j2 + nw + koff - 2) % nw).collect())
        .collect();
    let mut backup = None;
    let fs = standard_slice(f, &mut backup);
    let mut out = Array4::zeros(f.raw_dim());
    let block = ny * nv * nw;
    out.as_slice_mut()
        .expect("freshly allocated")
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(i1, chunk)| {
            for i2 in 0..ny {
                let al = cross_coeffs_unchecked(fac * (drive - gy[[i1, i2]]));
                let src = &fs[(i1 * ny + i2) * nv * nw..][..nv * nw];
                let dst = &mut chunk[i2 * nv * nw..][..nv * nw];
                for (koff, &a) in al.iter().enumerate() {
                    let map = &sidx[koff];
                    for j1 in 0..nv {
                        let row = &src[j1 * nw..][..nw];
                        let drow = &mut dst[j1 * nw..][..nw];
                        for j2 in 0..nw {
                            drow[j2] += a * row[map[j2]];
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Dense twin of [`build_mr`], using the closed-form mix of the state with
/// the local Maxwellian.
pub fn dense_relaxation(f: &Array4<f64>, g: &GridSpec, tau_half: f64) -> Array4<f64> {
    let (nx, ny, nv, nw) = f.dim();
    debug_assert_eq!((nx, ny, nv, nw), (g.n_x, g.n_x, g.n_v, g.n_v));
    let decay = (-tau_half).exp();
    let blend = 1.0 - decay;
    let gauss = gaussian_profile(g);
    let hv2 = g.h_v() * g.h_v();
    let mut backup = None;
    let fs = standard_slice(f, &mut backup);
    let mut out = Array4::zeros(f.raw_dim());
    let block = ny * nv * nw;
    out.as_slice_mut()
        .expect("freshly allocated")
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(i1, chunk)| {
            for i2 in 0..ny {
                let src = &fs[(i1 * ny + i2) * nv * nw..][..nv * nw];
                let dst = &mut chunk[i2 * nv * nw..][..nv * nw];
                let ni = src.iter().sum::<f64>() * hv2;
                for j1 in 0..nv {
                    let m1 = ni * gauss[j1];
                    for j2 in 0..nw {
                        dst[j1 * nw + j2] = decay * src[j1 * nw + j2] + blend * m1 * gauss[j2];
                    }
                }
            }
        });
    out
}

/// The four convection propagators of one stage. Transport depends only on
/// the grid and the step, so a new potential only rebuilds the acceleration
/// pair.
pub struct ConvectionOps {
    pub x: TtOperator,
    pub y: TtOperator,
    pub v: TtOperator,
    pub w: TtOperator,
}

impl ConvectionOps {
    pub fn build(phi: &Array2<f64>, g: &GridSpec, drive: f64, tau_sub: f64) -> Result<Self> {
        Ok(ConvectionOps {
            x: build_mx(g, tau_sub)?,
            y: build_my(g, tau_sub)?,
            v: build_mv(phi, g, tau_sub)?,
            w: build_mw(phi, g, drive, tau_sub)?,
        })
    }

    pub fn refresh_potential(
        &mut self,
        phi: &Array2<f64>,
        g: &GridSpec,
        drive: f64,
        tau_sub: f64,
    ) -> Result<()> {
        self.v = build_mv(phi, g, tau_sub)?;
        self.w = build_mw(phi, g, drive, tau_sub)?;
        Ok(())
    }
}

/// Bookkeeping for one truncated operator application.
#[derive(Debug, Clone)]
pub struct ApplyLog {
    pub report: RoundingReport,
    pub in_norm: f64,
    pub out_norm: f64,
}

fn checked_apply(
    op: &TtOperator,
    f: &TtVector,
    eps: f64,
    opts: &AmenOptions,
    what: &str,
) -> Result<(TtVector, ApplyLog)> {
    let in_norm = f.norm();
    let (out, report) = amen_apply(op, f, f, eps, opts)?;
    if !report.converged {
        log::warn!(
            "{what} apply stalled at relative error {:.3e} after {} sweeps",
            report.achieved_rel_error,
            report.sweeps_used
        );
    }
    let out_norm = out.norm();
    Ok((out, ApplyLog { report, in_norm, out_norm }))
}

/// One convection stage in tensor form: x, y, v, w transport applied in
/// sequence (reversed order when `reversed`), each truncated to `eps` with
/// the running iterate as the solver guess.
pub fn ion_convection_block(
    f: &TtVector,
    ops: &ConvectionOps,
    reversed: bool,
    eps: f64,
    opts: &AmenOptions,
) -> Result<(TtVector, Vec<ApplyLog>)> {
    let seq: [(&TtOperator, &str); 4] = if reversed {
        [
            (&ops.w, "ion w acceleration"),
            (&ops.v, "ion v acceleration"),
            (&ops.y, "ion y transport"),
            (&ops.x, "ion x transport"),
        ]
    } else {
        [
            (&ops.x, "ion x transport"),
            (&ops.y, "ion y transport"),
            (&ops.v, "ion v acceleration"),
            (&ops.w, "ion w acceleration"),
        ]
    };
    let mut cur = f.clone();
    let mut logs = Vec::with_capacity(4);
    for (op, what) in seq {
        let (next, log) = checked_apply(op, &cur, eps, opts, what)?;
        cur = next;
        logs.push(log);
    }
    Ok((cur, logs))
}

/// Dense twin of [`ion_convection_block`].
pub fn ion_convection_block_dense(
    f: &Array4<f64>,
    phi: &Array2<f64>,
    g: &GridSpec,
    drive: f64,
    tau_sub: f64,
    reversed: bool,
) -> Result<Array4<f64>> {
    if reversed {
        let a = dense_accel_w(f, phi, g, drive, tau_sub)?;
        let b = dense_accel_v(&a, phi, g, tau_sub)?;
        let c = dense_transport_y(&b, g, tau_sub)?;
        dense_transport_x(&c, g, tau_sub)
    } else {
        let a = dense_transport_x(f, g, tau_sub)?;
        let b = dense_transport_y(&a, g, tau_sub)?;
        let c = dense_accel_v(&b, phi, g, tau_sub)?;
        dense_accel_w(&c, phi, g, drive, tau_sub)
    }
}

/// BGK relaxation in tensor form.
pub fn apply_relaxation(
    f: &TtVector,
    mr: &TtOperator,
    eps: f64,
    opts: &AmenOptions,
) -> Result<(TtVector, ApplyLog)> {
    checked_apply(mr, f, eps, opts, "ion relaxation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid(n_x: usize, l: f64, n_v: usize, v_max: f64) -> GridSpec {
        GridSpec {
            n_x,
            n_v,
            l_domain: l,
            v_max,
        }
    }

    fn random_distribution(g: &GridSpec, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((g.n_x, g.n_x, g.n_v, g.n_v), |_| rng.gen_range(0.2..1.0))
    }

    fn smooth_phi(g: &GridSpec, amp: f64) -> Array2<f64> {
        let n = g.n_x as f64;
        Array2::from_shape_fn((g.n_x, g.n_x), |(i, j)| {
            let x = 2.0 * PI * i as f64 / n;
            let y = 2.0 * PI * j as f64 / n;
            amp * ((x + 0.3).sin() * (y - 0.2).cos() + 0.5 * (2.0 * y + 1.0).sin())
        })
    }

    fn frob4(a: &Array4<f64>) -> f64 {
        a.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    fn rel4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        frob4(&(a - b)) / frob4(b)
    }

    #[test]
    fn coeff_degenerate_shifts_are_exact() {
        assert_eq!(cross_coeffs(0.0).unwrap(), [0.0, 0.0, 1.0, 0.0, 0.0]);
        let right = cross_coeffs_unchecked(1.0);
        let left = cross_coeffs_unchecked(-1.0);
        for k in 0..5 {
            assert_eq!(right[k], if k == 1 { 1.0 } else { 0.0 });
            assert_eq!(left[k], if k == 3 { 1.0 } else { 0.0 });
        }
        assert!(matches!(cross_coeffs(1.0), Err(Error::Courant { .. })));
        assert!(matches!(cross_coeffs(-1.2), Err(Error::Courant { .. })));
        assert!(matches!(cross_coeffs(f64::NAN), Err(Error::Courant { .. })));
    }

    #[test]
    fn coeff_half_step_frozen_values() {
        let a = cross_coeffs(0.5).unwrap();
        let expect = [-0.0390625, 0.46875, 0.703125, -0.15625, 0.0234375];
        for k in 0..5 {
            assert_abs_diff_eq!(a[k], expect[k], epsilon = 1e-15);
        }
        let sum: f64 = a.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn coeff_matches_lagrange_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let c = rng.gen_range(-0.999..0.999);
            let a = cross_coeffs(c).unwrap();
            for (idx, k) in (-2i64..=2).enumerate() {
                let mut p = 1.0;
                for j in -2i64..=2 {
                    if j != k {
                        p *= (-c - j as f64) / ((k - j) as f64);
                    }
                }
                assert_abs_diff_eq!(a[idx], p, epsilon = 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn coeff_partition_of_unity(c in -0.999f64..0.999) {
            let a = cross_coeffs(c).unwrap();
            let sum: f64 = a.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn update_symbol_never_amplifies() {
        // l2 stability of every convection: the cyclic update's Fourier
        // symbol stays inside the unit disc for |c| < 1.
        let mut worst = 0.0f64;
        for ci in 0..99 {
            let c = -0.98 + 0.02 * ci as f64;
            let a = cross_coeffs(c).unwrap();
            for ti in 0..256 {
                let th = 2.0 * PI * ti as f64 / 256.0;
                let mut re = 0.0;
                let mut im = 0.0;
                for (idx, k) in (-2i64..=2).enumerate() {
                    re += a[idx] * (k as f64 * th).cos();
                    im += a[idx] * (k as f64 * th).sin();
                }
                worst = worst.max(re * re + im * im);
            }
        }
        assert!(worst.sqrt() <= 1.0 + 1e-12, "max symbol modulus {}", worst.sqrt());
    }

    #[test]
    fn transport_x_matches_explicit_stencil() {
        let g = grid(6, 3.0, 5, 2.0);
        let tau = 0.2;
        let f = random_distribution(&g, 7);
        let weights = coeff_table(&g.velocity_grid(), tau / g.h());
        let mut expect = Array4::zeros(f.raw_dim());
        for i1 in 0..6 {
            for i2 in 0..6 {
                for j1 in 0..5 {
                    for j2 in 0..5 {
                        let mut acc = 0.0;
                        for koff in 0..5usize {
                            acc += weights[[koff, j1]] * f[[(i1 + 6 + koff - 2) % 6, i2, j1, j2]];
                        }
                        expect[[i1, i2, j1, j2]] = acc;
                    }
                }
            }
        }
        let dense = dense_transport_x(&f, &g, tau).unwrap();
        assert!(rel4(&dense, &expect) < 1e-13);
        let tt = distribution_to_tt(&f, 0.0).unwrap();
        let out = build_mx(&g, tau).unwrap().apply_exact(&tt).unwrap();
        let back = distribution_from_tt(&out, 6).unwrap();
        assert!(rel4(&back, &expect) < 1e-12);
    }

    #[test]
    fn transport_y_matches_explicit_stencil() {
        let g = grid(6, 3.0, 5, 2.0);
        let tau = 0.2;
        let f = random_distribution(&g, 11);
        let weights = coeff_table(&g.velocity_grid(), tau / g.h());
        let mut expect = Array4::zeros(f.raw_dim());
        for i1 in 0..6 {
            for i2 in 0..6 {
                for j1 in 0..5 {
                    for j2 in 0..5 {
                        let mut acc = 0.0;
                        for koff in 0..5usize {
                            acc += weights[[koff, j2]] * f[[i1, (i2 + 6 + koff - 2) % 6, j1, j2]];
                        }
                        expect[[i1, i2, j1, j2]] = acc;
                    }
                }
            }
        }
        let dense = dense_transport_y(&f, &g, tau).unwrap();
        assert!(rel4(&dense, &expect) < 1e-13);
        let tt = distribution_to_tt(&f, 0.0).unwrap();
        let out = build_my(&g, tau).unwrap().apply_exact(&tt).unwrap();
        let back = distribution_from_tt(&out, 6).unwrap();
        assert!(rel4(&back, &expect) < 1e-12);
    }

    #[test]
    fn accel_v_matches_explicit_stencil() {
        let g = grid(6, 3.0, 5, 2.0);
        let tau = 0.3;
        let phi = smooth_phi(&g, 0.2);
        let f = random_distribution(&g, 13);
        let h = g.h();
        let fac = tau / g.h_v();
        // Independent central difference of the potential.
        let mut expect = Array4::zeros(f.raw_dim());
        let mut max_c = 0.0f64;
        for i1 in 0..6 {
            for i2 in 0..6 {
                let gx = (phi[[(i1 + 1) % 6, i2]] - phi[[(i1 + 5) % 6, i2]]) / (2.0 * h);
                let c = -fac * gx;
                max_c = max_c.max(c.abs());
                let al = cross_coeffs_unchecked(c);
                for j1 in 0..5 {
                    for j2 in 0..5 {
                        let mut acc = 0.0;
                        for koff in 0..5usize {
                            acc += al[koff] * f[[i1, i2, (j1 + 5 + koff - 2) % 5, j2]];
                        }
                        expect[[i1, i2, j1, j2]] = acc;
                    }
                }
            }
        }
        assert!(max_c < 1.0, "test setup violates the step bound: {max_c}");
        let dense = dense_accel_v(&f, &phi, &g, tau).unwrap();
        assert!(rel4(&dense, &expect) < 1e-13);
        let tt = distribution_to_tt(&f, 0.0).unwrap();
        let out = build_mv(&phi, &g, tau).unwrap().apply_exact(&tt).unwrap();
        let back = distribution_from_tt(&out, 6).unwrap();
        assert!(rel4(&back, &expect) < 1e-12);
    }

    #[test]
    fn accel_w_matches_explicit_stencil() {
        let g = grid(6, 3.0, 5, 2.0);
        let tau = 0.3;
        let drive = 0.4;
        let phi = smooth_phi(&g, 0.2);
        let f = random_distribution(&g, 17);
        let h = g.h();
        let fac = tau / g.h_v();
        let mut expect = Array4::zeros(f.raw_dim());
        let mut max_c = 0.0f64;
        for i1 in 0..6 {
            for i2 in 0..6 {
                let gy = (phi[[i1, (i2 + 1) % 6]] - phi[[i1, (i2 + 5) % 6]]) / (2.0 * h);
                let c = fac * (drive - gy);
                max_c = max_c.max(c.abs());
                let al = cross_coeffs_unchecked(c);
                for j1 in 0..5 {
                    for j2 in 0..5 {
                        let mut acc = 0.0;
                        for koff in 0..5usize {
                            acc += al[koff] * f[[i1, i2, j1, (j2 + 5 + koff - 2) % 5]];
                        }
                        expect[[i1, i2, j1, j2]] = acc;
                    }
                }
            }
        }
        assert!(max_c < 1.0, "test setup violates the step bound: {max_c}");
        let dense = dense_accel_w(&f, &phi, &g, drive, tau).unwrap();
        assert!(rel4(&dense, &expect) < 1e-13);
        let tt = distribution_to_tt(&f, 0.0).unwrap();
        let out = build_mw(&phi, &g, drive, tau)
            .unwrap()
            .apply_exact(&tt)
            .unwrap();
        let back = distribution_from_tt(&out, 6).unwrap();
        assert!(rel4(&back, &expect) < 1e-12);
    }

    #[test]
    fn degenerate_operators_are_identities() {
        let g = grid(6, 3.0, 5, 2.0);
        let f = random_distribution(&g, 19);
        let tt = distribution_to_tt(&f, 0.0).unwrap();

        let zero_step = build_mx(&g, 0.0).unwrap().apply_exact(&tt).unwrap();
        assert!(rel4(&distribution_from_tt(&zero_step, 6).unwrap(), &f) < 1e-14);

        let flat = Array2::zeros((6, 6));
        let no_field = build_mv(&flat, &g, 0.3).unwrap().apply_exact(&tt).unwrap();
        assert!(rel4(&distribution_from_tt(&no_field, 6).unwrap(), &f) < 1e-14);

        let frozen = build_mr(&g, 0.0).unwrap().apply_exact(&tt).unwrap();
        assert!(rel4(&distribution_from_tt(&frozen, 6).unwrap(), &f) < 1e-14);
    }

    #[test]
    fn x_constant_profile_is_untouched() {
        let g = grid(6, 3.0, 5, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q = Array2::from_shape_fn((6, 5), |_| rng.gen_range(0.1..1.0));
        // Constant along x and v; the shifts see a constant and the weights
        // sum to one.
        let f = Array4::from_shape_fn((6, 6, 5, 5), |(_, i2, _, j2)| q[[i2, j2]]);
        let out = dense_transport_x(&f, &g, 0.25).unwrap();
        assert!(rel4(&out, &f) < 1e-14);
    }

    #[test]
    fn uniform_state_survives_a_full_block() {
        let g = grid(6, 3.0, 5, 2.0);
        let phi = Array2::zeros((6, 6));
        let f = Array4::from_elem((6, 6, 5, 5), 0.7);
        for reversed in [false, true] {
            let out = ion_convection_block_dense(&f, &phi, &g, 0.0, 0.25, reversed).unwrap();
            assert!(rel4(&out, &f) < 1e-13);
        }
        let tt = distribution_to_tt(&f, 0.0).unwrap();
        let ops = ConvectionOps::build(&phi, &g, 0.0, 0.25).unwrap();
        let (out, logs) = ion_convection_block(&tt, &ops, false, 1e-10, &AmenOptions::default()).unwrap();
        assert!(rel4(&distribution_from_tt(&out, 6).unwrap(), &f) < 1e-9);
        assert_eq!(logs.len(), 4);
    }

    #[test]
    fn relaxation_matches_dense_formula() {
        let g = grid(6, 3.0, 9, 3.0);
        let tau_half = 0.35;
        let f = random_distribution(&g, 29);
        let expect = dense_relaxation(&f, &g, tau_half);
        let tt = distribution_to_tt(&f, 0.0).unwrap();
        let out = build_mr(&g, tau_half).unwrap().apply_exact(&tt).unwrap();
        assert!(rel4(&distribution_from_tt(&out, 6).unwrap(), &expect) < 1e-12);

        // tau -> infinity: pure projection onto the local Maxwellian.
        let proj = dense_relaxation(&f, &g, 800.0);
        let limit = maxwellian_dense(&compute_ni_dense(&f, &g), &g);
        assert!(rel4(&proj, &limit) < 1e-12);
        let tt_proj = build_mr(&g, 800.0).unwrap().apply_exact(&tt).unwrap();
        assert!(rel4(&distribution_from_tt(&tt_proj, 6).unwrap(), &limit) < 1e-12);
    }

    #[test]
    fn maxwellian_is_a_relaxation_fixed_point() {
        let g = grid(8, 4.0, 31, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let ni = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.5..1.5));
        let f = maxwellian_tt(&ni, &g).unwrap();
        assert_eq!(f.ranks(), vec![1, 1, 1, 1]);
        let out = build_mr(&g, 0.5).unwrap().apply_exact(&f).unwrap();
        let a = distribution_from_tt(&out, 8).unwrap();
        let b = distribution_from_tt(&f, 8).unwrap();
        assert!(rel4(&a, &b) < 1e-6);
    }

    #[test]
    fn quadrature_projector_defect_is_small() {
        for (n_v, v_max) in [(31, 6.0), (15, 6.0)] {
            let g = grid(4, 2.0, n_v, v_max);
            let gauss = gaussian_profile(&g);
            let q1 = g.h_v() * gauss.sum();
            assert!((q1 - 1.0).abs() < 1e-6, "defect {} at n_v={}", (q1 - 1.0).abs(), n_v);
            // One projector factor: E^2 = q1 E exactly up to fp.
            let e = Array2::from_shape_fn((n_v, n_v), |(i, _)| g.h_v() * gauss[i]);
            let e2 = e.dot(&e);
            let diff = &e2 - &e.mapv(|t| q1 * t);
            let rel = diff.iter().map(|t| t * t).sum::<f64>().sqrt()
                / e.iter().map(|t| t * t).sum::<f64>().sqrt();
            assert!(rel < 1e-14);
        }
    }

    #[test]
    fn materialized_operators_preserve_sums() {
        let g = grid(4, 4.0, 5, 2.0);
        let tau = 0.4;
        let drive = 0.3;
        let phi = smooth_phi(&g, 0.1);
        let ops = [
            build_mx(&g, tau).unwrap(),
            build_my(&g, tau).unwrap(),
            build_mv(&phi, &g, tau).unwrap(),
            build_mw(&phi, &g, drive, tau).unwrap(),
        ];
        for op in &ops {
            let m = op.to_dense_matrix();
            let (rows, cols) = m.dim();
            assert_eq!(rows, cols);
            for i in 0..rows {
                let rsum: f64 = m.row(i).sum();
                let csum: f64 = m.column(i).sum();
                assert_abs_diff_eq!(rsum, 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(csum, 1.0, epsilon = 1e-12);
            }
        }
        // Relaxation conserves mass up to the quadrature defect.
        let tau_half = 0.6;
        let m = build_mr(&g, tau_half).unwrap().to_dense_matrix();
        let decay = (-tau_half).exp();
        let q1 = g.h_v() * gaussian_profile(&g).sum();
        let expected = decay + (1.0 - decay) * q1 * q1;
        for j in 0..m.ncols() {
            let csum: f64 = m.column(j).sum();
            assert_abs_diff_eq!(csum, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn density_contraction_matches_dense_quadrature() {
        let g = grid(6, 3.0, 7, 2.5);
        let f = random_distribution(&g, 37);
        let tt = distribution_to_tt(&f, 0.0).unwrap();
        let a = compute_ni_tt(&tt, &g).unwrap();
        let b = compute_ni_dense(&f, &g);
        let rel = (&a - &b).iter().map(|t| t * t).sum::<f64>().sqrt()
            / b.iter().map(|t| t * t).sum::<f64>().sqrt();
        assert!(rel < 1e-12);

        let zero = distribution_to_tt(&Array4::zeros((6, 6, 7, 7)), 0.0).unwrap();
        assert!(compute_ni_tt(&zero, &g).unwrap().iter().all(|&t| t == 0.0));

        // Rank-1 Maxwellian: density comes back scaled by the squared 1-d
        // quadrature factor.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let ni = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.5..1.5));
        let q1 = g.h_v() * gaussian_profile(&g).sum();
        let got = compute_ni_tt(&maxwellian_tt(&ni, &g).unwrap(), &g).unwrap();
        let want = ni.mapv(|t| t * q1 * q1);
        let rel = (&got - &want).iter().map(|t| t * t).sum::<f64>().sqrt()
            / want.iter().map(|t| t * t).sum::<f64>().sqrt();
        assert!(rel < 1e-13);
    }

    #[test]
    fn fused_layout_round_trips() {
        let g = grid(5, 2.5, 4, 2.0);
        let f = random_distribution(&g, 43);
        let fused = fuse_distribution(&f);
        for i1 in 0..5 {
            for i2 in 0..5 {
                for j1 in 0..4 {
                    for j2 in 0..4 {
                        assert_eq!(fused[[i1 + 5 * i2, j1, j2]], f[[i1, i2, j1, j2]]);
                    }
                }
            }
        }
        let back = unfuse_distribution(&fused, 5);
        assert_eq!(back, f);
        let tt = distribution_to_tt(&f, 0.0).unwrap();
        assert!(rel4(&distribution_from_tt(&tt, 5).unwrap(), &f) < 1e-13);

        let field = Array2::from_shape_fn((5, 5), |(i, j)| (i * 10 + j) as f64);
        let flat = fuse_field(&field);
        assert_eq!(flat[3 + 5 * 2], field[[3, 2]]);
        assert_eq!(unfuse_field(flat.view(), 5), field);
    }

    #[test]
    fn dense_block_conserves_mass_and_order_matters() {
        let g = grid(8, 8.0, 9, 3.0);
        let tau = 0.3;
        let drive = 0.5;
        let phi = smooth_phi(&g, 0.2);
        let f = random_distribution(&g, 47);
        let total = f.sum();
        let fwd = ion_convection_block_dense(&f, &phi, &g, drive, tau, false).unwrap();
        let rev = ion_convection_block_dense(&f, &phi, &g, drive, tau, true).unwrap();
        assert_abs_diff_eq!(fwd.sum() / total, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rev.sum() / total, 1.0, epsilon = 1e-12);
        // The stages do not commute once the potential varies.
        assert!(rel4(&fwd, &rev) > 1e-6);

        let tau_half = 0.6;
        let relaxed = dense_relaxation(&f, &g, tau_half);
        let q1 = g.h_v() * gaussian_profile(&g).sum();
        let expected = (-tau_half).exp() + (1.0 - (-tau_half).exp()) * q1 * q1;
        assert_abs_diff_eq!(relaxed.sum() / total, expected, epsilon = 1e-12);
    }

    #[test]
    fn tt_block_matches_dense_reference() {
        let g = grid(16, 8.0, 15, 6.0);
        let tau = 0.08;
        let drive = 0.31;
        let phi = smooth_phi(&g, 1.0);
        let gauss = gaussian_profile(&g);
        let v = g.velocity_grid();
        let n = g.n_x as f64;
        let f = Array4::from_shape_fn((16, 16, 15, 15), |(i1, i2, j1, j2)| {
            let x = 2.0 * PI * i1 as f64 / n;
            let y = 2.0 * PI * i2 as f64 / n;
            let base = 1.0
                + 0.3 * x.sin() * y.cos()
                + 0.2 * (x + 0.5 * v[j1]).cos()
                + 0.15 * (y + 0.4 * v[j2]).sin();
            base * gauss[j1] * gauss[j2]
        });
        let tt = distribution_to_tt(&f, 1e-13).unwrap();
        let ops = ConvectionOps::build(&phi, &g, drive, tau).unwrap();
        // The product needs bond ranks far above the input's, and each sweep
        // can only add kick_rank directions, so give the solver headroom.
        let opts = AmenOptions {
            kick_rank: 16,
            max_sweeps: 12,
        };
        for reversed in [false, true] {
            let dense = ion_convection_block_dense(&f, &phi, &g, drive, tau, reversed).unwrap();
            let (out, logs) = ion_convection_block(&tt, &ops, reversed, 1e-10, &opts).unwrap();
            let back = distribution_from_tt(&out, 16).unwrap();
            let rel = rel4(&back, &dense);
            assert!(rel < 1e-8, "reversed={reversed}: tt vs dense {rel:.3e}");
            for log in &logs {
                // Orthogonal projection of a non-expansive update.
                assert!(log.out_norm <= log.in_norm * (1.0 + 1e-10));
            }
        }
    }

    #[test]
    fn tt_block_error_tracks_tolerance() {
        let g = grid(8, 8.0, 9, 3.0);
        let tau = 0.3;
        let drive = 0.4;
        let phi = smooth_phi(&g, 0.2);
        // A geometrically decaying bond spectrum, so that every tolerance in
        // the sweep has something to truncate; a flat random spectrum would
        // be untruncatable below ~1/sqrt(rank) and errors would floor at fp.
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let n_s = g.n_s();
        let (r1, r2) = (n_s.min(g.n_v * g.n_v), g.n_v);
        let c0 = Array3::from_shape_fn((1, n_s, r1), |(_, _, a)| {
            rng.gen_range(-1.0..1.0) * 0.6f64.powi(a as i32)
        });
        let c1 = Array3::from_shape_fn((r1, g.n_v, r2), |_| rng.gen_range(-1.0..1.0));
        let c2 = Array3::from_shape_fn((r2, g.n_v, 1), |_| rng.gen_range(-1.0..1.0));
        let tt = TtVector::new(vec![c0, c1, c2]).unwrap();
        let f = distribution_from_tt(&tt, 8).unwrap();
        let dense = ion_convection_block_dense(&f, &phi, &g, drive, tau, false).unwrap();
        let ops = ConvectionOps::build(&phi, &g, drive, tau).unwrap();
        let opts = AmenOptions {
            kick_rank: 16,
            max_sweeps: 12,
        };
        let mut errs = Vec::new();
        for eps in [1e-3, 1e-4, 1e-5, 1e-6] {
            let (out, _) = ion_convection_block(&tt, &ops, false, eps, &opts).unwrap();
            errs.push(rel4(&distribution_from_tt(&out, 8).unwrap(), &dense));
        }
        for k in 0..3 {
            assert!(errs[k + 1] < errs[k] * 0.9, "no decrease: {errs:?}");
        }
        assert!(errs[0] < 5e-2, "errors {errs:?}");
        assert!(errs[3] < 5e-5, "errors {errs:?}");
        assert!(errs[0] / errs[3] > 30.0, "errors do not track eps: {errs:?}");
    }

    #[test]
    fn free_streaming_follows_characteristics() {
        fn stream_error(n: usize) -> f64 {
            let g = grid(n, 2.0, 7, 2.0);
            let tau = 0.8 * g.h() / g.v_abs_max();
            let phi = Array2::zeros((n, n));
            let gauss = gaussian_profile(&g);
            let v = g.velocity_grid();
            let l = g.l_domain;
            let p = |x: f64| (2.0 * PI * x / l).sin().exp();
            let q = |y: f64| (0.5 * (2.0 * PI * y / l).cos()).exp();
            let h = g.h();
            let f = Array4::from_shape_fn((n, n, 7, 7), |(i1, i2, j1, j2)| {
                p(i1 as f64 * h) * q(i2 as f64 * h) * gauss[j1] * gauss[j2]
            });
            let out = ion_convection_block_dense(&f, &phi, &g, 0.0, tau, false).unwrap();
            let exact = Array4::from_shape_fn((n, n, 7, 7), |(i1, i2, j1, j2)| {
                p(i1 as f64 * h - tau * v[j1]) * q(i2 as f64 * h - tau * v[j2]) * gauss[j1] * gauss[j2]
            });
            rel4(&out, &exact)
        }
        let e16 = stream_error(16);
        let e32 = stream_error(32);
        assert!(e16 < 0.05, "coarse error {e16}");
        // Degree-4 interpolation at fixed Courant number: error drops ~2^5.
        assert!(e16 / e32 > 16.0, "observed ratio {}", e16 / e32);
    }

    #[test]
    fn builders_reject_unstable_steps() {
        let g = grid(8, 4.0, 9, 3.0);
        match build_mx(&g, 0.2) {
            Err(Error::Courant { context, max_c }) => {
                assert!(context.contains("x axis"));
                assert!(max_c >= 1.0);
            }
            other => panic!("expected a step-bound error, got {other:?}"),
        }
        let f = random_distribution(&g, 59);
        assert!(matches!(
            dense_transport_y(&f, &g, 0.2),
            Err(Error::Courant { .. })
        ));
        let flat = Array2::zeros((8, 8));
        match build_mw(&flat, &g, 50.0, 0.1) {
            Err(Error::Courant { context, .. }) => assert!(context.contains("w axis")),
            other => panic!("expected a step-bound error, got {other:?}"),
        }
        let steep = Array2::from_shape_fn((8, 8), |(i, _)| 30.0 * (2.0 * PI * i as f64 / 8.0).sin());
        match build_mv(&steep, &g, 0.1) {
            Err(Error::Courant { context, .. }) => assert!(context.contains("v axis")),
            other => panic!("expected a step-bound error, got {other:?}"),
        }
    }
}
