//! Periodic 2D spectral kernels: 5-point Laplacian spectrum, exact diffusion
//! exponential, Poisson solve and spectral intensities.
//!
//! Transform convention: unnormalized forward FFT, 1/n^2 on the inverse.
//! Spectral intensity values depend on this choice and it is part of the
//! on-disk diagnostics contract.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// FFT plans and the 5-point Laplacian spectrum for one n x n periodic grid
/// with spacing h. Cheap to clone (plans are shared).
#[derive(Clone)]
pub struct Spectral2d {
    n: usize,
    h: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// lam[[kx, ky]] = (2cos(2 pi kx/n) - 2)/h^2 + (2cos(2 pi ky/n) - 2)/h^2.
    lam: Array2<f64>,
}

impl std::fmt::Debug for Spectral2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral2d")
            .field("n", &self.n)
            .field("h", &self.h)
            .finish()
    }
}

impl Spectral2d {
    pub fn new(n: usize, h: f64) -> Self {
        assert!(n >= 2, "spectral grid needs n >= 2, got {n}");
        assert!(h > 0.0 && h.is_finite(), "grid spacing must be positive");
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let one_d: Vec<f64> = (0..n)
            .map(|k| (2.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos() - 2.0) / (h * h))
            .collect();
        let lam = Array2::from_shape_fn((n, n), |(kx, ky)| one_d[kx] + one_d[ky]);
        Spectral2d { n, h, fwd, inv, lam }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn laplacian_spectrum(&self) -> &Array2<f64> {
        &self.lam
    }

    fn fft2_inplace(&self, a: &mut Array2<Complex<f64>>, plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        let mut scratch = vec![Complex::default(); plan.get_inplace_scratch_len()];
        for mut row in a.rows_mut() {
            let slice = row.as_slice_mut().expect("row-major layout");
            plan.process_with_scratch(slice, &mut scratch);
        }
        let mut col = vec![Complex::default(); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = a[[i, j]];
            }
            plan.process_with_scratch(&mut col, &mut scratch);
            for i in 0..n {
                a[[i, j]] = col[i];
            }
        }
    }

    /// Unnormalized forward 2D transform.
    pub fn forward(&self, field: &Array2<f64>) -> Array2<Complex<f64>> {
        assert_eq!(field.dim(), (self.n, self.n), "field/grid size mismatch");
        let mut spec = field.mapv(|x| Complex::new(x, 0.0));
        self.fft2_inplace(&mut spec, &self.fwd.clone());
        spec
    }

    /// Inverse transform with 1/n^2 normalization. The result of any real
    /// symmetric spectral filter must be real; a non-negligible imaginary
    /// part means the spectrum was inconsistent and is a hard error.
    pub fn inverse(&self, mut spec: Array2<Complex<f64>>) -> Result<Array2<f64>> {
        assert_eq!(spec.dim(), (self.n, self.n), "spectrum/grid size mismatch");
        self.fft2_inplace(&mut spec, &self.inv.clone());
        let scale = 1.0 / (self.n * self.n) as f64;
        let mut re_sq = 0.0;
        let mut im_sq = 0.0;
        for z in spec.iter() {
            re_sq += z.re * z.re;
            im_sq += z.im * z.im;
        }
        let residue = im_sq.sqrt() * scale;
        let bound = 1e-10 * re_sq.sqrt() * scale;
        if residue > bound {
            return Err(Error::ImaginaryResidue { residue, bound });
        }
        Ok(spec.mapv(|z| z.re * scale))
    }

    /// Applies exp(t_eff * Laplacian) exactly through the spectrum.
    pub fn diffusion_exp(&self, field: &Array2<f64>, t_eff: f64) -> Result<Array2<f64>> {
        debug_assert!(t_eff >= 0.0, "diffusion time must be non-negative");
        let mut spec = self.forward(field);
        ndarray::Zip::from(&mut spec).and(&self.lam).for_each(|z, &l| {
            *z *= (t_eff * l).exp();
        });
        self.inverse(spec)
    }

    /// Solves the discrete 5-point Poisson problem Lap(phi) = rhs - mean(rhs)
    /// with the zero-mean gauge mean(phi) = 0.
    pub fn solve_poisson(&self, rhs: &Array2<f64>) -> Result<Array2<f64>> {
        let mut spec = self.forward(rhs);
        spec[[0, 0]] = Complex::default();
        for kx in 0..self.n {
            for ky in 0..self.n {
                if kx == 0 && ky == 0 {
                    continue;
                }
                spec[[kx, ky]] /= self.lam[[kx, ky]];
            }
        }
        self.inverse(spec)
    }

    /// Squared moduli of the forward transforms of both field components,
    /// summed per wavenumber bin.
    pub fn spectral_intensity(&self, ex: &Array2<f64>, ey: &Array2<f64>) -> Array2<f64> {
        let sx = self.forward(ex);
        let sy = self.forward(ey);
        Array2::from_shape_fn((self.n, self.n), |idx| {
            sx[idx].norm_sqr() + sy[idx].norm_sqr()
        })
    }
}

/// Central differences with periodic wrap: (f_{i+1} - f_{i-1})/(2h) per axis.
/// Axis 0 is x, axis 1 is y.
pub fn gradient(field: &Array2<f64>, h: f64) -> (Array2<f64>, Array2<f64>) {
    let (n, m) = field.dim();
    let inv2h = 1.0 / (2.0 * h);
    let mut gx = Array2::zeros((n, m));
    let mut gy = Array2::zeros((n, m));
    for i in 0..n {
        let ip = (i + 1) % n;
        let im = (i + n - 1) % n;
        for j in 0..m {
            let jp = (j + 1) % m;
            let jm = (j + m - 1) % m;
            gx[[i, j]] = (field[[ip, j]] - field[[im, j]]) * inv2h;
            gy[[i, j]] = (field[[i, jp]] - field[[i, jm]]) * inv2h;
        }
    }
    (gx, gy)
}

/// Direct 5-point periodic Laplacian stencil.
pub fn apply_laplacian_5pt(field: &Array2<f64>, h: f64) -> Array2<f64> {
    let (n, m) = field.dim();
    let inv_h2 = 1.0 / (h * h);
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let ip = (i + 1) % n;
        let im = (i + n - 1) % n;
        for j in 0..m {
            let jp = (j + 1) % m;
            let jm = (j + m - 1) % m;
            out[[i, j]] = (field[[ip, j]] + field[[im, j]] + field[[i, jp]] + field[[i, jm]]
                - 4.0 * field[[i, j]])
                * inv_h2;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0))
    }

    fn cos_mode(n: usize, kx: usize, ky: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(i, j)| {
            (2.0 * std::f64::consts::PI * (kx * i + ky * j) as f64 / n as f64).cos()
        })
    }

    fn frob(a: &Array2<f64>) -> f64 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn forward_inverse_roundtrip() {
        let sp = Spectral2d::new(16, 0.5);
        let f = random_field(16, 1);
        let back = sp.inverse(sp.forward(&f)).unwrap();
        let mut diff = back.clone();
        diff -= &f;
        assert!(frob(&diff) <= 1e-12 * frob(&f));
    }

    #[test]
    fn spectrum_zero_mode_and_two_point_value() {
        let sp = Spectral2d::new(8, 1.0);
        assert_eq!(sp.laplacian_spectrum()[[0, 0]], 0.0);
        let sp2 = Spectral2d::new(2, 0.5);
        // cos(pi) = -1 so the odd mode eigenvalue is -4/h^2.
        assert_relative_eq!(sp2.laplacian_spectrum()[[1, 0]], -16.0, max_relative = 1e-14);
        assert!(sp.laplacian_spectrum().iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn spectrum_matches_materialized_stencil() {
        let n = 8;
        let sp = Spectral2d::new(n, 1.0);
        // A sampled Fourier mode is an exact eigenvector of the stencil.
        for (kx, ky) in [(1, 1), (2, 5), (0, 3)] {
            let mode = cos_mode(n, kx, ky);
            let lap = apply_laplacian_5pt(&mode, 1.0);
            let lam = sp.laplacian_spectrum()[[kx, ky]];
            let mut diff = lap.clone();
            diff.zip_mut_with(&mode, |d, &m| *d -= lam * m);
            assert!(frob(&diff) <= 1e-12 * frob(&lap).max(1.0));
        }
    }

    #[test]
    fn diffusion_identity_and_constant() {
        let sp = Spectral2d::new(12, 0.7);
        let f = random_field(12, 2);
        let same = sp.diffusion_exp(&f, 0.0).unwrap();
        let mut diff = same.clone();
        diff -= &f;
        assert!(frob(&diff) <= 1e-13 * frob(&f));

        let c = Array2::from_elem((12, 12), 3.25);
        let out = sp.diffusion_exp(&c, 1.7).unwrap();
        let mut dc = out.clone();
        dc -= &c;
        assert!(frob(&dc) <= 1e-13 * frob(&c));
    }

    #[test]
    fn diffusion_single_mode_decay() {
        let n = 16;
        let h = 0.25;
        let sp = Spectral2d::new(n, h);
        let mode = cos_mode(n, 3, 1);
        let t = 0.01;
        let out = sp.diffusion_exp(&mode, t).unwrap();
        let factor = (t * sp.laplacian_spectrum()[[3, 1]]).exp();
        let mut diff = out.clone();
        diff.zip_mut_with(&mode, |d, &m| *d -= factor * m);
        assert!(frob(&diff) <= 1e-12 * frob(&mode));
    }

    #[test]
    fn diffusion_matches_substepped_euler() {
        // Explicit Euler with 1e4 substeps on a single mode: the remaining
        // discrepancy is the Euler truncation error, about (t*lam)^2/(2*1e4).
        let n = 8;
        let sp = Spectral2d::new(n, 1.0);
        let mode = cos_mode(n, 1, 1);
        let lam = sp.laplacian_spectrum()[[1, 1]];
        let t = 0.14 / lam.abs();
        let steps = 10_000;
        let dt = t / steps as f64;
        let mut euler = mode.clone();
        for _ in 0..steps {
            let lap = apply_laplacian_5pt(&euler, 1.0);
            euler.zip_mut_with(&lap, |e, &l| *e += dt * l);
        }
        let exact = sp.diffusion_exp(&mode, t).unwrap();
        let mut diff = exact.clone();
        diff -= &euler;
        assert!(frob(&diff) <= 1e-6 * frob(&exact));
    }

    #[test]
    fn diffusion_never_expands() {
        let sp = Spectral2d::new(16, 0.5);
        let f = random_field(16, 3);
        let out = sp.diffusion_exp(&f, 0.3).unwrap();
        assert!(frob(&out) <= frob(&f) * (1.0 + 1e-14));
    }

    #[test]
    fn poisson_constant_rhs_gives_zero() {
        let sp = Spectral2d::new(8, 1.0);
        let rhs = Array2::from_elem((8, 8), 42.0);
        let phi = sp.solve_poisson(&rhs).unwrap();
        assert!(frob(&phi) <= 1e-12 * 42.0 * 8.0);
    }

    #[test]
    fn poisson_single_mode_eigenfunction() {
        let n = 16;
        let h = 0.5;
        let sp = Spectral2d::new(n, h);
        let rhs = cos_mode(n, 2, 3);
        let phi = sp.solve_poisson(&rhs).unwrap();
        let lam = sp.laplacian_spectrum()[[2, 3]];
        let mut diff = phi.clone();
        diff.zip_mut_with(&rhs, |d, &r| *d -= r / lam);
        assert!(frob(&diff) <= 1e-12 * frob(&phi));
    }

    #[test]
    fn poisson_stencil_roundtrip_and_zero_mean() {
        let n = 16;
        let h = 0.5;
        let sp = Spectral2d::new(n, h);
        let rhs = random_field(n, 4);
        let phi = sp.solve_poisson(&rhs).unwrap();
        let mean_phi = phi.sum() / (n * n) as f64;
        assert!(mean_phi.abs() <= 1e-12 * frob(&phi).max(1.0));
        let lap = apply_laplacian_5pt(&phi, h);
        let mean_rhs = rhs.sum() / (n * n) as f64;
        let mut diff = lap.clone();
        diff.zip_mut_with(&rhs, |d, &r| *d -= r - mean_rhs);
        assert!(frob(&diff) <= 1e-10 * frob(&rhs));
    }

    #[test]
    fn gradient_constant_is_zero_and_sine_is_exact() {
        let n = 16;
        let h = 0.5;
        let c = Array2::from_elem((n, n), 7.0);
        let (gx, gy) = gradient(&c, h);
        assert_eq!(frob(&gx), 0.0);
        assert_eq!(frob(&gy), 0.0);

        let l = n as f64 * h;
        let f = Array2::from_shape_fn((n, n), |(i, _)| {
            (2.0 * std::f64::consts::PI * i as f64 * h / l).sin()
        });
        let (gx, gy) = gradient(&f, h);
        assert!(frob(&gy) <= 1e-14);
        for i in 0..n {
            let xp = (i as f64 + 1.0) * h;
            let xm = (i as f64 - 1.0) * h;
            let expect = ((2.0 * std::f64::consts::PI * xp / l).sin()
                - (2.0 * std::f64::consts::PI * xm / l).sin())
                / (2.0 * h);
            assert_relative_eq!(gx[[i, 0]], expect, epsilon = 1e-13);
        }
    }

    #[test]
    fn spectral_intensity_parseval_and_bins() {
        let n = 16;
        let sp = Spectral2d::new(n, 1.0);
        let ex = random_field(n, 5);
        let ey = random_field(n, 6);
        let intensity = sp.spectral_intensity(&ex, &ey);
        let total: f64 = intensity.sum();
        let direct = (n * n) as f64
            * (ex.iter().map(|x| x * x).sum::<f64>() + ey.iter().map(|x| x * x).sum::<f64>());
        assert_relative_eq!(total, direct, max_relative = 1e-12);

        // A pure cosine mode concentrates at the +-k bins only.
        let mode = cos_mode(n, 3, 0);
        let zero = Array2::zeros((n, n));
        let spec = sp.spectral_intensity(&mode, &zero);
        let peak = (n * n) as f64 * (n * n) as f64 / 4.0;
        assert_relative_eq!(spec[[3, 0]], peak, max_relative = 1e-10);
        assert_relative_eq!(spec[[n - 3, 0]], peak, max_relative = 1e-10);
        let off: f64 = spec
            .indexed_iter()
            .filter(|((kx, ky), _)| !(*ky == 0 && (*kx == 3 || *kx == n - 3)))
            .map(|(_, v)| v)
            .sum();
        assert!(off <= 1e-8 * peak);
    }

    #[test]
    fn inconsistent_spectrum_is_rejected() {
        let n = 8;
        let sp = Spectral2d::new(n, 1.0);
        // A lone off-axis bin breaks conjugate symmetry.
        let mut spec = Array2::from_elem((n, n), Complex::new(0.0, 0.0));
        spec[[1, 2]] = Complex::new(1.0, 0.5);
        match sp.inverse(spec) {
            Err(Error::ImaginaryResidue { residue, bound }) => {
                assert!(residue > bound);
            }
            other => panic!("expected imaginary-residue error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn diffusion_semigroup(a in 0.0..0.5f64, b in 0.0..0.5f64, seed in 0u64..32) {
            let sp = Spectral2d::new(8, 0.7);
            let f = random_field(8, seed);
            let two = sp.diffusion_exp(&sp.diffusion_exp(&f, a).unwrap(), b).unwrap();
            let one = sp.diffusion_exp(&f, a + b).unwrap();
            let mut diff = two.clone();
            diff -= &one;
            prop_assert!(frob(&diff) <= 1e-12 * frob(&f));
        }

        #[test]
        fn gradient_components_are_mean_free(seed in 0u64..32) {
            let f = random_field(12, seed);
            let (gx, gy) = gradient(&f, 0.3);
            prop_assert!(gx.sum().abs() <= 1e-12 * frob(&gx).max(1.0));
            prop_assert!(gy.sum().abs() <= 1e-12 * frob(&gy).max(1.0));
        }
    }
}
