//! Electron density updates: exact spectral diffusion and Mac-Cormack
//! advection in conservative flux form, composed into sub-stepped blocks.
//!
//! The equation's 1/(psi*sqrt(T_e)) time scaling is folded into effective
//! step lengths so both propagators stay in standard form. Axis 0 is x,
//! axis 1 is y.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::{gradient, Spectral2d};
use crate::physics::{DerivedScales, PhysicalParams};

/// Advection coefficients of the electron flux, frozen at one potential.
#[derive(Debug, Clone)]
pub struct ElectronVelocityField {
    pub a_x: Array2<f64>,
    pub a_y: Array2<f64>,
    max_ax: f64,
    max_ay: f64,
}

impl ElectronVelocityField {
    pub fn max_abs(&self) -> (f64, f64) {
        (self.max_ax, self.max_ay)
    }
}

/// Assembles a_x = V_0/(v_Ti psi sqrt(T_e)) - hall*phi_y - phi_x and
/// a_y = drive + hall*phi_x - phi_y with hall = 1/(theta*sqrt(T_e*psi)).
pub fn build_velocity_field(
    phi: &Array2<f64>,
    p: &PhysicalParams,
    s: &DerivedScales,
    h: f64,
) -> ElectronVelocityField {
    let (gx, gy) = gradient(phi, h);
    let drift = s.v_0 / (s.v_ti * p.psi * p.t_e.sqrt());
    let hall = 1.0 / (p.theta * (p.t_e * p.psi).sqrt());
    let n = phi.dim();
    let mut a_x = Array2::zeros(n);
    let mut a_y = Array2::zeros(n);
    let mut max_ax = 0.0f64;
    let mut max_ay = 0.0f64;
    ndarray::Zip::from(&mut a_x)
        .and(&mut a_y)
        .and(&gx)
        .and(&gy)
        .for_each(|ax, ay, &px, &py| {
            *ax = drift - hall * py - px;
            *ay = s.drive + hall * px - py;
            max_ax = max_ax.max(ax.abs());
            max_ay = max_ay.max(ay.abs());
        });
    ElectronVelocityField {
        a_x,
        a_y,
        max_ax,
        max_ay,
    }
}

/// Exact diffusion over tau_e: exponent (tau_e * psi * sqrt(T_e)) * T_e * lam.
pub fn diffusion_step(
    n_e: &Array2<f64>,
    sp: &Spectral2d,
    p: &PhysicalParams,
    tau_e: f64,
) -> Result<Array2<f64>> {
    let t_eff = tau_e * p.psi * p.t_e.sqrt() * p.t_e;
    sp.diffusion_exp(n_e, t_eff)
}

/// One Mac-Cormack predictor/corrector update of
/// dn/dt = d(a_x n)/dx + d(a_y n)/dy over tau_e. Conservative: the total
/// sum of n_e is preserved exactly by the telescoping flux differences.
pub fn advection_step(
    n_e: &Array2<f64>,
    vel: &ElectronVelocityField,
    p: &PhysicalParams,
    tau_e: f64,
    h: f64,
) -> Result<Array2<f64>> {
    let dt = tau_e * p.psi * p.t_e.sqrt();
    let c_x = vel.max_ax * dt / h;
    let c_y = vel.max_ay * dt / h;
    if c_x >= 1.0 {
        return Err(Error::Courant {
            context: "electron advection, x axis".into(),
            max_c: c_x,
        });
    }
    if c_y >= 1.0 {
        return Err(Error::Courant {
            context: "electron advection, y axis".into(),
            max_c: c_y,
        });
    }
    let (n, m) = n_e.dim();
    let r = dt / h;
    let ax = &vel.a_x;
    let ay = &vel.a_y;
    let mut star = Array2::zeros((n, m));
    for i in 0..n {
        let ip = (i + 1) % n;
        for j in 0..m {
            let jp = (j + 1) % m;
            star[[i, j]] = n_e[[i, j]]
                + r * (ax[[ip, j]] * n_e[[ip, j]] - ax[[i, j]] * n_e[[i, j]])
                + r * (ay[[i, jp]] * n_e[[i, jp]] - ay[[i, j]] * n_e[[i, j]]);
        }
    }
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let im = (i + n - 1) % n;
        for j in 0..m {
            let jm = (j + m - 1) % m;
            out[[i, j]] = 0.5
                * (n_e[[i, j]]
                    + star[[i, j]]
                    + r * (ax[[i, j]] * star[[i, j]] - ax[[im, j]] * star[[im, j]])
                    + r * (ay[[i, j]] * star[[i, j]] - ay[[i, jm]] * star[[i, jm]]));
        }
    }
    Ok(out)
}

/// N_ext sub-steps of length tau_half/N_ext with the velocity field frozen
/// at the supplied potential. `mirrored = false` runs diffusion before
/// advection inside each sub-step, `mirrored = true` the reverse; composing
/// a forward block with a mirrored one yields a time-symmetric update.
#[allow(clippy::too_many_arguments)]
pub fn substep_block(
    n_e: &Array2<f64>,
    phi: &Array2<f64>,
    p: &PhysicalParams,
    s: &DerivedScales,
    sp: &Spectral2d,
    tau_half: f64,
    n_ext: usize,
    mirrored: bool,
) -> Result<Array2<f64>> {
    assert!(n_ext >= 1, "N_ext must be at least 1");
    debug_assert_eq!(phi.dim().0, sp.n());
    let h = sp.h();
    let vel = build_velocity_field(phi, p, s, h);
    let delta = tau_half / n_ext as f64;
    let mut cur = n_e.clone();
    for _ in 0..n_ext {
        if mirrored {
            cur = advection_step(&cur, &vel, p, delta, h)?;
            cur = diffusion_step(&cur, sp, p, delta)?;
        } else {
            cur = diffusion_step(&cur, sp, p, delta)?;
            cur = advection_step(&cur, &vel, p, delta, h)?;
        }
    }
    Ok(cur)
}
