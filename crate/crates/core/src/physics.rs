//! Physical parameters, derived scales and discretization specs.
//!
//! All equations in the solver are dimensionless: time in units of 1/nu_in,
//! space in units of l = v_Ti/nu_in, velocities in units of the ion thermal
//! speed v_Ti, temperature ratios relative to T_i and the potential in units
//! of T_i/e. Densities stay in physical m^-3; the Poisson coefficient
//! carries the matching m^3.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical inputs. `psi` and `theta` (magnetization/coupling factors) are
/// inputs, not recomputed from the masses; `m_e` is recorded for provenance
/// only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Ion temperature in joules.
    pub t_i: f64,
    /// Electron temperature as a ratio to T_i (dimensionless).
    pub t_e: f64,
    /// Background electric field, V/m.
    pub e_0: f64,
    /// Magnetic field, tesla.
    pub b_0: f64,
    /// Background plasma density, m^-3.
    pub n_0: f64,
    /// Ion mass, kg.
    pub m_i: f64,
    /// Electron mass, kg (bookkeeping only).
    pub m_e: f64,
    /// Ion-neutral collision frequency, 1/s.
    pub nu_in: f64,
    /// Electron collision/magnetization factor in the electron equation.
    pub psi: f64,
    /// Hall coupling factor in the electron equation.
    pub theta: f64,
    /// Elementary charge, coulombs.
    pub charge: f64,
    /// Vacuum permittivity, F/m.
    pub eps_0: f64,
    /// Extra multiplier on the Poisson coupling constant (default 1).
    pub poisson_scale: f64,
}

/// Scales derived once from `PhysicalParams`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedScales {
    /// Ion thermal speed sqrt(T_i/m_i), m/s.
    pub v_ti: f64,
    /// Spatial scale v_Ti/nu_in, metres.
    pub l: f64,
    /// E0/B0 drift speed, m/s.
    pub v_0: f64,
    /// Dimensionless ion drive e*E_0/(m_i*v_Ti*nu_in); also the constant
    /// part of the electron y-velocity.
    pub drive: f64,
    /// Poisson coupling e^2/(eps_0*m_i*nu_in^2) times `poisson_scale`, m^3.
    pub poisson_coeff: f64,
    /// Converts the dimensionless mean |grad phi| to V/m: T_i/(l*e).
    pub e_rescale: f64,
    /// Seconds per dimensionless time unit: 1/nu_in.
    pub time_unit_s: f64,
}

/// Computes the derived scales. Fails on non-positive masses, temperatures,
/// frequencies or fields that would make the scales meaningless.
pub fn derive_scales(p: &PhysicalParams) -> Result<DerivedScales> {
    let mut errs = Vec::new();
    for (name, v) in [
        ("T_i", p.t_i),
        ("T_e", p.t_e),
        ("B_0", p.b_0),
        ("n_0", p.n_0),
        ("m_i", p.m_i),
        ("nu_in", p.nu_in),
        ("psi", p.psi),
        ("theta", p.theta),
        ("e", p.charge),
        ("eps_0", p.eps_0),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            errs.push(format!("{name} must be positive and finite, got {v}"));
        }
    }
    if !p.e_0.is_finite() || p.e_0 < 0.0 {
        errs.push(format!("E_0 must be finite and >= 0, got {}", p.e_0));
    }
    if !(p.poisson_scale > 0.0) || !p.poisson_scale.is_finite() {
        errs.push(format!(
            "poisson_scale must be positive and finite, got {}",
            p.poisson_scale
        ));
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let v_ti = (p.t_i / p.m_i).sqrt();
    let l = v_ti / p.nu_in;
    Ok(DerivedScales {
        v_ti,
        l,
        v_0: p.e_0 / p.b_0,
        drive: p.charge * p.e_0 / (p.m_i * v_ti * p.nu_in),
        poisson_coeff: p.poisson_scale * p.charge * p.charge
            / (p.eps_0 * p.m_i * p.nu_in * p.nu_in),
        e_rescale: p.t_i / (l * p.charge),
        time_unit_s: 1.0 / p.nu_in,
    })
}

/// Periodic grid: x, y on [0, L) with n_x points each, v, w cell-centered on
/// (-v_max, v_max) with n_v points. Everything dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_x: usize,
    pub n_v: usize,
    /// Domain edge length L (units of l).
    pub l_domain: f64,
    /// Velocity half-width (units of v_Ti).
    pub v_max: f64,
}

impl GridSpec {
    /// Spatial step h = L/n_x.
    pub fn h(&self) -> f64 {
        self.l_domain / self.n_x as f64
    }

    /// Velocity step h_v = 2 v_max / n_v.
    pub fn h_v(&self) -> f64 {
        2.0 * self.v_max / self.n_v as f64
    }

    /// Cell-centered velocity nodes v_j = -v_max + (j + 1/2) h_v, symmetric
    /// about 0 (contains 0 exactly for odd n_v).
    pub fn velocity_grid(&self) -> Vec<f64> {
        let hv = self.h_v();
        (0..self.n_v)
            .map(|j| -self.v_max + (j as f64 + 0.5) * hv)
            .collect()
    }

    /// Largest |v| on the velocity grid: v_max - h_v/2.
    pub fn v_abs_max(&self) -> f64 {
        self.v_max - 0.5 * self.h_v()
    }

    /// Number of fused spatial points n_x^2.
    pub fn n_s(&self) -> usize {
        self.n_x * self.n_x
    }
}

/// Checks grid resolution and velocity-domain truncation; collects every
/// violated constraint.
pub fn validate_grid(g: &GridSpec) -> Result<()> {
    let mut errs = Vec::new();
    if g.n_x < 8 {
        errs.push(format!("n_x must be >= 8, got {}", g.n_x));
    }
    if g.n_v < 8 {
        errs.push(format!("n_v must be >= 8, got {}", g.n_v));
    }
    if !(g.l_domain > 0.0) || !g.l_domain.is_finite() {
        errs.push(format!("L must be positive and finite, got {}", g.l_domain));
    }
    if !(g.v_max > 0.0) || !g.v_max.is_finite() {
        errs.push(format!(
            "v_max must be positive and finite, got {}",
            g.v_max
        ));
    } else {
        let tail = (-0.5 * g.v_max * g.v_max).exp();
        if tail >= 1e-6 {
            errs.push(format!(
                "v_max = {} truncates the Maxwellian too early: exp(-v_max^2/2) = {tail:.3e} >= 1e-6",
                g.v_max
            ));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errs))
    }
}

/// Macro time stepping parameters (dimensionless time units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSpec {
    /// Macro step tau.
    pub tau: f64,
    /// Number of macro steps.
    pub n_steps: usize,
    /// Electron sub-steps per tau/2 block.
    pub n_ext: usize,
}

pub fn validate_time(t: &TimeSpec) -> Result<()> {
    let mut errs = Vec::new();
    if !(t.tau > 0.0) || !t.tau.is_finite() {
        errs.push(format!("tau must be positive and finite, got {}", t.tau));
    }
    if t.n_ext < 1 {
        errs.push(format!("N_ext must be >= 1, got {}", t.n_ext));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errs))
    }
}

/// Adaptive truncation tolerance control for the TT backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSpec {
    /// Tolerance used on the first macro step.
    pub eps_initial: f64,
    /// Lower clamp for the adaptive tolerance.
    pub eps_floor: f64,
    /// Multiplier on the previous step's relative change.
    pub eps_factor: f64,
}

/// Upper clamp for the adaptive tolerance.
pub const EPS_CEIL: f64 = 0.1;

impl ToleranceSpec {
    /// Next tolerance from the previous macro step's relative change.
    pub fn next_eps(&self, rel_change: f64) -> f64 {
        (self.eps_factor * rel_change).clamp(self.eps_floor, EPS_CEIL)
    }
}

pub fn validate_tolerance(t: &ToleranceSpec) -> Result<()> {
    let mut errs = Vec::new();
    if !(t.eps_floor > 0.0) || !(t.eps_floor <= t.eps_initial) {
        errs.push(format!(
            "need 0 < eps_floor <= eps_initial, got floor {} initial {}",
            t.eps_floor, t.eps_initial
        ));
    }
    if !(t.eps_factor > 0.0 && t.eps_factor < 1.0) {
        errs.push(format!(
            "eps_factor must lie in (0, 1), got {}",
            t.eps_factor
        ));
    }
    if t.eps_initial > EPS_CEIL {
        errs.push(format!(
            "eps_initial must be <= {EPS_CEIL}, got {}",
            t.eps_initial
        ));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(errs))
    }
}
