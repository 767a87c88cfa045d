//! Shared fixtures for unit tests.

use crate::physics::{GridSpec, PhysicalParams, ToleranceSpec};

/// Physical parameters matching the shipped modified-mass preset.
pub fn reference_params() -> PhysicalParams {
    PhysicalParams {
        t_i: 300.0 * 1.3806505e-23,
        t_e: 1.0,
        e_0: 0.05,
        b_0: 5e-5,
        n_0: 1e10,
        m_i: 4.9936722e-26,
        m_e: 3.97950489e-29,
        nu_in: 1800.0,
        psi: 0.1575,
        theta: 0.03528,
        charge: 1.60217653e-19,
        eps_0: 8.85418781e-12,
        poisson_scale: 1.0,
    }
}

/// Scaled-down grid used by the oracle-equivalence tests.
pub fn small_grid() -> GridSpec {
    GridSpec {
        n_x: 16,
        n_v: 15,
        l_domain: 8.0,
        v_max: 6.0,
    }
}

pub fn pinned_tolerance(eps: f64) -> ToleranceSpec {
    ToleranceSpec {
        eps_initial: eps,
        eps_floor: eps,
        eps_factor: 1e-12,
    }
}
