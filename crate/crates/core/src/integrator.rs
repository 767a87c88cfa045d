//! Time integration: seeded initialization, the symmetric split macro step
//! with a frozen mid-step potential, the adaptive truncation tolerance and
//! the run loop shared by both ion backends.
//!
//! A macro step of length tau first predicts the mid-step state with one
//! explicit half-step, solves for its potential, then applies the
//! palindromic stage sequence (ion convections forward, relaxation,
//! electron block, mirrored electron block, relaxation, ion convections
//! reversed), every stage of length tau/2 and every operator frozen at the
//! predicted potential. With the coupling frozen the ion and electron
//! updates commute, so the code runs them species by species.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{Backend, SimConfig};
use crate::diagnostics::{compute_e_add, DiagnosticsRecord};
use crate::electron::substep_block;
use crate::error::{Error, Result};
use crate::field::Spectral2d;
use crate::ion::{
    apply_relaxation, build_mr, compute_ni_dense, compute_ni_tt, dense_relaxation,
    distribution_from_tt, ion_convection_block, ion_convection_block_dense, maxwellian_dense,
    maxwellian_tt, ApplyLog, ConvectionOps,
};
use crate::physics::{DerivedScales, GridSpec};
use crate::tt::{AmenOptions, TtOperator, TtVector};

/// The ion distribution in whichever representation the backend evolves.
#[derive(Debug, Clone)]
pub enum IonState {
    Dense(Array4<f64>),
    Tt(TtVector),
}

impl IonState {
    pub fn is_tt(&self) -> bool {
        matches!(self, IonState::Tt(_))
    }

    pub fn norm(&self) -> f64 {
        match self {
            IonState::Dense(f) => f.iter().map(|x| x * x).sum::<f64>().sqrt(),
            IonState::Tt(f) => f.norm(),
        }
    }

    /// Ion density on the spatial grid via the velocity quadrature.
    pub fn density(&self, g: &GridSpec) -> Result<Array2<f64>> {
        match self {
            IonState::Dense(f) => Ok(compute_ni_dense(f, g)),
            IonState::Tt(f) => compute_ni_tt(f, g),
        }
    }

    /// Materializes the distribution as a 4D array (for comparisons).
    pub fn to_dense(&self, n_x: usize) -> Result<Array4<f64>> {
        match self {
            IonState::Dense(f) => Ok(f.clone()),
            IonState::Tt(f) => distribution_from_tt(f, n_x),
        }
    }
}

/// Full solver state between macro steps. `phi` caches the potential the
/// last predictor stage solved for; diagnostics that need the potential of
/// the *current* densities re-solve instead of reading it.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub n_e: Array2<f64>,
    pub ion: IonState,
    pub phi: Array2<f64>,
    pub step: usize,
    pub eps_current: f64,
}

/// Per-step bookkeeping the run loop and the tests inspect.
#[derive(Debug)]
pub struct StepInfo {
    /// Relative distribution change of the macro step, the input of the
    /// tolerance update.
    pub rel_change: f64,
    /// Tolerance the step was computed with.
    pub eps_used: f64,
    /// Logs of every truncated convection apply (empty on the dense path).
    pub conv_logs: Vec<ApplyLog>,
    /// Logs of every truncated relaxation apply.
    pub relax_logs: Vec<ApplyLog>,
}

#[derive(Default)]
struct StageLogs {
    conv: Vec<ApplyLog>,
    relax: Vec<ApplyLog>,
}

struct TtMachinery {
    ops: ConvectionOps,
    mr: TtOperator,
}

/// Owns the spectral plans and the tensor propagators of one configured
/// run and advances [`SystemState`]s through macro steps.
pub struct Stepper {
    cfg: SimConfig,
    scales: DerivedScales,
    sp: Spectral2d,
    tt: Option<TtMachinery>,
}

impl Stepper {
    pub fn new(cfg: &SimConfig) -> Result<Stepper> {
        cfg.validate()?;
        let scales = cfg.scales()?;
        let sp = Spectral2d::new(cfg.grid.n_x, cfg.grid.h());
        Ok(Stepper {
            cfg: cfg.clone(),
            scales,
            sp,
            tt: None,
        })
    }

    pub fn cfg(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn scales(&self) -> &DerivedScales {
        &self.scales
    }

    pub fn spectral(&self) -> &Spectral2d {
        &self.sp
    }

    fn amen_opts(&self) -> AmenOptions {
        AmenOptions {
            kick_rank: self.cfg.amen_kick,
            max_sweeps: self.cfg.amen_sweeps,
        }
    }

    fn solve_phi(&self, n_e: &Array2<f64>, ni: &Array2<f64>) -> Result<Array2<f64>> {
        let mut rhs = n_e - ni;
        rhs *= self.scales.poisson_coeff;
        self.sp.solve_poisson(&rhs)
    }

    /// Potential of the state's instantaneous densities.
    pub fn potential_of(&self, state: &SystemState) -> Result<Array2<f64>> {
        let ni = state.ion.density(&self.cfg.grid)?;
        self.solve_phi(&state.n_e, &ni)
    }

    /// Builds the tensor propagators on first use, then only swaps in the
    /// two potential-dependent acceleration factors.
    fn ensure_tt(&mut self, phi: &Array2<f64>) -> Result<()> {
        let tau_half = 0.5 * self.cfg.time.tau;
        let g = self.cfg.grid;
        let drive = self.scales.drive;
        match self.tt.as_mut() {
            Some(m) => m.ops.refresh_potential(phi, &g, drive, tau_half),
            None => {
                self.tt = Some(TtMachinery {
                    ops: ConvectionOps::build(phi, &g, drive, tau_half)?,
                    mr: build_mr(&g, tau_half)?,
                });
                Ok(())
            }
        }
    }

    /// Draws the seeded white-noise densities, calibrates their magnitude
    /// so the startup field strength is `target_ratio * E_0`, and builds
    /// the locally Maxwellian rank-1 distribution on top of the ion
    /// density. Draw order is part of the reproducibility contract:
    /// row-major noise for n_e first, then row-major noise for n_i.
    pub fn initialize(&self, backend: Backend) -> Result<(SystemState, ChaCha8Rng)> {
        let g = self.cfg.grid;
        let n = g.n_x;
        let p = &self.cfg.params;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.init.seed);
        let xi_e = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
        let xi_i = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));

        // Poisson and the field strength are linear in the noise
        // magnitude, so one unit-magnitude solve fixes the calibration.
        let mut rhs_unit = &xi_e - &xi_i;
        rhs_unit *= self.scales.poisson_coeff;
        let phi_unit = self.sp.solve_poisson(&rhs_unit)?;
        let e_unit = compute_e_add(&phi_unit, g.h(), &self.scales);
        if !(e_unit > 0.0) || !e_unit.is_finite() {
            return Err(Error::Numerical(format!(
                "initial noise produced no usable startup field (unit-noise strength {e_unit:.3e}); pick a different seed"
            )));
        }
        let m = self.cfg.init.target_ratio * p.e_0 / e_unit;
        let n_e = xi_e.mapv(|x| p.n_0 + m * x);
        let ni = xi_i.mapv(|x| p.n_0 + m * x);
        let phi = phi_unit.mapv(|x| m * x);
        let ion = match backend {
            Backend::Dense => IonState::Dense(maxwellian_dense(&ni, &g)),
            Backend::Tt => IonState::Tt(maxwellian_tt(&ni, &g)?),
            Backend::Both => {
                return Err(Error::Config(
                    "initialize needs a concrete backend, not `both`".to_string(),
                ))
            }
        };
        Ok((
            SystemState {
                n_e,
                ion,
                phi,
                step: 0,
                eps_current: self.cfg.tol.eps_initial,
            },
            rng,
        ))
    }

    /// One explicit half-step of every sub-physics at the state's own
    /// potential, then a Poisson solve at the result. The returned state
    /// carries the frozen mid-step potential the corrector stages use.
    pub fn predictor(&mut self, u: &SystemState) -> Result<SystemState> {
        Ok(self.predictor_stage(u)?.0)
    }

    fn predictor_stage(&mut self, u: &SystemState) -> Result<(SystemState, StageLogs)> {
        let tau_half = 0.5 * self.cfg.time.tau;
        let g = self.cfg.grid;
        let drive = self.scales.drive;
        let phi0 = self.potential_of(u)?;
        let mut logs = StageLogs::default();
        let ion = match &u.ion {
            IonState::Dense(f) => {
                let a = ion_convection_block_dense(f, &phi0, &g, drive, tau_half, false)?;
                IonState::Dense(dense_relaxation(&a, &g, tau_half))
            }
            IonState::Tt(f) => {
                self.ensure_tt(&phi0)?;
                let m = self.tt.as_ref().expect("ensured above");
                let opts = self.amen_opts();
                let (a, conv) = ion_convection_block(f, &m.ops, false, u.eps_current, &opts)?;
                let (b, relax) = apply_relaxation(&a, &m.mr, u.eps_current, &opts)?;
                logs.conv.extend(conv);
                logs.relax.push(relax);
                IonState::Tt(b)
            }
        };
        let n_e = substep_block(
            &u.n_e,
            &phi0,
            &self.cfg.params,
            &self.scales,
            &self.sp,
            tau_half,
            self.cfg.time.n_ext,
            false,
        )?;
        let ni = ion.density(&g)?;
        let phi = self.solve_phi(&n_e, &ni)?;
        Ok((
            SystemState {
                n_e,
                ion,
                phi,
                step: u.step,
                eps_current: u.eps_current,
            },
            logs,
        ))
    }

    /// Advances one macro step. Any failure (Courant, solver breakdown,
    /// non-convergence) surfaces before the caller's state is replaced, so
    /// an aborted step mutates nothing.
    pub fn macro_step(&mut self, u: &SystemState) -> Result<(SystemState, StepInfo)> {
        let tau_half = 0.5 * self.cfg.time.tau;
        let g = self.cfg.grid;
        let drive = self.scales.drive;
        let eps = u.eps_current;
        let (pred, mut logs) = self.predictor_stage(u)?;
        let phi_t = pred.phi;

        let new_ion = match &u.ion {
            IonState::Dense(f) => {
                let a = ion_convection_block_dense(f, &phi_t, &g, drive, tau_half, false)?;
                let b = dense_relaxation(&a, &g, tau_half);
                let c = dense_relaxation(&b, &g, tau_half);
                IonState::Dense(ion_convection_block_dense(&c, &phi_t, &g, drive, tau_half, true)?)
            }
            IonState::Tt(f) => {
                self.ensure_tt(&phi_t)?;
                let m = self.tt.as_ref().expect("ensured above");
                let opts = self.amen_opts();
                let (a, l1) = ion_convection_block(f, &m.ops, false, eps, &opts)?;
                let (b, l2) = apply_relaxation(&a, &m.mr, eps, &opts)?;
                let (c, l3) = apply_relaxation(&b, &m.mr, eps, &opts)?;
                let (d, l4) = ion_convection_block(&c, &m.ops, true, eps, &opts)?;
                logs.conv.extend(l1);
                logs.relax.push(l2);
                logs.relax.push(l3);
                logs.conv.extend(l4);
                IonState::Tt(d)
            }
        };
        // The convection propagators never amplify and truncation only
        // removes energy, so growth beyond the approximation slack means
        // the compressed solve went wrong.
        for log in &logs.conv {
            if log.out_norm > log.in_norm * (1.0 + 2.0 * eps + 1e-12) {
                return Err(Error::Numerical(format!(
                    "truncated convection apply grew the solution norm at step {}: {:.6e} -> {:.6e} at eps {eps:.3e}",
                    u.step + 1,
                    log.in_norm,
                    log.out_norm
                )));
            }
        }

        let ne_half = substep_block(
            &u.n_e,
            &phi_t,
            &self.cfg.params,
            &self.scales,
            &self.sp,
            tau_half,
            self.cfg.time.n_ext,
            false,
        )?;
        let n_e = substep_block(
            &ne_half,
            &phi_t,
            &self.cfg.params,
            &self.scales,
            &self.sp,
            tau_half,
            self.cfg.time.n_ext,
            true,
        )?;

        let rel = rel_change(&u.ion, &new_ion)?;
        Ok((
            SystemState {
                n_e,
                ion: new_ion,
                phi: phi_t,
                step: u.step + 1,
                eps_current: self.cfg.tol.next_eps(rel),
            },
            StepInfo {
                rel_change: rel,
                eps_used: eps,
                conv_logs: logs.conv,
                relax_logs: logs.relax,
            },
        ))
    }

    /// Diagnostics sample of a state: a fresh Poisson solve of its
    /// recorded densities (the cached potential is half a step stale) and
    /// the storage-checked rank bookkeeping. `eps` is the tolerance to
    /// report, normally the one the state was computed with.
    pub fn record_for(
        &self,
        state: &SystemState,
        cpu_s: f64,
        eps: f64,
    ) -> Result<DiagnosticsRecord> {
        let g = self.cfg.grid;
        let ni = state.ion.density(&g)?;
        let phi = self.solve_phi(&state.n_e, &ni)?;
        let e_add = compute_e_add(&phi, g.h(), &self.scales);
        let t_phys = state.step as f64 * self.cfg.time.tau * self.scales.time_unit_s;
        let mean_ni = ni.mean().unwrap_or(0.0);
        match &state.ion {
            IonState::Tt(f) => DiagnosticsRecord::for_tt(
                state.step, t_phys, e_add, mean_ni, f, g.n_x, g.n_v, cpu_s, eps,
            ),
            IonState::Dense(_) => Ok(DiagnosticsRecord::for_dense(
                state.step, t_phys, e_add, mean_ni, g.n_x, g.n_v, cpu_s, eps,
            )),
        }
    }

    /// Initializes and runs the configured number of macro steps. One
    /// record per state including the initial one; `on_checkpoint` fires
    /// at every multiple of the configured cadence.
    pub fn run(
        &mut self,
        backend: Backend,
        on_record: impl FnMut(&DiagnosticsRecord) -> Result<()>,
        on_checkpoint: impl FnMut(&SystemState, &ChaCha8Rng) -> Result<()>,
    ) -> Result<(SystemState, Vec<DiagnosticsRecord>)> {
        let (state, rng) = self.initialize(backend)?;
        self.continue_run(state, rng, on_record, on_checkpoint)
    }

    /// Runs from an existing state (fresh or restored) until the
    /// configured step count. Wall-time readings restart at zero.
    pub fn continue_run(
        &mut self,
        start: SystemState,
        rng: ChaCha8Rng,
        mut on_record: impl FnMut(&DiagnosticsRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(&SystemState, &ChaCha8Rng) -> Result<()>,
    ) -> Result<(SystemState, Vec<DiagnosticsRecord>)> {
        let t0 = std::time::Instant::now();
        let mut records = Vec::new();
        let rec = self.record_for(&start, 0.0, start.eps_current)?;
        on_record(&rec).map_err(|e| with_step(e, start.step))?;
        records.push(rec);
        let mut state = start;
        while state.step < self.cfg.time.n_steps {
            let (next, info) = self.macro_step(&state)?;
            check_finite(&next)?;
            state = next;
            let rec = self.record_for(&state, t0.elapsed().as_secs_f64(), info.eps_used)?;
            on_record(&rec).map_err(|e| with_step(e, state.step))?;
            records.push(rec);
            if self.cfg.checkpoint_every > 0 && state.step % self.cfg.checkpoint_every == 0 {
                on_checkpoint(&state, &rng).map_err(|e| with_step(e, state.step))?;
            }
        }
        Ok((state, records))
    }
}

/// Relative Frobenius change of the distribution over one macro step. The
/// tensor difference is measured through the orthogonalization cascade;
/// the Gram-chain inner product loses half the digits on near-equal
/// vectors.
fn rel_change(old: &IonState, new: &IonState) -> Result<f64> {
    match (old, new) {
        (IonState::Dense(a), IonState::Dense(b)) => {
            let mut num = 0.0;
            let mut den = 0.0;
            ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
                num += (y - x) * (y - x);
                den += x * x;
            });
            Ok((num / den).sqrt())
        }
        (IonState::Tt(a), IonState::Tt(b)) => {
            let mut diff = TtVector::axpy(-1.0, a, b)?;
            Ok(diff.orthogonalize_right() / a.norm())
        }
        _ => Err(Error::Numerical(
            "ion representation changed between steps".to_string(),
        )),
    }
}

fn check_finite(state: &SystemState) -> Result<()> {
    if !state.n_e.iter().all(|x| x.is_finite()) {
        return Err(Error::Numerical(format!(
            "electron density became non-finite at step {}",
            state.step
        )));
    }
    let norm = state.ion.norm();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!(
            "ion distribution became non-finite at step {}",
            state.step
        )));
    }
    Ok(())
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Io { context, source } => Error::Io {
            context: format!("step {step}: {context}"),
            source,
        },
        other => other,
    }
}
