//! Run configuration: a flat `key = value` text format, validation,
//! defaults, the canonical run-identity hash and the shipped presets.
//!
//! The format is deliberately flat so presets diff line-by-line. `#` starts
//! a comment, blank lines are ignored, keys may appear in any order but at
//! most once. Unknown keys are rejected with their line number so typos
//! cannot silently fall back to defaults.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::physics::{
    derive_scales, validate_grid, validate_time, validate_tolerance, DerivedScales, GridSpec,
    PhysicalParams, TimeSpec, ToleranceSpec,
};

/// Which ion solver(s) a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    Tt,
    Dense,
    Both,
}

impl Backend {
    pub fn parse(s: &str) -> Result<Backend> {
        match s {
            "tt" => Ok(Backend::Tt),
            "dense" => Ok(Backend::Dense),
            "both" => Ok(Backend::Both),
            other => Err(Error::Config(format!(
                "backend must be one of tt, dense, both; got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::Tt => "tt",
            Backend::Dense => "dense",
            Backend::Both => "both",
        }
    }
}

/// Initial noise specification: seeded white Gaussian perturbations on both
/// densities, scaled so the startup field strength hits `target_ratio` of
/// the background field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub seed: u64,
    /// Calibrated E_add / E_0 of the initial state.
    pub target_ratio: f64,
}

/// Analysis windows for the statistical outputs, in physical seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatWindows {
    /// Time-average window.
    pub avg_start_s: f64,
    pub avg_end_s: f64,
    /// Peak-search window.
    pub max_start_s: f64,
    pub max_end_s: f64,
    /// Earliest time eligible for saturation-onset detection.
    pub onset_min_s: f64,
    /// Width of the moving-average filter applied before differencing.
    pub smooth_samples: usize,
}

/// Everything a run needs, parsed and validated. Equality is field-wise;
/// two configs with equal [`SimConfig::hash`] produce the same trajectory
/// (I/O-only settings are excluded from the hash).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub params: PhysicalParams,
    pub grid: GridSpec,
    pub time: TimeSpec,
    pub tol: ToleranceSpec,
    pub init: InitSpec,
    /// Residual directions added per bond and sweep in the approximate
    /// operator apply.
    pub amen_kick: usize,
    /// Sweep cap for the approximate operator apply.
    pub amen_sweeps: usize,
    pub stats: StatWindows,
    pub backend: Backend,
    pub out_dir: String,
    /// Steps between checkpoints; 0 disables checkpointing.
    pub checkpoint_every: usize,
}

/// Text of the shipped full-size preset (also at presets/ in the repo).
pub const PAPER_MODIFIED_MASS: &str = include_str!("../../../presets/paper_modified_mass.cfg");

const REQUIRED_KEYS: &[&str] = &[
    "T_i", "T_e", "E_0", "B_0", "n_0", "m_i", "nu_in", "psi", "theta", "L", "v_max", "n_x", "n_v",
    "tau", "n_steps",
];

const OPTIONAL_KEYS: &[&str] = &[
    "m_e",
    "e",
    "eps_0",
    "poisson_scale",
    "N_ext",
    "eps_initial",
    "eps_floor",
    "eps_factor",
    "seed",
    "target_ratio",
    "amen_kick",
    "amen_sweeps",
    "stat_avg_start",
    "stat_avg_end",
    "stat_max_start",
    "stat_max_end",
    "stat_onset_min",
    "stat_smooth_samples",
    "backend",
    "out_dir",
    "checkpoint_every",
];

/// Keys that do not affect the computed trajectory or its statistics and
/// are therefore left out of the run-identity hash. `n_steps` only says
/// where to stop; a shorter run is a bit-exact prefix of a longer one, so
/// resuming a checkpoint to extend a run keeps the same identity.
const HASH_EXCLUDED_KEYS: &[&str] = &["backend", "out_dir", "checkpoint_every", "n_steps"];

struct RawConfig {
    /// key -> (line number, value text)
    entries: HashMap<String, (usize, String)>,
}

/// Collects both the entry map and the structural errors so a single parse
/// reports every problem in the file at once.
fn parse_raw(text: &str) -> (RawConfig, Vec<String>) {
    let mut entries: HashMap<String, (usize, String)> = HashMap::new();
    let mut errs = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errs.push(format!("line {lineno}: expected `key = value`, got {line:?}"));
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            errs.push(format!("line {lineno}: expected `key = value`, got {line:?}"));
            continue;
        }
        if !REQUIRED_KEYS.contains(&key) && !OPTIONAL_KEYS.contains(&key) {
            errs.push(format!("line {lineno}: unknown key {key:?}"));
            continue;
        }
        if let Some((first, _)) = entries.get(key) {
            errs.push(format!(
                "line {lineno}: duplicate key {key:?} (first set on line {first})"
            ));
            continue;
        }
        entries.insert(key.to_string(), (lineno, value.to_string()));
    }
    (RawConfig { entries }, errs)
}

impl RawConfig {
    fn req_f64(&self, key: &str, errs: &mut Vec<String>) -> f64 {
        match self.entries.get(key) {
            Some((lineno, v)) => v.parse().unwrap_or_else(|_| {
                errs.push(format!("line {lineno}: {key} must be a number, got {v:?}"));
                f64::NAN
            }),
            None => {
                errs.push(format!("missing required key {key:?}"));
                f64::NAN
            }
        }
    }

    fn req_usize(&self, key: &str, errs: &mut Vec<String>) -> usize {
        match self.entries.get(key) {
            Some((lineno, v)) => v.parse().unwrap_or_else(|_| {
                errs.push(format!(
                    "line {lineno}: {key} must be a non-negative integer, got {v:?}"
                ));
                0
            }),
            None => {
                errs.push(format!("missing required key {key:?}"));
                0
            }
        }
    }

    fn opt_f64(&self, key: &str, default: f64, errs: &mut Vec<String>) -> f64 {
        match self.entries.get(key) {
            Some((lineno, v)) => v.parse().unwrap_or_else(|_| {
                errs.push(format!("line {lineno}: {key} must be a number, got {v:?}"));
                f64::NAN
            }),
            None => default,
        }
    }

    fn opt_usize(&self, key: &str, default: usize, errs: &mut Vec<String>) -> usize {
        match self.entries.get(key) {
            Some((lineno, v)) => v.parse().unwrap_or_else(|_| {
                errs.push(format!(
                    "line {lineno}: {key} must be a non-negative integer, got {v:?}"
                ));
                default
            }),
            None => default,
        }
    }

    fn opt_u64(&self, key: &str, default: u64, errs: &mut Vec<String>) -> u64 {
        match self.entries.get(key) {
            Some((lineno, v)) => v.parse().unwrap_or_else(|_| {
                errs.push(format!(
                    "line {lineno}: {key} must be a non-negative integer, got {v:?}"
                ));
                default
            }),
            None => default,
        }
    }
}

/// Parses and validates a configuration from text. Defaults are filled in
/// for every omitted optional key; [`SimConfig::to_config_string`] echoes
/// the fully resolved result.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    let (raw, mut errs) = parse_raw(text);
    let params = PhysicalParams {
        t_i: raw.req_f64("T_i", &mut errs),
        t_e: raw.req_f64("T_e", &mut errs),
        e_0: raw.req_f64("E_0", &mut errs),
        b_0: raw.req_f64("B_0", &mut errs),
        n_0: raw.req_f64("n_0", &mut errs),
        m_i: raw.req_f64("m_i", &mut errs),
        // Real electron mass; experiment presets override it.
        m_e: raw.opt_f64("m_e", 9.1093826e-31, &mut errs),
        nu_in: raw.req_f64("nu_in", &mut errs),
        psi: raw.req_f64("psi", &mut errs),
        theta: raw.req_f64("theta", &mut errs),
        charge: raw.opt_f64("e", 1.60217653e-19, &mut errs),
        eps_0: raw.opt_f64("eps_0", 8.85418781e-12, &mut errs),
        poisson_scale: raw.opt_f64("poisson_scale", 1.0, &mut errs),
    };
    let grid = GridSpec {
        n_x: raw.req_usize("n_x", &mut errs),
        n_v: raw.req_usize("n_v", &mut errs),
        l_domain: raw.req_f64("L", &mut errs),
        v_max: raw.req_f64("v_max", &mut errs),
    };
    let time = TimeSpec {
        tau: raw.req_f64("tau", &mut errs),
        n_steps: raw.req_usize("n_steps", &mut errs),
        n_ext: raw.opt_usize("N_ext", 40, &mut errs),
    };
    let tol = ToleranceSpec {
        eps_initial: raw.opt_f64("eps_initial", 1e-3, &mut errs),
        eps_floor: raw.opt_f64("eps_floor", 1e-8, &mut errs),
        eps_factor: raw.opt_f64("eps_factor", 0.05, &mut errs),
    };
    let init = InitSpec {
        seed: raw.opt_u64("seed", 1, &mut errs),
        target_ratio: raw.opt_f64("target_ratio", 0.1, &mut errs),
    };
    let amen_kick = raw.opt_usize("amen_kick", 4, &mut errs);
    let amen_sweeps = raw.opt_usize("amen_sweeps", 4, &mut errs);
    let stats = StatWindows {
        avg_start_s: raw.opt_f64("stat_avg_start", 0.03, &mut errs),
        avg_end_s: raw.opt_f64("stat_avg_end", 0.05, &mut errs),
        max_start_s: raw.opt_f64("stat_max_start", 0.015, &mut errs),
        max_end_s: raw.opt_f64("stat_max_end", 0.03, &mut errs),
        onset_min_s: raw.opt_f64("stat_onset_min", 0.01, &mut errs),
        smooth_samples: raw.opt_usize("stat_smooth_samples", 5, &mut errs),
    };
    let backend = match raw.entries.get("backend") {
        Some((lineno, v)) => Backend::parse(v).unwrap_or_else(|err| {
            errs.push(format!("line {lineno}: {err}"));
            Backend::Tt
        }),
        None => Backend::Tt,
    };
    let out_dir = raw
        .entries
        .get("out_dir")
        .map(|(_, v)| v.clone())
        .unwrap_or_else(|| "out".to_string());
    let checkpoint_every = raw.opt_usize("checkpoint_every", 500, &mut errs);
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let cfg = SimConfig {
        params,
        grid,
        time,
        tol,
        init,
        amen_kick,
        amen_sweeps,
        stats,
        backend,
        out_dir,
        checkpoint_every,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<SimConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|err| Error::io(format!("reading config {}", path.display()), err))?;
    parse_config(&text).map_err(|err| match err {
        Error::Validation(list) => Error::Validation(
            list.into_iter()
                .map(|m| format!("{}: {m}", path.display()))
                .collect(),
        ),
        other => other,
    })
}

impl SimConfig {
    /// The shipped full-size experiment preset.
    pub fn paper_modified_mass() -> SimConfig {
        parse_config(PAPER_MODIFIED_MASS).expect("shipped preset must parse")
    }

    pub fn scales(&self) -> Result<DerivedScales> {
        derive_scales(&self.params)
    }

    /// Physical seconds covered by the whole run.
    pub fn duration_s(&self) -> f64 {
        self.time.n_steps as f64 * self.time.tau / self.params.nu_in
    }

    /// Aggregates every static validation; the state-dependent Courant
    /// checks stay with the propagators.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [
            derive_scales(&self.params).map(|_| ()),
            validate_grid(&self.grid),
            validate_time(&self.time),
            validate_tolerance(&self.tol),
        ] {
            if let Err(Error::Validation(list)) = r {
                errs.extend(list);
            }
        }
        if !(self.init.target_ratio > 0.0) || !self.init.target_ratio.is_finite() {
            errs.push(format!(
                "target_ratio must be positive and finite, got {}",
                self.init.target_ratio
            ));
        }
        if self.amen_kick == 0 {
            errs.push("amen_kick must be >= 1".to_string());
        }
        if self.amen_sweeps == 0 {
            errs.push("amen_sweeps must be >= 1".to_string());
        }
        let s = &self.stats;
        if !(s.avg_start_s < s.avg_end_s) {
            errs.push(format!(
                "need stat_avg_start < stat_avg_end, got {} and {}",
                s.avg_start_s, s.avg_end_s
            ));
        }
        if !(s.max_start_s < s.max_end_s) {
            errs.push(format!(
                "need stat_max_start < stat_max_end, got {} and {}",
                s.max_start_s, s.max_end_s
            ));
        }
        if !(s.onset_min_s >= 0.0) {
            errs.push(format!(
                "stat_onset_min must be >= 0, got {}",
                s.onset_min_s
            ));
        }
        if s.smooth_samples == 0 {
            errs.push("stat_smooth_samples must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Every key with its canonical value text, in the documented order.
    fn canonical_entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.params;
        let g = &self.grid;
        let t = &self.time;
        let tol = &self.tol;
        let s = &self.stats;
        vec![
            ("T_i", format!("{:?}", p.t_i)),
            ("T_e", format!("{:?}", p.t_e)),
            ("E_0", format!("{:?}", p.e_0)),
            ("B_0", format!("{:?}", p.b_0)),
            ("n_0", format!("{:?}", p.n_0)),
            ("m_i", format!("{:?}", p.m_i)),
            ("m_e", format!("{:?}", p.m_e)),
            ("nu_in", format!("{:?}", p.nu_in)),
            ("psi", format!("{:?}", p.psi)),
            ("theta", format!("{:?}", p.theta)),
            ("e", format!("{:?}", p.charge)),
            ("eps_0", format!("{:?}", p.eps_0)),
            ("poisson_scale", format!("{:?}", p.poisson_scale)),
            ("L", format!("{:?}", g.l_domain)),
            ("v_max", format!("{:?}", g.v_max)),
            ("n_x", g.n_x.to_string()),
            ("n_v", g.n_v.to_string()),
            ("tau", format!("{:?}", t.tau)),
            ("n_steps", t.n_steps.to_string()),
            ("N_ext", t.n_ext.to_string()),
            ("eps_initial", format!("{:?}", tol.eps_initial)),
            ("eps_floor", format!("{:?}", tol.eps_floor)),
            ("eps_factor", format!("{:?}", tol.eps_factor)),
            ("seed", self.init.seed.to_string()),
            ("target_ratio", format!("{:?}", self.init.target_ratio)),
            ("amen_kick", self.amen_kick.to_string()),
            ("amen_sweeps", self.amen_sweeps.to_string()),
            ("stat_avg_start", format!("{:?}", s.avg_start_s)),
            ("stat_avg_end", format!("{:?}", s.avg_end_s)),
            ("stat_max_start", format!("{:?}", s.max_start_s)),
            ("stat_max_end", format!("{:?}", s.max_end_s)),
            ("stat_onset_min", format!("{:?}", s.onset_min_s)),
            ("stat_smooth_samples", s.smooth_samples.to_string()),
            ("backend", self.backend.as_str().to_string()),
            ("out_dir", self.out_dir.clone()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    /// Re-serializes the fully resolved configuration; parsing the result
    /// reproduces `self` exactly.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.canonical_entries() {
            writeln!(out, "{key} = {value}").expect("string write");
        }
        out
    }

    /// Hex SHA-256 over the sorted trajectory-defining keys. Stable under
    /// key reordering and comment changes in the source file; identical for
    /// runs that differ only in backend, output directory, checkpoint
    /// cadence or step count, so cross-backend comparisons can verify they
    /// saw one run and checkpoints can extend a finished run.
    pub fn hash(&self) -> String {
        let mut entries: Vec<(&str, String)> = self
            .canonical_entries()
            .into_iter()
            .filter(|(k, _)| !HASH_EXCLUDED_KEYS.contains(k))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut hasher = Sha256::new();
        for (key, value) in entries {
            hasher.update(key.as_bytes());
            hasher.update(b"=");
            hasher.update(value.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            write!(hex, "{byte:02x}").expect("string write");
        }
        hex
    }
}
