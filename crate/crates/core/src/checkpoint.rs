//! Resumable run snapshots.
//!
//! One checkpoint is one file: magic "FBCK", format version, a
//! length-prefixed JSON header (config echo + hash, step, tolerance, RNG
//! state, array shapes), then the state arrays as raw little-endian f64 in
//! row-major order. Loading refuses a file whose config hash differs from
//! the run it is being resumed into; everything else round-trips
//! bit-exactly, so a resumed dense run replays the uninterrupted
//! trajectory to the last bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::integrator::{IonState, SystemState};
use crate::tt::TtVector;

const MAGIC: &[u8; 4] = b"FBCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
enum IonMeta {
    Dense {
        shape: [usize; 4],
    },
    Tt {
        mode_sizes: Vec<usize>,
        ranks: Vec<usize>,
    },
}

/// JSON header; the payload layout is fully determined by it.
#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: String,
    config_hash: String,
    step: usize,
    eps_current: f64,
    rng: ChaCha8Rng,
    n_e_shape: [usize; 2],
    phi_shape: [usize; 2],
    ion: IonMeta,
}

fn write_f64s<'a, W: Write>(
    w: &mut W,
    vals: impl Iterator<Item = &'a f64>,
    ctx: &str,
) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(ctx.to_string(), e))?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, len: usize, ctx: &str) -> Result<Vec<f64>> {
    let mut data = vec![0f64; len];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|e| Error::io(ctx.to_string(), e))?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(data)
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &SimConfig,
    state: &SystemState,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let ion = match &state.ion {
        IonState::Dense(f) => {
            let (a, b, c, d) = f.dim();
            IonMeta::Dense {
                shape: [a, b, c, d],
            }
        }
        IonState::Tt(f) => IonMeta::Tt {
            mode_sizes: f.mode_sizes(),
            ranks: f.ranks(),
        },
    };
    let header = Header {
        config: cfg.to_config_string(),
        config_hash: cfg.hash(),
        step: state.step,
        eps_current: state.eps_current,
        rng: rng.clone(),
        n_e_shape: [state.n_e.dim().0, state.n_e.dim().1],
        phi_shape: [state.phi.dim().0, state.phi.dim().1],
        ion,
    };
    let meta = serde_json::to_vec(&header)
        .map_err(|e| Error::Config(format!("encode checkpoint header: {e}")))?;

    let ctx = format!("write checkpoint {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx.clone(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(ctx.clone(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&meta).map_err(io)?;
    write_f64s(&mut w, state.n_e.iter(), &ctx)?;
    write_f64s(&mut w, state.phi.iter(), &ctx)?;
    match &state.ion {
        IonState::Dense(f) => write_f64s(&mut w, f.iter(), &ctx)?,
        IonState::Tt(f) => {
            for core in f.cores() {
                let std = core.as_standard_layout();
                write_f64s(&mut w, std.iter(), &ctx)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Restores a state saved by [`save_checkpoint`]. `cfg` is the
/// configuration of the resuming run; a hash mismatch (different physics,
/// grid, schedule or seed) is refused rather than silently mixing
/// trajectories.
pub fn load_checkpoint(path: &Path, cfg: &SimConfig) -> Result<(SystemState, ChaCha8Rng)> {
    let ctx = format!("read checkpoint {}", path.display());
    let fmt = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::io(ctx.clone(), e))?;
    if &magic != MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| Error::io(ctx.clone(), e))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|e| Error::io(ctx.clone(), e))?;
    let meta_len = u64::from_le_bytes(b8) as usize;
    if meta_len == 0 || meta_len > 1 << 24 {
        return Err(fmt(format!("implausible header length {meta_len}")));
    }
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)
        .map_err(|e| Error::io(ctx.clone(), e))?;
    let header: Header =
        serde_json::from_slice(&meta).map_err(|e| fmt(format!("header: {e}")))?;

    if header.config_hash != cfg.hash() {
        return Err(fmt(format!(
            "checkpoint belongs to config {} but the run is configured as {}; refusing to resume",
            header.config_hash,
            cfg.hash()
        )));
    }

    let [nr, nc] = header.n_e_shape;
    let n_e = Array2::from_shape_vec((nr, nc), read_f64s(&mut r, nr * nc, &ctx)?)
        .map_err(|e| fmt(format!("n_e shape: {e}")))?;
    let [pr, pc] = header.phi_shape;
    let phi = Array2::from_shape_vec((pr, pc), read_f64s(&mut r, pr * pc, &ctx)?)
        .map_err(|e| fmt(format!("phi shape: {e}")))?;
    let ion = match &header.ion {
        IonMeta::Dense { shape } => {
            let len = shape.iter().product();
            let f = Array4::from_shape_vec(
                (shape[0], shape[1], shape[2], shape[3]),
                read_f64s(&mut r, len, &ctx)?,
            )
            .map_err(|e| fmt(format!("distribution shape: {e}")))?;
            IonState::Dense(f)
        }
        IonMeta::Tt { mode_sizes, ranks } => {
            if ranks.len() != mode_sizes.len() + 1 {
                return Err(fmt(format!(
                    "rank list length {} does not fit {} modes",
                    ranks.len(),
                    mode_sizes.len()
                )));
            }
            let mut cores = Vec::with_capacity(mode_sizes.len());
            for k in 0..mode_sizes.len() {
                let dims = (ranks[k], mode_sizes[k], ranks[k + 1]);
                let len = dims.0 * dims.1 * dims.2;
                let core = Array3::from_shape_vec(dims, read_f64s(&mut r, len, &ctx)?)
                    .map_err(|e| fmt(format!("core {k} shape: {e}")))?;
                cores.push(core);
            }
            IonState::Tt(TtVector::new(cores)?)
        }
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)
        .map_err(|e| Error::io(ctx.clone(), e))?;
    if !rest.is_empty() {
        return Err(fmt(format!("{} trailing bytes", rest.len())));
    }

    Ok((
        SystemState {
            n_e,
            ion,
            phi,
            step: header.step,
            eps_current: header.eps_current,
        },
        header.rng,
    ))
}
