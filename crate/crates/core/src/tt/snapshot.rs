//! Binary on-disk format for TT vectors.
//!
//! Layout, all little-endian:
//!   magic "FBTT", version u32, d u64, mode sizes d x u64,
//!   ranks (d+1) x u64, then each core as f64 values in row-major
//!   (r_{k-1}, n_k, r_k) order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

use super::TtVector;

const MAGIC: &[u8; 4] = b"FBTT";
const VERSION: u32 = 1;

pub fn write_tt(path: &Path, tt: &TtVector) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let ctx = || format!("write {}", path.display());
    let io = |e| Error::io(ctx(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(tt.d() as u64).to_le_bytes()).map_err(io)?;
    for n in tt.mode_sizes() {
        w.write_all(&(n as u64).to_le_bytes()).map_err(io)?;
    }
    for r in tt.ranks() {
        w.write_all(&(r as u64).to_le_bytes()).map_err(io)?;
    }
    for core in tt.cores() {
        for v in core.as_standard_layout().iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_tt(path: &Path) -> Result<TtVector> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let fmt = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let io = |e| Error::io(format!("read {}", path.display()), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let d = u64::from_le_bytes(b8) as usize;
    if d == 0 || d > 64 {
        return Err(fmt(format!("implausible core count {d}")));
    }
    let read_u64 = |r: &mut BufReader<File>| -> Result<usize> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io)?;
        Ok(u64::from_le_bytes(b) as usize)
    };
    let mut modes = Vec::with_capacity(d);
    for _ in 0..d {
        modes.push(read_u64(&mut r)?);
    }
    let mut ranks = Vec::with_capacity(d + 1);
    for _ in 0..=d {
        ranks.push(read_u64(&mut r)?);
    }
    if ranks[0] != 1 || ranks[d] != 1 {
        return Err(fmt(format!("boundary ranks must be 1, got {ranks:?}")));
    }
    let mut cores = Vec::with_capacity(d);
    for k in 0..d {
        let len = ranks[k] * modes[k] * ranks[k + 1];
        let mut data = vec![0f64; len];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            *v = f64::from_le_bytes(b);
        }
        cores.push(
            Array3::from_shape_vec((ranks[k], modes[k], ranks[k + 1]), data)
                .map_err(|e| fmt(format!("core {k} shape: {e}")))?,
        );
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(fmt(format!("{} trailing bytes", rest.len())));
    }
    TtVector::new(cores)
}
