//! Observables and their persistence: the additional-field strength, per-step
//! records, windowed statistics, CSV time series and raw-float field dumps.
//!
//! Every artifact starts with the run-identity hash so post-processing can
//! refuse to mix files from different runs. CSV floats use the shortest
//! round-trip representation, making the read/write cycle bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::StatWindows;
use crate::error::{Error, Result};
use crate::field::{gradient, Spectral2d};
use crate::physics::DerivedScales;
use crate::tt::TtVector;

/// One emitted sample of the run. For dense-backend records the rank fields
/// are 0 and `tt_cells` holds the full array cell count, so the ratio of
/// cell counts between backends is the memory reduction factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    /// Physical time of this step, seconds.
    pub t_phys_s: f64,
    /// Grid-mean additional field strength, V/m.
    pub e_add: f64,
    /// Grid-mean ion density.
    pub mean_ni: f64,
    pub rank1: usize,
    pub rank2: usize,
    /// Stored f64 cells of the distribution.
    pub tt_cells: usize,
    /// Cumulative wall time, seconds.
    pub cpu_s: f64,
    /// Truncation tolerance active at this step.
    pub eps: f64,
}

pub const CSV_HEADER: &str = "step,t_phys_s,E_add_V_per_m,mean_ni,rank1,rank2,tt_cells,cpu_s,eps";

impl DiagnosticsRecord {
    /// Record for a TT-backend step. Rechecks that the advertised storage
    /// formula n_x^2 r_1 + r_1 n_v r_2 + r_2 n_v matches the actual cores.
    #[allow(clippy::too_many_arguments)]
    pub fn for_tt(
        step: usize,
        t_phys_s: f64,
        e_add: f64,
        mean_ni: f64,
        f: &TtVector,
        n_x: usize,
        n_v: usize,
        cpu_s: f64,
        eps: f64,
    ) -> Result<DiagnosticsRecord> {
        let ranks = f.ranks();
        if f.d() != 3 || f.mode_sizes() != vec![n_x * n_x, n_v, n_v] {
            return Err(Error::Tt(format!(
                "diagnostics expect mode sizes [{}, {n_v}, {n_v}], got {:?}",
                n_x * n_x,
                f.mode_sizes()
            )));
        }
        let (r1, r2) = (ranks[1], ranks[2]);
        let formula = n_x * n_x * r1 + r1 * n_v * r2 + r2 * n_v;
        if formula != f.cell_count() {
            return Err(Error::Tt(format!(
                "storage formula {formula} disagrees with core sizes {}",
                f.cell_count()
            )));
        }
        Ok(DiagnosticsRecord {
            step,
            t_phys_s,
            e_add,
            mean_ni,
            rank1: r1,
            rank2: r2,
            tt_cells: formula,
            cpu_s,
            eps,
        })
    }

    /// Record for a dense-backend step.
    pub fn for_dense(
        step: usize,
        t_phys_s: f64,
        e_add: f64,
        mean_ni: f64,
        n_x: usize,
        n_v: usize,
        cpu_s: f64,
        eps: f64,
    ) -> DiagnosticsRecord {
        DiagnosticsRecord {
            step,
            t_phys_s,
            e_add,
            mean_ni,
            rank1: 0,
            rank2: 0,
            tt_cells: n_x * n_x * n_v * n_v,
            cpu_s,
            eps,
        }
    }
}

/// Grid mean of |grad phi| under periodic central differences, converted
/// from the dimensionless potential to V/m.
pub fn compute_e_add(phi: &Array2<f64>, h: f64, s: &DerivedScales) -> f64 {
    let (gx, gy) = gradient(phi, h);
    let mut acc = 0.0;
    ndarray::Zip::from(&gx).and(&gy).for_each(|&a, &b| {
        acc += (a * a + b * b).sqrt();
    });
    s.e_rescale * acc / (phi.len() as f64)
}

/// Squared spectral amplitudes of the in-plane field components derived
/// from the potential.
pub fn field_intensity(phi: &Array2<f64>, sp: &Spectral2d) -> Array2<f64> {
    let (ex, ey) = gradient(phi, sp.h());
    sp.spectral_intensity(&ex, &ey)
}

/// Windowed statistics of the E_add trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    /// Trapezoid time average over the averaging window, V/m.
    pub avg_e_add: f64,
    /// Maximum over the peak window, V/m.
    pub max_e_add: f64,
    /// First time after the onset threshold where the smoothed trace
    /// decreases; absent for traces that never turn over.
    pub onset_s: Option<f64>,
}

/// Sorts by step, drops duplicate steps and verifies times are
/// non-decreasing afterwards.
fn ordered_trace(records: &[DiagnosticsRecord]) -> Result<Vec<(f64, f64)>> {
    let mut recs: Vec<&DiagnosticsRecord> = records.iter().collect();
    recs.sort_by_key(|r| r.step);
    recs.dedup_by_key(|r| r.step);
    let trace: Vec<(f64, f64)> = recs.iter().map(|r| (r.t_phys_s, r.e_add)).collect();
    if trace.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Numerical(
            "diagnostics records are not time-ordered".to_string(),
        ));
    }
    Ok(trace)
}

/// Moving average with a window of `width` samples centered on each index
/// (shortened near the ends).
fn smooth(values: &[f64], width: usize) -> Vec<f64> {
    let left = (width - 1) / 2;
    let right = width / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Computes the windowed statistics of a time-ordered record list.
/// Duplicate steps are tolerated and ignored; both windows must lie inside
/// the recorded time span.
pub fn summarize(records: &[DiagnosticsRecord], w: &StatWindows) -> Result<StatSummary> {
    let trace = ordered_trace(records)?;
    if trace.len() < 2 {
        return Err(Error::Numerical(format!(
            "summarize needs at least 2 distinct records, got {}",
            trace.len()
        )));
    }
    let (t_first, t_last) = (trace[0].0, trace[trace.len() - 1].0);
    for (name, start, end) in [
        ("averaging", w.avg_start_s, w.avg_end_s),
        ("peak", w.max_start_s, w.max_end_s),
    ] {
        if start < t_first || end > t_last {
            return Err(Error::Numerical(format!(
                "{name} window [{start}, {end}] s lies outside the recorded span [{t_first}, {t_last}] s"
            )));
        }
    }

    let in_window = |a: f64, b: f64| {
        trace
            .iter()
            .filter(move |(t, _)| *t >= a - 1e-15 && *t <= b + 1e-15)
    };
    let avg: Vec<(f64, f64)> = in_window(w.avg_start_s, w.avg_end_s).copied().collect();
    if avg.len() < 2 {
        return Err(Error::Numerical(format!(
            "averaging window contains {} samples, need at least 2",
            avg.len()
        )));
    }
    let mut integral = 0.0;
    for pair in avg.windows(2) {
        integral += 0.5 * (pair[1].0 - pair[0].0) * (pair[0].1 + pair[1].1);
    }
    let avg_e_add = integral / (avg[avg.len() - 1].0 - avg[0].0);

    let max_e_add = in_window(w.max_start_s, w.max_end_s)
        .map(|(_, e)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max_e_add.is_finite() {
        return Err(Error::Numerical(
            "peak window contains no samples".to_string(),
        ));
    }

    let values: Vec<f64> = trace.iter().map(|(_, e)| *e).collect();
    let smoothed = smooth(&values, w.smooth_samples);
    let onset_s = (1..trace.len())
        .find(|&i| trace[i].0 > w.onset_min_s && smoothed[i] < smoothed[i - 1])
        .map(|i| trace[i].0);

    Ok(StatSummary {
        avg_e_add,
        max_e_add,
        onset_s,
    })
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Writes the record list as CSV: a `# config <hash>` tag line, the fixed
/// header, one row per record.
pub fn write_records_csv(
    records: &[DiagnosticsRecord],
    path: impl AsRef<Path>,
    config_hash: &str,
) -> Result<()> {
    let path = path.as_ref();
    let ctx = || format!("writing {}", path.display());
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    writeln!(out, "# config {config_hash}").map_err(|e| Error::io(ctx(), e))?;
    writeln!(out, "{CSV_HEADER}").map_err(|e| Error::io(ctx(), e))?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            fmt_f64(r.t_phys_s),
            fmt_f64(r.e_add),
            fmt_f64(r.mean_ni),
            r.rank1,
            r.rank2,
            r.tt_cells,
            fmt_f64(r.cpu_s),
            fmt_f64(r.eps),
        )
        .map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads a CSV produced by [`write_records_csv`]; returns the embedded
/// config hash and the records.
pub fn read_records_csv(path: impl AsRef<Path>) -> Result<(String, Vec<DiagnosticsRecord>)> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(format!("reading {name}"), e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |detail: String| Error::Format {
        path: name.clone(),
        detail,
    };
    let tag = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(format!("reading {name}"), e))?
        .ok_or_else(|| bad("empty file".to_string()))?;
    let hash = tag
        .strip_prefix("# config ")
        .ok_or_else(|| bad(format!("expected `# config <hash>` first line, got {tag:?}")))?
        .to_string();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(format!("reading {name}"), e))?
        .ok_or_else(|| bad("missing header row".to_string()))?;
    if header != CSV_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {name}"), e))?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(bad(format!(
                "row {}: expected 9 columns, got {}",
                idx + 3,
                cols.len()
            )));
        }
        let field = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|_| bad(format!("row {}: bad number {:?}", idx + 3, cols[i])))
        };
        let int = |i: usize| -> Result<usize> {
            cols[i]
                .parse()
                .map_err(|_| bad(format!("row {}: bad integer {:?}", idx + 3, cols[i])))
        };
        records.push(DiagnosticsRecord {
            step: int(0)?,
            t_phys_s: field(1)?,
            e_add: field(2)?,
            mean_ni: field(3)?,
            rank1: int(4)?,
            rank2: int(5)?,
            tt_cells: int(6)?,
            cpu_s: field(7)?,
            eps: field(8)?,
        });
    }
    Ok((hash, records))
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldSidecar {
    shape: [usize; 2],
    dtype: String,
    index_order: String,
    config: String,
}

/// Writes a 2D field as raw little-endian f64 (row-major, x fastest-varying
/// in memory order (x, y)) plus a JSON sidecar `<path>.json` describing
/// shape, dtype, index order and the config hash.
pub fn write_field(
    field: &Array2<f64>,
    path: impl AsRef<Path>,
    config_hash: &str,
) -> Result<()> {
    let path = path.as_ref();
    let ctx = || format!("writing {}", path.display());
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    for row in field.rows() {
        for &v in row {
            out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(ctx(), e))?;
        }
    }
    out.flush().map_err(|e| Error::io(ctx(), e))?;
    let sidecar = FieldSidecar {
        shape: [field.nrows(), field.ncols()],
        dtype: "f64le".to_string(),
        index_order: "row-major (x, y)".to_string(),
        config: config_hash.to_string(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("sidecar serialization: {e}"),
        })?;
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, json)
        .map_err(|e| Error::io(format!("writing {}", side_path.display()), e))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Reads a field written by [`write_field`]; returns the embedded config
/// hash and the array.
pub fn read_field(path: impl AsRef<Path>) -> Result<(String, Array2<f64>)> {
    let path = path.as_ref();
    let side_path = sidecar_path(path);
    let side_text = std::fs::read_to_string(&side_path)
        .map_err(|e| Error::io(format!("reading {}", side_path.display()), e))?;
    let sidecar: FieldSidecar = serde_json::from_str(&side_text).map_err(|e| Error::Format {
        path: side_path.display().to_string(),
        detail: e.to_string(),
    })?;
    if sidecar.dtype != "f64le" {
        return Err(Error::Format {
            path: side_path.display().to_string(),
            detail: format!("unsupported dtype {:?}", sidecar.dtype),
        });
    }
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let expect = sidecar.shape[0] * sidecar.shape[1] * 8;
    if bytes.len() != expect {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("expected {expect} bytes for shape {:?}, got {}", sidecar.shape, bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let arr = Array2::from_shape_vec((sidecar.shape[0], sidecar.shape[1]), values)
        .expect("shape/product consistency checked above");
    Ok((sidecar.config, arr))
}
