//! Command line driver.
//!
//! `run` simulates a configuration from its seeded initial state, `resume`
//! continues a checkpoint to the configured step count, `compare` puts the
//! summary statistics of two diagnostics traces side by side. Exit codes:
//! 0 success, 2 configuration problems, 3 numerical failures, 4 I/O and
//! file-format problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fbsim_core::checkpoint::{load_checkpoint, save_checkpoint};
use fbsim_core::config::{load_config, Backend, SimConfig};
use fbsim_core::diagnostics::{
    field_intensity, read_records_csv, summarize, write_field, write_records_csv,
    DiagnosticsRecord, StatSummary,
};
use fbsim_core::error::{Error, Result};
use fbsim_core::integrator::{Stepper, SystemState};

#[derive(Parser)]
#[command(
    name = "fbsim",
    version,
    about = "Farley-Buneman instability simulator (fluid electrons, kinetic ions)"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a configuration from its seeded initial state.
    Run(RunArgs),
    /// Continue a checkpointed run to the configured step count.
    Resume(ResumeArgs),
    /// Compare the summary statistics of two diagnostics traces.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for the dense kernels (1 gives a fixed reduction
    /// order). Defaults to the rayon heuristic.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override the configured backend.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Override the configured number of macro steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the configured noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the checkpoint cadence in steps (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct ResumeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint file from a run of the same configuration.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override the configured number of macro steps, e.g. to extend a
    /// finished run.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the checkpoint cadence in steps (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Configuration both traces were produced from.
    #[arg(long)]
    config: PathBuf,
    /// Two diagnostics CSV files.
    #[arg(num_args = 2, value_names = ["LEFT", "RIGHT"])]
    traces: Vec<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum BackendArg {
    Tt,
    Dense,
    Both,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Backend {
        match b {
            BackendArg::Tt => Backend::Tt,
            BackendArg::Dense => Backend::Dense,
            BackendArg::Both => Backend::Both,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Resume(a) => cmd_resume(a),
        Cmd::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fbsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be at least 1".to_string()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool setup failed: {e}")))
}

fn cmd_run(a: RunArgs) -> Result<()> {
    init_threads(a.common.threads)?;
    let mut cfg = load_config(&a.common.config)?;
    if let Some(b) = a.backend {
        cfg.backend = b.into();
    }
    if let Some(s) = a.steps {
        cfg.time.n_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.init.seed = s;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    if let Some(o) = a.common.out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let backends = match cfg.backend {
        Backend::Both => vec![Backend::Tt, Backend::Dense],
        single => vec![single],
    };
    for backend in backends {
        run_one(&cfg, backend)?;
    }
    Ok(())
}

/// Runs one backend and leaves its artifacts under `<out_dir>/<backend>/`.
fn run_one(cfg: &SimConfig, backend: Backend) -> Result<()> {
    let dir = backend_dir(cfg, backend)?;
    log::info!(
        "{}: {} macro steps ({:.4} s physical) into {}",
        backend.as_str(),
        cfg.time.n_steps,
        cfg.duration_s(),
        dir.display()
    );
    let mut stepper = Stepper::new(cfg)?;
    let ck_dir = dir.clone();
    let ck_cfg = cfg.clone();
    let (fin, records) = stepper.run(
        backend,
        |_| Ok(()),
        |state, rng| {
            let path = ck_dir.join(format!("checkpoint_{:06}.ck", state.step));
            save_checkpoint(&path, &ck_cfg, state, rng)
        },
    )?;
    write_artifacts(cfg, &dir, "trace.csv", &stepper, &fin, &records)
}

fn cmd_resume(a: ResumeArgs) -> Result<()> {
    init_threads(a.common.threads)?;
    let mut cfg = load_config(&a.common.config)?;
    if let Some(s) = a.steps {
        cfg.time.n_steps = s;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    if let Some(o) = a.common.out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let (state, rng) = load_checkpoint(&a.checkpoint, &cfg)?;
    let backend = if state.ion.is_tt() {
        Backend::Tt
    } else {
        Backend::Dense
    };
    let start = state.step;
    if start >= cfg.time.n_steps {
        log::warn!(
            "checkpoint is already at step {start}, nothing beyond the configured {} to do",
            cfg.time.n_steps
        );
    }
    let dir = backend_dir(&cfg, backend)?;
    log::info!(
        "{}: resuming step {start} -> {} into {}",
        backend.as_str(),
        cfg.time.n_steps,
        dir.display()
    );
    let mut stepper = Stepper::new(&cfg)?;
    let ck_dir = dir.clone();
    let ck_cfg = cfg.clone();
    let (fin, records) = stepper.continue_run(
        state,
        rng,
        |_| Ok(()),
        |state, rng| {
            let path = ck_dir.join(format!("checkpoint_{:06}.ck", state.step));
            save_checkpoint(&path, &ck_cfg, state, rng)
        },
    )?;
    // A fresh trace name keeps the original run's records unharmed.
    let trace = format!("trace_from_{start:06}.csv");
    write_artifacts(&cfg, &dir, &trace, &stepper, &fin, &records)
}

fn backend_dir(cfg: &SimConfig, backend: Backend) -> Result<PathBuf> {
    let dir = Path::new(&cfg.out_dir).join(backend.as_str());
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(format!("create output directory {}", dir.display()), e))?;
    Ok(dir)
}

/// Trace CSV, resolved config echo, and final-state fields: electron
/// density, a fresh potential of the recorded densities, and the squared
/// spectral field intensity. Every artifact embeds the run-identity hash.
fn write_artifacts(
    cfg: &SimConfig,
    dir: &Path,
    trace_name: &str,
    stepper: &Stepper,
    fin: &SystemState,
    records: &[DiagnosticsRecord],
) -> Result<()> {
    let hash = cfg.hash();
    write_records_csv(records, dir.join(trace_name), &hash)?;
    let echo = dir.join("config.cfg");
    std::fs::write(&echo, cfg.to_config_string())
        .map_err(|e| Error::io(format!("write {}", echo.display()), e))?;
    write_field(&fin.n_e, dir.join("n_e.f64"), &hash)?;
    let phi = stepper.potential_of(fin)?;
    write_field(&phi, dir.join("phi.f64"), &hash)?;
    let e_sq = field_intensity(&phi, stepper.spectral());
    write_field(&e_sq, dir.join("e_sq.f64"), &hash)?;
    match summarize(records, &cfg.stats) {
        Ok(s) => print_summary_table(&[("this run", &s)]),
        Err(e) => log::info!("no summary ({e})"),
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let want = cfg.hash();
    let (left_hash, left) = read_records_csv(&a.traces[0])?;
    let (right_hash, right) = read_records_csv(&a.traces[1])?;
    for (path, hash) in [(&a.traces[0], &left_hash), (&a.traces[1], &right_hash)] {
        if hash != &want {
            return Err(Error::Config(format!(
                "trace {} comes from config {hash}, but {} hashes to {want}; refusing to compare",
                path.display(),
                a.config.display()
            )));
        }
    }
    let ls = summarize(&left, &cfg.stats)?;
    let rs = summarize(&right, &cfg.stats)?;
    print_summary_table(&[("left", &ls), ("right", &rs)]);
    println!(
        "{:<12} {:>14.6e}",
        "trace_dev",
        trace_deviation(&left, &right)
    );
    Ok(())
}

/// Largest relative per-step field-strength difference over shared steps.
fn trace_deviation(left: &[DiagnosticsRecord], right: &[DiagnosticsRecord]) -> f64 {
    let mut dev = 0.0f64;
    for l in left {
        if let Some(r) = right.iter().find(|r| r.step == l.step) {
            let scale = l.e_add.abs().max(r.e_add.abs()).max(f64::MIN_POSITIVE);
            dev = dev.max((l.e_add - r.e_add).abs() / scale);
        }
    }
    dev
}

fn print_summary_table(cols: &[(&str, &StatSummary)]) {
    print!("{:<12}", "metric");
    for (name, _) in cols {
        print!(" {name:>14}");
    }
    println!();
    for (label, get) in [
        ("avg_E_add", &(|s: &StatSummary| Some(s.avg_e_add)) as &dyn Fn(&StatSummary) -> Option<f64>),
        ("max_E_add", &|s: &StatSummary| Some(s.max_e_add)),
        ("onset_s", &|s: &StatSummary| s.onset_s),
    ] {
        print!("{label:<12}");
        for (_, s) in cols {
            match get(s) {
                Some(v) => print!(" {v:>14.6e}"),
                None => print!(" {:>14}", "-"),
            }
        }
        println!();
    }
}
