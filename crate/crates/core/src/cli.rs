//! The `dynct` command-line pipeline.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 I/O or corrupt
//! file, 3 solver failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use std::fmt::Write as _;

use crate::config::{RunConfig, TableCell};
use crate::error::{Error, Result};
use crate::geometry::BlockDiagonalOperator;
use crate::io::{self, FlowFile, ImageFile, Meta, SinogramFile};
use crate::metrics::{self, MetricReport};
use crate::phantom;
use crate::schedule::AngleSchedule;
use crate::sequence::ImageSequence;
use crate::solver::{self, Fidelity, JointResult, SolverParams};

pub const SINOGRAM_FILE: &str = "sinogram.dct";
pub const TRUTH_FILE: &str = "ground_truth.dct";
pub const SCHEDULE_FILE: &str = "schedule.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const RECON_FILE: &str = "reconstruction.dct";
pub const FLOW_FILE: &str = "flow.dct";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TOML: &str = "metrics.toml";
pub const TABLE_FILE: &str = "table.csv";

pub const OUT_DIR_ENV: &str = "DYNCT_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "dynct", version, about = "Joint motion and image reconstruction for dynamic CT")]
pub struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML). Built-in pinball defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sampling protocol, e.g. randomized, tracking, small_increments_2.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Data fidelity.
    #[arg(long, value_parser = ["l1", "l2"])]
    pub fidelity: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the phantom and simulate its noisy sinogram.
    Simulate(Common),
    /// Reconstruct images and flow from a sinogram file.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Sinogram file; defaults to the one in the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compare a reconstruction with ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Row label in the report.
        #[arg(long, default_value = "reconstruction")]
        label: String,
    },
    /// Run simulate, reconstruct and evaluate for every table cell.
    Table(Common),
    /// Print an angle schedule.
    Schedule(Common),
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::DimensionMismatch(_) | Error::Config(_) => 1,
        Error::Io { .. } | Error::CorruptFile { .. } => 2,
        Error::NoConvergence { .. } | Error::SolverAbort(_) => 3,
    }
}

/// Parses `args` and runs the command; returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => Err(Error::invalid("--threads must be at least 1")),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::invalid(format!("cannot start thread pool: {e}")))?;
            pool.install(|| dispatch(cli.command))
        }
        None => dispatch(cli.command),
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(c) => {
            let (cfg, out) = resolve(&c)?;
            let line = cmd_simulate(&cfg, &out)?;
            println!("{line}");
        }
        Command::Reconstruct { common, input } => {
            let (cfg, out) = resolve(&common)?;
            let input = input.unwrap_or_else(|| out.join(SINOGRAM_FILE));
            let explicit_config = common.config.is_some();
            let res = cmd_reconstruct(&input, &cfg, explicit_config, &out)?;
            println!(
                "reconstructed {} frames and {} flow fields in {} outer iterations{}",
                res.u.n_t(),
                res.v.n_fields(),
                res.energy_trace.len(),
                if res.converged { "" } else { " (outer_max_iters reached)" }
            );
        }
        Command::Evaluate {
            common,
            recon,
            truth,
            label,
        } => {
            let (_, out) = resolve(&common)?;
            let r = cmd_evaluate(&recon, &truth, &label, &out)?;
            println!("rel_l1 {} rel_l2 {} ssim {}", r.rel_l1, r.rel_l2, r.ssim);
        }
        Command::Table(c) => {
            let (cfg, out) = resolve(&c)?;
            let rows = cmd_table(&cfg, &out)?;
            print!("{}", table_csv(&rows));
        }
        Command::Schedule(c) => {
            let (cfg, _) = resolve(&c)?;
            print!("{}", io::schedule_to_toml(&cfg.schedule()?)?);
        }
    }
    Ok(())
}

/// Applies command-line overrides to the configuration.
pub fn resolve(c: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = &c.protocol {
        cfg.schedule.protocol = p.clone();
    }
    if let Some(f) = &c.fidelity {
        cfg.solver.fidelity = Fidelity::parse(f)?;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// In-memory result of a simulation.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub truth: ImageSequence,
    pub schedule: AngleSchedule,
    pub sinogram: SinogramFile,
}

/// Simulates the configured phantom under protocol `protocol`.
pub fn simulate(cfg: &RunConfig, protocol: &str) -> Result<Simulation> {
    let truth = phantom::ground_truth(&cfg.phantom)?;
    simulate_with_truth(cfg, protocol, truth)
}

fn simulate_with_truth(cfg: &RunConfig, protocol: &str, truth: ImageSequence) -> Result<Simulation> {
    let grid = cfg.grid_spec()?;
    let det = cfg.detector_spec()?;
    let schedule = cfg.schedule_for(protocol)?;
    let stack = phantom::simulate_sinogram(&cfg.phantom, &schedule, &grid, &det, cfg.noise_level, cfg.noise_seed())?;
    let mut extra = Meta::new();
    extra.insert("noise_reference".into(), "max of clean supersampled sinogram".into());
    extra.insert("supersample".into(), cfg.phantom.supersample.to_string());
    Ok(Simulation {
        truth,
        sinogram: SinogramFile {
            grid,
            detector: det,
            protocol: schedule.label.clone(),
            schedule_seed: schedule.seed,
            extra,
            stack,
        },
        schedule,
    })
}

/// Writes sinogram, ground truth, schedule and the effective config to
/// `out`; returns a one-line summary.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let sim = simulate(cfg, &cfg.schedule.protocol)?;
    ensure_dir(out)?;
    io::write_sinogram(&out.join(SINOGRAM_FILE), &sim.sinogram)?;
    let mut meta = Meta::new();
    meta.insert("content".into(), "ground_truth".into());
    io::write_images(
        &out.join(TRUTH_FILE),
        &ImageFile {
            meta,
            images: sim.truth,
        },
    )?;
    io::write_schedule(&out.join(SCHEDULE_FILE), &sim.schedule)?;
    io::write_atomic(&out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    let st = &sim.sinogram.stack;
    Ok(format!(
        "simulated {} steps, {} rays, noise_level {} (protocol {}, seed {})",
        st.n_t(),
        st.total_rays(),
        st.noise_level,
        sim.sinogram.protocol,
        sim.sinogram.schedule_seed.map_or("none".to_string(), |s| s.to_string())
    ))
}

/// Runs the (optionally multiscale) joint solver on a sinogram file.
pub fn reconstruct(file: &SinogramFile, params: &SolverParams) -> Result<JointResult> {
    let per_step: Vec<Vec<f64>> = file.stack.steps.iter().map(|s| s.angles.clone()).collect();
    let op = BlockDiagonalOperator::build(&file.grid, &file.detector, &per_step)?;
    solver::joint_solve_pyramid(&op, &file.stack, params)
}

/// Reads `input`, reconstructs, and writes images, flow and trace to `out`.
/// With `check_geometry`, the file's grid and detector must match `cfg`.
pub fn cmd_reconstruct(input: &Path, cfg: &RunConfig, check_geometry: bool, out: &Path) -> Result<JointResult> {
    let file = io::read_sinogram(input)?;
    if check_geometry {
        let (g, d) = (cfg.grid_spec()?, cfg.detector_spec()?);
        if g != file.grid || d != file.detector {
            return Err(Error::mismatch(format!(
                "geometry in {} ({:?}, {:?}) differs from config ({g:?}, {d:?})",
                input.display(),
                file.grid,
                file.detector
            )));
        }
    }
    let params = cfg.solver_params(cfg.solver.fidelity)?;
    let res = reconstruct(&file, &params)?;
    ensure_dir(out)?;
    let mut meta = Meta::new();
    meta.insert("content".into(), "reconstruction".into());
    meta.insert("fidelity".into(), params.fidelity.name().into());
    meta.insert("alpha".into(), format!("{:?}", params.alpha));
    meta.insert("beta".into(), format!("{:?}", params.beta));
    meta.insert("gamma".into(), format!("{:?}", params.gamma));
    meta.insert("protocol".into(), file.protocol.clone());
    meta.insert("converged".into(), res.converged.to_string());
    io::write_images(
        &out.join(RECON_FILE),
        &ImageFile {
            meta: meta.clone(),
            images: res.u.clone(),
        },
    )?;
    meta.insert("content".into(), "flow".into());
    io::write_flow(
        &out.join(FLOW_FILE),
        &FlowFile {
            meta,
            flow: res.v.clone(),
        },
    )?;
    io::write_atomic(&out.join(TRACE_FILE), io::trace_to_csv(&res.trace()).as_bytes())?;
    Ok(res)
}

/// Compares two image files and writes `metrics.csv` and `metrics.toml`.
pub fn cmd_evaluate(recon: &Path, truth: &Path, label: &str, out: &Path) -> Result<MetricReport> {
    let r = io::read_images(recon)?;
    let t = io::read_images(truth)?;
    let report = metrics::evaluate(label, &r.images, &t.images, None)?;
    ensure_dir(out)?;
    io::write_atomic(&out.join(METRICS_CSV), io::reports_to_csv(&[report.clone()]).as_bytes())?;
    io::write_atomic(&out.join(METRICS_TOML), io::report_to_toml(&[report.clone()])?.as_bytes())?;
    Ok(report)
}

/// Outcome of one table cell.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: TableCell,
    pub result: std::result::Result<CellReport, String>,
}

#[derive(Clone, Debug)]
pub struct CellReport {
    pub report: MetricReport,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// Simulates, reconstructs and evaluates one cell against `truth`.
pub fn run_cell(cfg: &RunConfig, cell: &TableCell, truth: &ImageSequence) -> Result<(CellReport, JointResult)> {
    let sim = simulate_with_truth(cfg, &cell.protocol, truth.clone())?;
    let params = cfg.solver_params(cell.fidelity)?;
    let res = reconstruct(&sim.sinogram, &params)?;
    let report = metrics::evaluate(&cell.label(), &res.u, truth, None)?;
    Ok((
        CellReport {
            report,
            outer_iterations: res.energy_trace.len(),
            converged: res.converged,
        },
        res,
    ))
}

/// Runs every configured cell (in parallel) and writes `table.csv`.
/// Failing cells are reported in the status column; the others still run.
pub fn cmd_table(cfg: &RunConfig, out: &Path) -> Result<Vec<CellOutcome>> {
    let rows = run_table(cfg)?;
    ensure_dir(out)?;
    io::write_atomic(&out.join(TABLE_FILE), table_csv(&rows).as_bytes())?;
    Ok(rows)
}

pub fn run_table(cfg: &RunConfig) -> Result<Vec<CellOutcome>> {
    if cfg.table.is_empty() {
        return Err(Error::Config("table has no cells".into()));
    }
    let truth = phantom::ground_truth(&cfg.phantom)?;
    Ok(cfg
        .table
        .par_iter()
        .map(|cell| CellOutcome {
            cell: cell.clone(),
            result: run_cell(cfg, cell, &truth).map(|r| r.0).map_err(|e| e.to_string()),
        })
        .collect())
}

pub const TABLE_COLUMNS: &str = "protocol,fidelity,rel_l1,rel_l2,ssim,outer_iterations,converged,status";

/// One row per cell; numbers use round-trip formatting.
pub fn table_csv(rows: &[CellOutcome]) -> String {
    let mut s = String::from(TABLE_COLUMNS);
    s.push('\n');
    for row in rows {
        let (p, f) = (&row.cell.protocol, row.cell.fidelity.name());
        match &row.result {
            Ok(c) => writeln!(
                s,
                "{p},{f},{:?},{:?},{:?},{},{},ok",
                c.report.rel_l1, c.report.rel_l2, c.report.ssim, c.outer_iterations, c.converged
            ),
            Err(e) => writeln!(s, "{p},{f},,,,,,failed: {}", e.replace([',', '\n'], ";")),
        }
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::invalid("x")), 1);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::io(Path::new("p"), std::io::Error::other("x"))), 2);
        assert_eq!(exit_code(&Error::SolverAbort("x".into())), 3);
    }

    #[test]
    fn usage_error_is_one() {
        assert_eq!(main_with_args(["dynct", "frobnicate"]), 1);
        assert_eq!(main_with_args(["dynct", "simulate", "--fidelity", "l3"]), 1);
    }

    #[test]
    fn failed_cells_are_marked() {
        let rows = vec![CellOutcome {
            cell: TableCell {
                protocol: "tracking".into(),
                fidelity: Fidelity::L2,
            },
            result: Err("boom, twice".into()),
        }];
        let csv = table_csv(&rows);
        assert_eq!(csv.lines().nth(1), Some("tracking,l2,,,,,,failed: boom; twice"));
    }
}
