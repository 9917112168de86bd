//! Run configuration (TOML).
//!
//! A `RunConfig` fixes every input of the pipeline, so a run is a pure
//! function of it. Sub-seeds for the schedule and the noise come from the
//! global seed via [`derive_seed`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{DetectorSpec, GridSpec};
use crate::phantom::PhantomSpec;
use crate::schedule::{default_increment, AngleSchedule, Protocol};
use crate::solver::{Fidelity, SolverParams};

/// Largest seed representable in the TOML files (signed 64-bit integers).
pub const MAX_SEED: u64 = i64::MAX as u64;

/// Sub-seed for `label`: the first 8 bytes (LE) of SHA-256(label ‖ seed LE),
/// shifted right by one so it stays within [`MAX_SEED`].
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap()) >> 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    #[serde(default = "one")]
    pub pixel_size: f64,
    #[serde(default)]
    pub origin: [f64; 2],
}

fn one() -> f64 {
    1.0
}

/// Protocol name plus optional overrides of its default parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub protocol: String,
    /// Explicit schedule seed; derived from the global seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of steps; must equal the phantom's `n_t` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub increment: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantize: Option<usize>,
    /// Angles for the `custom` protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angles: Option<Vec<Vec<f64>>>,
}

impl ScheduleConfig {
    pub fn named(protocol: &str) -> Self {
        Self {
            protocol: protocol.to_string(),
            seed: None,
            n_t: None,
            increment: None,
            full_count: None,
            quantize: None,
            angles: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub fidelity: Fidelity,
    /// Weights used when the fidelity is L¹.
    pub l1: Weights,
    /// Weights used when the fidelity is L².
    pub l2: Weights,
    pub inner_max_iters: usize,
    pub inner_tol: f64,
    pub outer_max_iters: usize,
    pub outer_tol: f64,
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    pub pyramid_warps: usize,
    pub step_rule: f64,
    pub clamp_nonnegative: bool,
    pub norm_max_iters: usize,
    pub norm_tol: f64,
}

fn weights_of(p: &SolverParams) -> Weights {
    Weights {
        alpha: p.alpha,
        beta: p.beta,
        gamma: p.gamma,
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        let l1 = SolverParams::pinball(Fidelity::L1);
        let l2 = SolverParams::pinball(Fidelity::L2);
        Self {
            fidelity: Fidelity::L1,
            l1: weights_of(&l1),
            l2: weights_of(&l2),
            inner_max_iters: l1.inner_max_iters,
            inner_tol: l1.inner_tol,
            outer_max_iters: l1.outer_max_iters,
            outer_tol: l1.outer_tol,
            pyramid_levels: l1.pyramid_levels,
            pyramid_scale: l1.pyramid_scale,
            pyramid_warps: l1.pyramid_warps,
            step_rule: l1.step_rule,
            clamp_nonnegative: l1.clamp_nonnegative,
            norm_max_iters: l1.norm_max_iters,
            norm_tol: l1.norm_tol,
        }
    }
}

impl SolverConfig {
    pub fn params(&self, fidelity: Fidelity) -> SolverParams {
        let w = match fidelity {
            Fidelity::L1 => self.l1,
            Fidelity::L2 => self.l2,
        };
        SolverParams {
            fidelity,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            inner_max_iters: self.inner_max_iters,
            inner_tol: self.inner_tol,
            outer_max_iters: self.outer_max_iters,
            outer_tol: self.outer_tol,
            pyramid_levels: self.pyramid_levels,
            pyramid_scale: self.pyramid_scale,
            pyramid_warps: self.pyramid_warps,
            step_rule: self.step_rule,
            clamp_nonnegative: self.clamp_nonnegative,
            norm_max_iters: self.norm_max_iters,
            norm_tol: self.norm_tol,
        }
    }
}

/// One `(protocol, fidelity)` cell of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableCell {
    pub protocol: String,
    pub fidelity: Fidelity,
}

impl TableCell {
    pub fn label(&self) -> String {
        format!("{}/{}", self.protocol, self.fidelity.name())
    }
}

pub const TABLE_PROTOCOLS: [&str; 4] = ["small_increments_1", "small_increments_2", "tracking", "randomized"];

fn default_cells() -> Vec<TableCell> {
    TABLE_PROTOCOLS
        .iter()
        .flat_map(|p| {
            [Fidelity::L1, Fidelity::L2].map(|f| TableCell {
                protocol: p.to_string(),
                fidelity: f,
            })
        })
        .collect()
}

fn default_noise() -> f64 {
    0.01
}

fn default_seed() -> u64 {
    2018
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub grid: GridConfig,
    /// Defaults to [`DetectorSpec::covering`] the grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorSpec>,
    #[serde(default)]
    pub phantom: PhantomSpec,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_cells")]
    pub table: Vec<TableCell>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::pinball(42, 30)
    }
}

impl RunConfig {
    /// The pinball study on an `n × n × n_t` grid with a randomized schedule.
    pub fn pinball(n: usize, n_t: usize) -> Self {
        Self {
            seed: default_seed(),
            noise_level: default_noise(),
            out_dir: default_out(),
            grid: GridConfig {
                n,
                pixel_size: 1.0,
                origin: [0.0, 0.0],
            },
            detector: None,
            phantom: PhantomSpec::scaled(n, n_t),
            schedule: ScheduleConfig::named("randomized"),
            solver: SolverConfig::default(),
            table: default_cells(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = GridSpec {
            n: self.grid.n,
            pixel_size: self.grid.pixel_size,
            origin: self.grid.origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn detector_spec(&self) -> Result<DetectorSpec> {
        let g = self.grid_spec()?;
        let d = self.detector.unwrap_or_else(|| DetectorSpec::covering(&g));
        d.validate()?;
        Ok(d)
    }

    pub fn n_t(&self) -> usize {
        self.phantom.n_t
    }

    /// Sub-seed for the sinogram noise.
    pub fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, "noise")
    }

    /// Seed of a randomized schedule: explicit if set, otherwise derived.
    pub fn schedule_seed(&self) -> u64 {
        self.schedule.seed.unwrap_or_else(|| derive_seed(self.seed, "schedule"))
    }

    /// The protocol named by `name` with this config's parameter overrides.
    pub fn protocol(&self, name: &str) -> Result<Protocol> {
        let n_t = self.n_t();
        let mut p = Protocol::from_name(name, n_t)?;
        let s = &self.schedule;
        match &mut p {
            Protocol::SmallIncrements { increment, .. } => {
                *increment = s.increment.unwrap_or(default_increment(n_t));
            }
            Protocol::Tracking {
                full_count,
                increment,
            } => {
                *increment = s.increment.unwrap_or(default_increment(n_t));
                if let Some(c) = s.full_count {
                    *full_count = c;
                }
            }
            Protocol::Randomized { quantize } => *quantize = s.quantize,
            Protocol::Custom => {}
        }
        Ok(p)
    }

    /// Schedule for `name` (the configured protocol unless overridden).
    pub fn schedule_for(&self, name: &str) -> Result<AngleSchedule> {
        let n_t = self.n_t();
        let protocol = self.protocol(name)?;
        let sched = match protocol {
            Protocol::Custom => {
                let angles = self
                    .schedule
                    .angles
                    .clone()
                    .ok_or_else(|| Error::Config("schedule.angles is required for the custom protocol".into()))?;
                AngleSchedule::custom(angles)?
            }
            Protocol::Randomized { .. } => AngleSchedule::generate(&protocol, n_t, Some(self.schedule_seed()))?,
            _ => AngleSchedule::generate(&protocol, n_t, None)?,
        };
        if sched.n_t() != n_t {
            return Err(Error::Config(format!(
                "schedule length {} differs from phantom.n_t = {n_t}",
                sched.n_t()
            )));
        }
        Ok(sched)
    }

    pub fn schedule(&self) -> Result<AngleSchedule> {
        self.schedule_for(&self.schedule.protocol)
    }

    pub fn solver_params(&self, fidelity: Fidelity) -> Result<SolverParams> {
        let p = self.solver.params(fidelity);
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("seed", Some(self.seed)), ("schedule.seed", self.schedule.seed)] {
            if s.is_some_and(|s| s > MAX_SEED) {
                return Err(Error::Config(format!("{name} must be at most {MAX_SEED}")));
            }
        }
        let g = self.grid_spec()?;
        self.detector_spec()?;
        self.phantom.validate()?;
        if self.phantom.n != g.n {
            return Err(Error::Config(format!(
                "phantom.n = {} differs from grid.n = {}",
                self.phantom.n, g.n
            )));
        }
        if let Some(n_t) = self.schedule.n_t {
            if n_t != self.phantom.n_t {
                return Err(Error::Config(format!(
                    "schedule length {n_t} differs from phantom.n_t = {}",
                    self.phantom.n_t
                )));
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config(format!("noise_level must be >= 0, got {}", self.noise_level)));
        }
        self.schedule()?;
        self.solver_params(self.solver.fidelity)?;
        for cell in &self.table {
            self.protocol(&cell.protocol)?;
        }
        Ok(())
    }
}
