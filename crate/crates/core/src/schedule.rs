//! Per-time-step projection angle schedules for the four measurement
//! protocols: small increments (1 or k angles), tracking, and randomized.
//!
//! All angles are reduced modulo π. Randomized schedules draw from
//! xoshiro256++ seeded through SplitMix64 (the reference seeding of
//! `seed_from_u64`); a draw `x` maps to `(x >> 11) · 2⁻⁵³ · π`.

use std::f64::consts::PI;

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generating parameters of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    SmallIncrements {
        increment: f64,
        k: usize,
    },
    Tracking {
        full_count: usize,
        increment: f64,
    },
    Randomized {
        /// Snap draws onto `quantize` equispaced positions in `[0, π)`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        quantize: Option<usize>,
    },
    /// Explicit angle lists, e.g. from external data.
    Custom,
}

impl Protocol {
    /// Canonical protocol label, e.g. `small_increments_2`.
    pub fn label(&self) -> String {
        match self {
            Protocol::SmallIncrements { k, .. } => format!("small_increments_{k}"),
            Protocol::Tracking { .. } => "tracking".into(),
            Protocol::Randomized { .. } => "randomized".into(),
            Protocol::Custom => "custom".into(),
        }
    }

    /// Parses a protocol name with default parameters for an `n_t`-step run.
    ///
    /// Accepted names: `small_increments` (k = 1), `small_increments_<k>`,
    /// `tracking`, `randomized`.
    pub fn from_name(name: &str, n_t: usize) -> Result<Self> {
        let increment = default_increment(n_t);
        match name {
            "small_increments" => Ok(Protocol::SmallIncrements { increment, k: 1 }),
            "tracking" => Ok(Protocol::Tracking {
                full_count: 60,
                increment,
            }),
            "randomized" => Ok(Protocol::Randomized { quantize: None }),
            "custom" => Ok(Protocol::Custom),
            other => {
                let k = other
                    .strip_prefix("small_increments_")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|k| *k >= 1)
                    .ok_or_else(|| Error::invalid(format!("unknown protocol {other:?}")))?;
                Ok(Protocol::SmallIncrements { increment, k })
            }
        }
    }
}

/// π/n_t: a half rotation over the whole sequence.
pub fn default_increment(n_t: usize) -> f64 {
    PI / n_t.max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngleSchedule {
    pub per_step: Vec<Vec<f64>>,
    pub label: String,
    pub seed: Option<u64>,
    pub protocol: Protocol,
}

impl AngleSchedule {
    pub fn n_t(&self) -> usize {
        self.per_step.len()
    }

    pub fn total_angles(&self) -> usize {
        self.per_step.iter().map(Vec::len).sum()
    }

    /// Schedule from explicit angle lists; every angle must lie in `[0, π)`.
    pub fn custom(per_step: Vec<Vec<f64>>) -> Result<Self> {
        if per_step.is_empty() {
            return Err(Error::invalid("schedule needs at least one time step"));
        }
        for (t, step) in per_step.iter().enumerate() {
            if step.is_empty() {
                return Err(Error::invalid(format!("time step {t} has no angles")));
            }
            if let Some(a) = step.iter().find(|a| !(0.0..PI).contains(*a)) {
                return Err(Error::invalid(format!("time step {t}: angle {a} outside [0, π)")));
            }
        }
        Ok(Self {
            per_step,
            label: "custom".into(),
            seed: None,
            protocol: Protocol::Custom,
        })
    }

    /// Regenerates a schedule from its protocol; `custom` needs explicit angles.
    pub fn generate(protocol: &Protocol, n_t: usize, seed: Option<u64>) -> Result<Self> {
        match *protocol {
            Protocol::SmallIncrements { increment, k } => small_increments(n_t, increment, k),
            Protocol::Tracking {
                full_count,
                increment,
            } => tracking(n_t, full_count, increment),
            Protocol::Randomized { quantize } => {
                let seed = seed.ok_or_else(|| Error::invalid("randomized schedule needs a seed"))?;
                randomized_quantized(n_t, seed, quantize)
            }
            Protocol::Custom => Err(Error::invalid("custom schedules cannot be regenerated")),
        }
    }
}

fn reduce(a: f64) -> f64 {
    let r = a.rem_euclid(PI);
    // rem_euclid can round up to exactly π for inputs just below a multiple.
    if r >= PI {
        0.0
    } else {
        r
    }
}

fn check_increment(increment: f64) -> Result<()> {
    if !(increment > 0.0 && increment.is_finite()) {
        return Err(Error::invalid(format!("increment must be positive, got {increment}")));
    }
    Ok(())
}

/// Step `i` measures `{(i·increment + j·π/k) mod π : j < k}`.
pub fn small_increments(n_t: usize, increment: f64, k: usize) -> Result<AngleSchedule> {
    if n_t == 0 {
        return Err(Error::invalid("n_t must be at least 1"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    check_increment(increment)?;
    let per_step = (0..n_t)
        .map(|i| {
            (0..k)
                .map(|j| reduce(i as f64 * increment + j as f64 * PI / k as f64))
                .collect()
        })
        .collect();
    let protocol = Protocol::SmallIncrements { increment, k };
    Ok(AngleSchedule {
        per_step,
        label: protocol.label(),
        seed: None,
        protocol,
    })
}

/// Full equispaced scans at the first and last step, one incremental angle
/// in between.
pub fn tracking(n_t: usize, full_count: usize, increment: f64) -> Result<AngleSchedule> {
    if n_t < 2 {
        return Err(Error::invalid(format!("tracking needs n_t >= 2, got {n_t}")));
    }
    if full_count == 0 {
        return Err(Error::invalid("full_count must be at least 1"));
    }
    check_increment(increment)?;
    let full: Vec<f64> = (0..full_count)
        .map(|j| j as f64 * PI / full_count as f64)
        .collect();
    let per_step = (0..n_t)
        .map(|i| {
            if i == 0 || i == n_t - 1 {
                full.clone()
            } else {
                vec![reduce(i as f64 * increment)]
            }
        })
        .collect();
    let protocol = Protocol::Tracking {
        full_count,
        increment,
    };
    Ok(AngleSchedule {
        per_step,
        label: protocol.label(),
        seed: None,
        protocol,
    })
}

/// One angle per step, i.i.d. uniform on `[0, π)`.
pub fn randomized(n_t: usize, seed: u64) -> Result<AngleSchedule> {
    randomized_quantized(n_t, seed, None)
}

pub fn randomized_quantized(
    n_t: usize,
    seed: u64,
    quantize: Option<usize>,
) -> Result<AngleSchedule> {
    if n_t == 0 {
        return Err(Error::invalid("n_t must be at least 1"));
    }
    if quantize == Some(0) {
        return Err(Error::invalid("quantization grid needs at least one position"));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let per_step = (0..n_t)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let a = match quantize {
                Some(q) => (u * q as f64).floor() * PI / q as f64,
                None => u * PI,
            };
            vec![reduce(a)]
        })
        .collect();
    let protocol = Protocol::Randomized { quantize };
    Ok(AngleSchedule {
        per_step,
        label: protocol.label(),
        seed: Some(seed),
        protocol,
    })
}
