//! The "pinball" phantom: a uniform ball travelling horizontally inside a
//! stationary ellipse, and simulation of noisy sinograms from it.
//!
//! Phantom geometry is given in pixels of the target grid, measured from the
//! grid centre. Sinograms are simulated on a `supersample`-times finer grid
//! and detector, so the reconstruction model never exactly matches the data
//! model.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DetectorSpec, GridSpec, RadonBlock};
use crate::schedule::AngleSchedule;
use crate::sequence::{ImageSequence, SinogramStack, SinogramStep};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallPath {
    pub start_x: f64,
    pub end_x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n: usize,
    pub n_t: usize,
    /// Sub-samples per pixel side used for area averaging and simulation.
    pub supersample: usize,
    pub ball_radius: f64,
    pub ball_intensity: f64,
    pub ball_path: BallPath,
    pub ellipse_center: [f64; 2],
    pub ellipse_semi_axes: [f64; 2],
    pub ellipse_intensity: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n: 42,
            n_t: 30,
            supersample: 4,
            ball_radius: 4.0,
            ball_intensity: 1.0,
            ball_path: BallPath {
                start_x: -12.0,
                end_x: 12.0,
                y: 0.0,
            },
            ellipse_center: [0.0, 0.0],
            ellipse_semi_axes: [17.0, 12.0],
            ellipse_intensity: 0.5,
        }
    }
}

impl PhantomSpec {
    /// The default phantom rescaled to an `n × n` grid with `n_t` steps.
    pub fn scaled(n: usize, n_t: usize) -> Self {
        let d = Self::default();
        let f = n as f64 / d.n as f64;
        Self {
            n,
            n_t,
            ball_radius: d.ball_radius * f,
            ball_path: BallPath {
                start_x: d.ball_path.start_x * f,
                end_x: d.ball_path.end_x * f,
                y: d.ball_path.y * f,
            },
            ellipse_center: [d.ellipse_center[0] * f, d.ellipse_center[1] * f],
            ellipse_semi_axes: [d.ellipse_semi_axes[0] * f, d.ellipse_semi_axes[1] * f],
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_t == 0 {
            return Err(Error::invalid("phantom n and n_t must be at least 1"));
        }
        if self.supersample == 0 {
            return Err(Error::invalid("phantom.supersample must be at least 1"));
        }
        if self.ball_intensity < 0.0 || self.ellipse_intensity < 0.0 {
            return Err(Error::invalid("phantom intensities must be nonnegative"));
        }
        if !(self.ball_radius > 0.0) || self.ellipse_semi_axes.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::invalid("phantom radii must be positive"));
        }
        for t in 0..self.n_t {
            let [cx, cy] = self.ball_center(t);
            // The disc lies inside the ellipse iff its boundary circle does.
            for k in 0..720 {
                let phi = k as f64 * std::f64::consts::TAU / 720.0;
                let x = cx + self.ball_radius * phi.cos();
                let y = cy + self.ball_radius * phi.sin();
                if self.ellipse_level(x, y) > 1.0 {
                    return Err(Error::invalid(format!(
                        "ball leaves the ellipse at step {t} (centre {cx:.3}, {cy:.3})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Ball centre at step `t`, linearly interpolated along the path.
    pub fn ball_center(&self, t: usize) -> [f64; 2] {
        let s = if self.n_t > 1 {
            t as f64 / (self.n_t - 1) as f64
        } else {
            0.0
        };
        let p = &self.ball_path;
        [p.start_x + s * (p.end_x - p.start_x), p.y]
    }

    fn ellipse_level(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.ellipse_center[0]) / self.ellipse_semi_axes[0];
        let dy = (y - self.ellipse_center[1]) / self.ellipse_semi_axes[1];
        dx * dx + dy * dy
    }

    /// Point value at `(x, y)` (target-pixel units from the centre).
    pub fn value_at(&self, t: usize, x: f64, y: f64) -> f64 {
        let [cx, cy] = self.ball_center(t);
        if (x - cx).powi(2) + (y - cy).powi(2) <= self.ball_radius * self.ball_radius {
            self.ball_intensity
        } else if self.ellipse_level(x, y) <= 1.0 {
            self.ellipse_intensity
        } else {
            0.0
        }
    }

    /// Same phantom with the ball removed.
    pub fn ellipse_only(&self) -> Self {
        Self {
            ball_intensity: self.ellipse_intensity,
            ..self.clone()
        }
    }

    pub fn max_intensity(&self) -> f64 {
        self.ball_intensity.max(self.ellipse_intensity)
    }
}

/// Renders step `t` on an `out_n × out_n` grid covering the phantom's field
/// of view, averaging `samples × samples` point samples per pixel.
pub fn rasterize(spec: &PhantomSpec, t: usize, out_n: usize, samples: usize) -> Vec<f64> {
    let scale = spec.n as f64 / out_n as f64;
    let half = 0.5 * spec.n as f64;
    let inv = 1.0 / (samples * samples) as f64;
    let mut frame = vec![0.0; out_n * out_n];
    for row in 0..out_n {
        for col in 0..out_n {
            let mut acc = 0.0;
            for a in 0..samples {
                let y = (row as f64 + (a as f64 + 0.5) / samples as f64) * scale - half;
                for b in 0..samples {
                    let x = (col as f64 + (b as f64 + 0.5) / samples as f64) * scale - half;
                    acc += spec.value_at(t, x, y);
                }
            }
            frame[row * out_n + col] = acc * inv;
        }
    }
    frame
}

/// Area-averaged frame `t` at the target resolution.
pub fn render_pinball(spec: &PhantomSpec, t: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    if t >= spec.n_t {
        return Err(Error::invalid(format!("step {t} outside 0..{}", spec.n_t)));
    }
    Ok(rasterize(spec, t, spec.n, spec.supersample))
}

/// All `n_t` ground-truth frames.
pub fn ground_truth(spec: &PhantomSpec) -> Result<ImageSequence> {
    spec.validate()?;
    let frames = (0..spec.n_t)
        .into_par_iter()
        .map(|t| rasterize(spec, t, spec.n, spec.supersample))
        .collect();
    ImageSequence::from_frames(spec.n, frames)
}

/// Simulates a measured sinogram.
///
/// Each step is rendered at `supersample·n` resolution, projected with a
/// detector `supersample` times denser, perturbed by i.i.d. Gaussian noise of
/// std `noise_level · max(clean high-resolution sinogram)`, and finally
/// block-averaged back to `det.n_bins` bins.
pub fn simulate_sinogram(
    spec: &PhantomSpec,
    schedule: &AngleSchedule,
    grid: &GridSpec,
    det: &DetectorSpec,
    noise_level: f64,
    seed: u64,
) -> Result<SinogramStack> {
    spec.validate()?;
    grid.validate()?;
    det.validate()?;
    if schedule.n_t() != spec.n_t {
        return Err(Error::mismatch(format!(
            "schedule has {} steps but phantom has n_t = {}",
            schedule.n_t(),
            spec.n_t
        )));
    }
    if grid.n != spec.n {
        return Err(Error::mismatch(format!(
            "grid has n = {} but phantom has n = {}",
            grid.n, spec.n
        )));
    }
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::invalid(format!("noise_level must be >= 0, got {noise_level}")));
    }

    let s = spec.supersample;
    let fine_grid = grid.refined(s);
    let fine_det = det.refined(s);
    let mut fine: Vec<Vec<f64>> = schedule
        .per_step
        .par_iter()
        .enumerate()
        .map(|(t, angles)| {
            let block = RadonBlock::build(&fine_grid, &fine_det, angles)?;
            let frame = rasterize(spec, t, fine_grid.n, 1);
            let mut values = vec![0.0; block.rows()];
            block.mul(&frame, &mut values);
            Ok(values)
        })
        .collect::<Result<_>>()?;

    let peak = fine
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |m, v| m.max(*v));
    let std = noise_level * peak;
    if std > 0.0 {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        for v in fine.iter_mut().flat_map(|v| v.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }

    let inv = 1.0 / s as f64;
    let steps = schedule
        .per_step
        .iter()
        .zip(fine)
        .map(|(angles, values)| SinogramStep {
            angles: angles.clone(),
            values: values
                .chunks(s)
                .map(|c| c.iter().sum::<f64>() * inv)
                .collect(),
        })
        .collect();
    Ok(SinogramStack {
        n_bins: det.n_bins,
        steps,
        noise_level,
        seed,
    })
}
