//! Space-time containers: image sequences, flow sequences and sinogram stacks.
//!
//! Frames are stored row-major: pixel `(row, col)` of an `n × n` frame lives
//! at `row * n + col`, with `col` increasing along +x and `row` along +y.

use crate::error::{Error, Result};

/// `n_t` frames of an `n × n` grid, stored contiguously frame after frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence {
    n_t: usize,
    n: usize,
    data: Vec<f64>,
}

impl ImageSequence {
    pub fn zeros(n_t: usize, n: usize) -> Self {
        Self {
            n_t,
            n,
            data: vec![0.0; n_t * n * n],
        }
    }

    pub fn from_vec(n_t: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_t * n * n {
            return Err(Error::mismatch(format!(
                "image sequence {n_t}x{n}x{n} needs {} values, got {}",
                n_t * n * n,
                data.len()
            )));
        }
        Ok(Self { n_t, n, data })
    }

    pub fn from_frames(n: usize, frames: Vec<Vec<f64>>) -> Result<Self> {
        let n_t = frames.len();
        let mut data = Vec::with_capacity(n_t * n * n);
        for (t, f) in frames.into_iter().enumerate() {
            if f.len() != n * n {
                return Err(Error::mismatch(format!(
                    "frame {t} has {} pixels, expected {}",
                    f.len(),
                    n * n
                )));
            }
            data.extend(f);
        }
        Ok(Self { n_t, n, data })
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    /// Side length of each frame.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn frame_len(&self) -> usize {
        self.n * self.n
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let m = self.frame_len();
        &self.data[t * m..(t + 1) * m]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let m = self.frame_len();
        &mut self.data[t * m..(t + 1) * m]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.frame_len().max(1)).take(self.n_t)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_t, self.n, self.n)
    }
}

/// `n_fields` two-component vector fields on an `n × n` grid, in pixels per
/// frame interval. Layout: field-major, then component (`v¹` then `v²`), then
/// pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSequence {
    n_fields: usize,
    n: usize,
    data: Vec<f64>,
}

impl FlowSequence {
    pub fn zeros(n_fields: usize, n: usize) -> Self {
        Self {
            n_fields,
            n,
            data: vec![0.0; n_fields * 2 * n * n],
        }
    }

    /// The flow sequence matching an image sequence (one field fewer than frames).
    pub fn zeros_for(u: &ImageSequence) -> Self {
        Self::zeros(u.n_t().saturating_sub(1), u.n())
    }

    pub fn from_vec(n_fields: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_fields * 2 * n * n {
            return Err(Error::mismatch(format!(
                "flow sequence {n_fields}x2x{n}x{n} needs {} values, got {}",
                n_fields * 2 * n * n,
                data.len()
            )));
        }
        Ok(Self { n_fields, n, data })
    }

    /// Constant flow `(vx, vy)` everywhere.
    pub fn constant(n_fields: usize, n: usize, vx: f64, vy: f64) -> Self {
        let mut f = Self::zeros(n_fields, n);
        for i in 0..n_fields {
            f.component_mut(i, 0).fill(vx);
            f.component_mut(i, 1).fill(vy);
        }
        f
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn frame_len(&self) -> usize {
        self.n * self.n
    }

    /// Both components of field `i`, `v¹` followed by `v²`.
    pub fn field(&self, i: usize) -> &[f64] {
        let m = 2 * self.frame_len();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn field_mut(&mut self, i: usize) -> &mut [f64] {
        let m = 2 * self.frame_len();
        &mut self.data[i * m..(i + 1) * m]
    }

    pub fn component(&self, i: usize, c: usize) -> &[f64] {
        let m = self.frame_len();
        &self.field(i)[c * m..(c + 1) * m]
    }

    pub fn component_mut(&mut self, i: usize, c: usize) -> &mut [f64] {
        let m = self.frame_len();
        &mut self.field_mut(i)[c * m..(c + 1) * m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_fields, self.n, self.n)
    }
}

/// Projections measured at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct SinogramStep {
    /// Angles in radians, `[0, π)`.
    pub angles: Vec<f64>,
    /// `angles.len() * n_bins` values, angle-major.
    pub values: Vec<f64>,
}

/// Measured data `m`: one record per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct SinogramStack {
    pub n_bins: usize,
    pub steps: Vec<SinogramStep>,
    /// Relative Gaussian noise std used in simulation (0 for clean data).
    pub noise_level: f64,
    pub seed: u64,
}

impl SinogramStack {
    pub fn zeros_like(angles: &[Vec<f64>], n_bins: usize) -> Self {
        Self {
            n_bins,
            steps: angles
                .iter()
                .map(|a| SinogramStep {
                    angles: a.clone(),
                    values: vec![0.0; a.len() * n_bins],
                })
                .collect(),
            noise_level: 0.0,
            seed: 0,
        }
    }

    pub fn n_t(&self) -> usize {
        self.steps.len()
    }

    pub fn total_rays(&self) -> usize {
        self.steps.iter().map(|s| s.values.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (t, s) in self.steps.iter().enumerate() {
            if s.values.len() != s.angles.len() * self.n_bins {
                return Err(Error::mismatch(format!(
                    "sinogram step {t}: {} values for {} angles x {} bins",
                    s.values.len(),
                    s.angles.len(),
                    self.n_bins
                )));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sinogram step {t} has non-finite values")));
            }
        }
        Ok(())
    }

    /// All values concatenated step after step.
    pub fn flat_values(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.values.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
