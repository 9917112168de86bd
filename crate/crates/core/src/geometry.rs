//! Discrete time-dependent Radon operator.
//!
//! Geometry conventions (these are also what the sinogram file header
//! declares):
//!
//! - The grid is `n × n` square pixels of side `pixel_size`, centred on
//!   `origin`. Column index grows along +x, row index along +y.
//! - A projection angle `θ` gives rays with direction `(cos θ, sin θ)`. A ray
//!   with detector offset `s` passes through `origin + s·(−sin θ, cos θ)`.
//! - Detector offsets are centred: bin `k` sits at
//!   `(k − (n_bins − 1)/2) · bin_spacing`.
//! - Rows of a block are angle-major: row `a·n_bins + k`.
//!
//! Each coefficient `a_ij` is the exact Euclidean length of ray `i` inside
//! pixel `j`, found by walking the ray through the grid planes it crosses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, LinearMap, PowerIterationOptions, Stacked};
use crate::sequence::{ImageSequence, SinogramStack, SinogramStep};

/// Direction components below this are treated as exactly axis-parallel.
const PARALLEL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Pixels per side.
    pub n: usize,
    pub pixel_size: f64,
    #[serde(default)]
    pub origin: [f64; 2],
}

impl GridSpec {
    pub fn new(n: usize, pixel_size: f64) -> Result<Self> {
        let g = Self {
            n,
            pixel_size,
            origin: [0.0, 0.0],
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("grid.n must be at least 1"));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::invalid(format!(
                "grid.pixel_size must be positive, got {}",
                self.pixel_size
            )));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("grid.origin must be finite"));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.n * self.n
    }

    /// Side length of the whole grid.
    pub fn extent(&self) -> f64 {
        self.n as f64 * self.pixel_size
    }

    /// `(x_min, y_min)` of the grid's bounding square.
    pub fn lower_corner(&self) -> [f64; 2] {
        let half = 0.5 * self.extent();
        [self.origin[0] - half, self.origin[1] - half]
    }

    /// Same physical square at `factor` times the resolution.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            n: self.n * factor,
            pixel_size: self.pixel_size / factor as f64,
            origin: self.origin,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub n_bins: usize,
    pub bin_spacing: f64,
}

impl DetectorSpec {
    pub fn new(n_bins: usize, bin_spacing: f64) -> Result<Self> {
        let d = Self { n_bins, bin_spacing };
        d.validate()?;
        Ok(d)
    }

    /// Smallest detector with bins of one pixel that spans the grid diagonal.
    pub fn covering(grid: &GridSpec) -> Self {
        let n_bins = (grid.n as f64 * std::f64::consts::SQRT_2).ceil() as usize;
        Self {
            n_bins: n_bins.max(1),
            bin_spacing: grid.pixel_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::invalid("detector.n_bins must be at least 1"));
        }
        if !(self.bin_spacing > 0.0 && self.bin_spacing.is_finite()) {
            return Err(Error::invalid(format!(
                "detector.bin_spacing must be positive, got {}",
                self.bin_spacing
            )));
        }
        Ok(())
    }

    pub fn field_of_view(&self) -> f64 {
        self.n_bins as f64 * self.bin_spacing
    }

    /// True if the detector spans the grid diagonal (no truncated rays).
    pub fn covers(&self, grid: &GridSpec) -> bool {
        self.field_of_view() >= grid.extent() * std::f64::consts::SQRT_2 - 1e-12
    }

    pub fn offset(&self, bin: usize) -> f64 {
        (bin as f64 - 0.5 * (self.n_bins as f64 - 1.0)) * self.bin_spacing
    }

    /// Same detector span at `factor` times the bin density.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            n_bins: self.n_bins * factor,
            bin_spacing: self.bin_spacing / factor as f64,
        }
    }
}

/// One line `origin + s·(−sin θ, cos θ) + t·(cos θ, sin θ)`.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub point: [f64; 2],
    pub dir: [f64; 2],
}

impl Ray {
    pub fn new(grid: &GridSpec, theta: f64, offset: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            point: [grid.origin[0] - offset * s, grid.origin[1] + offset * c],
            dir: [c, s],
        }
    }
}

/// Parameter interval of `ray` inside the closed slab `[lo, hi]` along `axis`.
fn slab(ray: &Ray, axis: usize, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let d = ray.dir[axis];
    let p = ray.point[axis];
    if d.abs() <= PARALLEL_EPS {
        if p < lo || p > hi {
            None
        } else {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        }
    } else {
        let t1 = (lo - p) / d;
        let t2 = (hi - p) / d;
        Some((t1.min(t2), t1.max(t2)))
    }
}

/// Parameter interval of the ray inside the grid's bounding square, if any.
fn clip_to_grid(grid: &GridSpec, ray: &Ray) -> Option<(f64, f64)> {
    let lo = grid.lower_corner();
    let ext = grid.extent();
    let (ax, bx) = slab(ray, 0, lo[0], lo[0] + ext)?;
    let (ay, by) = slab(ray, 1, lo[1], lo[1] + ext)?;
    let t0 = ax.max(ay);
    let t1 = bx.min(by);
    (t1 > t0).then_some((t0, t1))
}

/// Plane-crossing parameters along one axis, strictly inside `(t0, t1)`, in
/// increasing order.
fn crossings(grid: &GridSpec, ray: &Ray, axis: usize, t0: f64, t1: f64) -> Vec<f64> {
    let d = ray.dir[axis];
    if d.abs() <= PARALLEL_EPS {
        return Vec::new();
    }
    let lo = grid.lower_corner()[axis];
    let h = grid.pixel_size;
    let p = ray.point[axis];
    let mut out: Vec<f64> = (0..=grid.n)
        .map(|k| (lo + k as f64 * h - p) / d)
        .filter(|t| *t > t0 && *t < t1)
        .collect();
    if d < 0.0 {
        out.reverse();
    }
    out
}

/// Walks `ray` through the grid and returns `(pixel, length)` pairs in
/// traversal order. Lengths are exact chord lengths (up to rounding);
/// the lengths sum to the chord of the ray through the bounding square.
pub fn trace_ray(grid: &GridSpec, ray: &Ray) -> Vec<(usize, f64)> {
    let Some((t0, t1)) = clip_to_grid(grid, ray) else {
        return Vec::new();
    };
    let xs = crossings(grid, ray, 0, t0, t1);
    let ys = crossings(grid, ray, 1, t0, t1);

    let lo = grid.lower_corner();
    let h = grid.pixel_size;
    let n = grid.n;
    let cell = |coord: f64, axis: usize| -> usize {
        let k = ((coord - lo[axis]) / h).floor();
        k.clamp(0.0, (n - 1) as f64) as usize
    };

    let mut out: Vec<(usize, f64)> = Vec::with_capacity(xs.len() + ys.len() + 1);
    let (mut i, mut j) = (0, 0);
    let mut prev = t0;
    loop {
        // Merge the two monotone crossing sequences.
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&a), Some(&b)) if a <= b => {
                i += 1;
                a
            }
            (Some(_), Some(&b)) => {
                j += 1;
                b
            }
            (Some(&a), None) => {
                i += 1;
                a
            }
            (None, Some(&b)) => {
                j += 1;
                b
            }
            (None, None) => t1,
        };
        let len = next - prev;
        if len > 0.0 {
            let mid = 0.5 * (prev + next);
            let col = cell(ray.point[0] + mid * ray.dir[0], 0);
            let row = cell(ray.point[1] + mid * ray.dir[1], 1);
            let pix = row * n + col;
            match out.last_mut() {
                Some((p, l)) if *p == pix => *l += len,
                _ => out.push((pix, len)),
            }
        }
        prev = next;
        if next >= t1 {
            break;
        }
    }
    out
}

/// Sparse row-compressed block `A^t` for one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct RadonBlock {
    rows: usize,
    cols: usize,
    n_bins: usize,
    angles: Vec<f64>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl RadonBlock {
    /// Builds the line-length matrix for `angles` (radians in `[0, π)`).
    pub fn build(grid: &GridSpec, det: &DetectorSpec, angles: &[f64]) -> Result<Self> {
        grid.validate()?;
        det.validate()?;
        if angles.is_empty() {
            return Err(Error::invalid("radon block needs at least one angle"));
        }
        if let Some(a) = angles.iter().find(|a| !a.is_finite()) {
            return Err(Error::invalid(format!("non-finite projection angle {a}")));
        }
        if let Some(a) = angles
            .iter()
            .find(|a| !(0.0..std::f64::consts::PI).contains(*a))
        {
            return Err(Error::invalid(format!("projection angle {a} outside [0, π)")));
        }

        let rows = angles.len() * det.n_bins;
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for &theta in angles {
            for bin in 0..det.n_bins {
                let ray = Ray::new(grid, theta, det.offset(bin));
                for (pix, len) in trace_ray(grid, &ray) {
                    col_idx.push(pix);
                    values.push(len);
                }
                row_ptr.push(col_idx.len());
            }
        }
        Ok(Self {
            rows,
            cols: grid.n_pixels(),
            n_bins: det.n_bins,
            angles: angles.to_vec(),
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Arbitrary sparse block from `(row, col, value)` triplets, laid out as
    /// `angles.len() × n_bins` rows.
    pub fn from_triplets(
        n_bins: usize,
        angles: Vec<f64>,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        let rows = angles.len() * n_bins;
        if let Some(t) = triplets.iter().find(|t| t.0 >= rows || t.1 >= cols) {
            return Err(Error::mismatch(format!(
                "triplet ({}, {}) outside {rows}x{cols} block",
                t.0, t.1
            )));
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; rows + 1];
        for t in &triplets {
            row_ptr[t.0 + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            rows,
            cols,
            n_bins,
            angles,
            row_ptr,
            col_idx: triplets.iter().map(|t| t.1).collect(),
            values: triplets.iter().map(|t| t.2).collect(),
        })
    }

    /// Identity on `n_pixels`, shaped as a single pseudo-angle with one bin
    /// per pixel.
    pub fn identity(n_pixels: usize) -> Self {
        let triplets = (0..n_pixels).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n_pixels, vec![0.0], n_pixels, triplets).expect("valid identity")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(col, value)` entries of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d[r * self.cols + c] += v;
            }
        }
        d
    }

    /// `y = A x`.
    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, yr) in y.iter_mut().enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            *yr = self.col_idx[span.clone()]
                .iter()
                .zip(&self.values[span])
                .map(|(c, v)| v * x[*c])
                .sum();
        }
    }

    /// `x = Aᵀ y`.
    pub fn mul_transpose(&self, y: &[f64], x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        x.fill(0.0);
        for (r, yr) in y.iter().enumerate() {
            if *yr == 0.0 {
                continue;
            }
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            for (c, v) in self.col_idx[span.clone()].iter().zip(&self.values[span]) {
                x[*c] += v * yr;
            }
        }
    }
}

/// `A = diag(A¹, …, A^{N_t})`.
#[derive(Clone, Debug)]
pub struct BlockDiagonalOperator {
    blocks: Vec<RadonBlock>,
    row_offsets: Vec<usize>,
}

impl BlockDiagonalOperator {
    pub fn new(blocks: Vec<RadonBlock>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::invalid("operator needs at least one time step"));
        };
        let cols = first.cols;
        if let Some((t, b)) = blocks.iter().enumerate().find(|(_, b)| b.cols != cols) {
            return Err(Error::mismatch(format!(
                "block {t} has {} columns, block 0 has {cols}",
                b.cols
            )));
        }
        let mut row_offsets = Vec::with_capacity(blocks.len() + 1);
        row_offsets.push(0);
        for b in &blocks {
            row_offsets.push(row_offsets.last().unwrap() + b.rows);
        }
        Ok(Self {
            blocks,
            row_offsets,
        })
    }

    /// One block per entry of `per_step`.
    pub fn build(grid: &GridSpec, det: &DetectorSpec, per_step: &[Vec<f64>]) -> Result<Self> {
        let blocks = per_step
            .iter()
            .enumerate()
            .map(|(t, a)| {
                RadonBlock::build(grid, det, a).map_err(|e| match e {
                    Error::InvalidArgument(m) => Error::InvalidArgument(format!("time step {t}: {m}")),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks)
    }

    /// Identity blocks: plain denoising of every frame.
    pub fn identity(n_t: usize, n_pixels: usize) -> Self {
        Self::new((0..n_t).map(|_| RadonBlock::identity(n_pixels)).collect()).expect("nonempty")
    }

    pub fn n_t(&self) -> usize {
        self.blocks.len()
    }

    pub fn cols(&self) -> usize {
        self.blocks[0].cols
    }

    pub fn total_rows(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }

    pub fn blocks(&self) -> &[RadonBlock] {
        &self.blocks
    }

    /// Range of block `t`'s rows in the stacked measurement vector.
    pub fn row_range(&self, t: usize) -> std::ops::Range<usize> {
        self.row_offsets[t]..self.row_offsets[t + 1]
    }

    fn check_image(&self, u: &ImageSequence) -> Result<()> {
        if u.n_t() != self.n_t() || u.frame_len() != self.cols() {
            return Err(Error::mismatch(format!(
                "image sequence has {} frames of {} pixels, operator expects {} frames of {}",
                u.n_t(),
                u.frame_len(),
                self.n_t(),
                self.cols()
            )));
        }
        Ok(())
    }

    fn check_sinogram(&self, m: &SinogramStack) -> Result<()> {
        if m.n_t() != self.n_t() {
            return Err(Error::mismatch(format!(
                "sinogram has {} steps, operator has {}",
                m.n_t(),
                self.n_t()
            )));
        }
        for (t, (s, b)) in m.steps.iter().zip(&self.blocks).enumerate() {
            if s.values.len() != b.rows {
                return Err(Error::mismatch(format!(
                    "sinogram step {t} has {} values, block has {} rows",
                    s.values.len(),
                    b.rows
                )));
            }
        }
        Ok(())
    }

    /// Frame `t` of the result is `A^t u^t`.
    pub fn forward(&self, u: &ImageSequence) -> Result<SinogramStack> {
        self.check_image(u)?;
        let steps = self
            .blocks
            .iter()
            .zip(u.frames())
            .map(|(b, f)| {
                let mut values = vec![0.0; b.rows];
                b.mul(f, &mut values);
                SinogramStep {
                    angles: b.angles.clone(),
                    values,
                }
            })
            .collect();
        Ok(SinogramStack {
            n_bins: self.blocks[0].n_bins,
            steps,
            noise_level: 0.0,
            seed: 0,
        })
    }

    /// Frame `t` of the result is `(A^t)ᵀ m^t`.
    pub fn adjoint(&self, m: &SinogramStack) -> Result<ImageSequence> {
        self.check_sinogram(m)?;
        let n = (self.cols() as f64).sqrt().round() as usize;
        let mut u = ImageSequence::zeros(self.n_t(), n);
        if u.frame_len() != self.cols() {
            return Err(Error::mismatch(format!(
                "operator has {} columns, not a square frame",
                self.cols()
            )));
        }
        for (t, (b, s)) in self.blocks.iter().zip(&m.steps).enumerate() {
            b.mul_transpose(&s.values, u.frame_mut(t));
        }
        Ok(u)
    }
}

impl LinearMap for BlockDiagonalOperator {
    fn input_len(&self) -> usize {
        self.n_t() * self.cols()
    }

    fn output_len(&self) -> usize {
        self.total_rows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let c = self.cols();
        for (t, b) in self.blocks.iter().enumerate() {
            b.mul(&x[t * c..(t + 1) * c], &mut y[self.row_range(t)]);
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let c = self.cols();
        for (t, b) in self.blocks.iter().enumerate() {
            b.mul_transpose(&y[self.row_range(t)], &mut x[t * c..(t + 1) * c]);
        }
    }
}

/// Estimates `‖K‖₂` for `K = (A; extra…)` by power iteration on `KᵀK`.
pub fn operator_norm_estimate(
    op: &BlockDiagonalOperator,
    extra: &[&dyn LinearMap],
    opts: PowerIterationOptions,
) -> Result<f64> {
    let mut parts: Vec<&dyn LinearMap> = vec![op];
    parts.extend_from_slice(extra);
    spectral_norm(&Stacked::new(parts)?, opts)
}
