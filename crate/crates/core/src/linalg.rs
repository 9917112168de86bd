//! Small dense-vector helpers and the [`LinearMap`] abstraction used for
//! operator-norm estimation and adjoint testing.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

/// A real linear map `K: R^n -> R^m` together with its transpose.
pub trait LinearMap {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    /// `y = K x`; `y` is overwritten.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `x = Kᵀ y`; `x` is overwritten.
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]);
}

/// Row-major dense matrix, mostly useful as a test fixture.
#[derive(Clone, Debug)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in d.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self::new(n, n, data)
    }
}

impl LinearMap for DenseMatrix {
    fn input_len(&self) -> usize {
        self.cols
    }

    fn output_len(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = dot(&self.data[r * self.cols..(r + 1) * self.cols], x);
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        for (r, yr) in y.iter().enumerate() {
            for (xc, a) in x.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *xc += a * yr;
            }
        }
    }
}

/// Vertical stack `(K₁; K₂; …)` of maps sharing one input space.
pub struct Stacked<'a> {
    parts: Vec<&'a dyn LinearMap>,
}

impl<'a> Stacked<'a> {
    pub fn new(parts: Vec<&'a dyn LinearMap>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("stacked operator needs at least one part"));
        };
        let n = first.input_len();
        if let Some(bad) = parts.iter().find(|p| p.input_len() != n) {
            return Err(Error::mismatch(format!(
                "stacked operator parts disagree on input length ({n} vs {})",
                bad.input_len()
            )));
        }
        Ok(Self { parts })
    }
}

impl LinearMap for Stacked<'_> {
    fn input_len(&self) -> usize {
        self.parts[0].input_len()
    }

    fn output_len(&self) -> usize {
        self.parts.iter().map(|p| p.output_len()).sum()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut off = 0;
        for p in &self.parts {
            let m = p.output_len();
            p.apply(x, &mut y[off..off + m]);
            off += m;
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        let mut tmp = vec![0.0; x.len()];
        let mut off = 0;
        for p in &self.parts {
            let m = p.output_len();
            p.apply_transpose(&y[off..off + m], &mut tmp);
            for (a, b) in x.iter_mut().zip(&tmp) {
                *a += b;
            }
            off += m;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PowerIterationOptions {
    pub max_iters: usize,
    /// Stop once the relative change of the estimate drops below this.
    pub tol: f64,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            tol: 1e-6,
        }
    }
}

/// Estimates `‖K‖₂` by power iteration on `KᵀK`.
///
/// The start vector is a fixed deterministic pattern with every entry
/// nonzero, so repeated calls return bit-identical estimates.
pub fn spectral_norm(k: &dyn LinearMap, opts: PowerIterationOptions) -> Result<f64> {
    let n = k.input_len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut x: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * ((i as f64 * 0.618_033_988_749_895).fract() - 0.5))
        .collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut y = vec![0.0; k.output_len()];
    let mut z = vec![0.0; n];
    let mut estimate = 0.0f64;
    let mut change = f64::INFINITY;
    for _ in 0..opts.max_iters {
        k.apply(&x, &mut y);
        k.apply_transpose(&y, &mut z);
        // For unit x, ‖Kx‖² ≤ ‖KᵀKx‖ ≤ ‖K‖², so the square root of the
        // latter is the tighter lower bound.
        let nz = norm2(&z);
        let next = nz.sqrt();
        if nz == 0.0 {
            return Ok(0.0);
        }
        change = (next - estimate).abs() / next.max(f64::MIN_POSITIVE);
        estimate = next;
        for (a, b) in x.iter_mut().zip(&z) {
            *a = b / nz;
        }
        if change < opts.tol {
            return Ok(estimate);
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iters,
        last_change: change,
    })
}
