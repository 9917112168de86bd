//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the library's solvers.
#![allow(dead_code)]

use std::f64::consts::PI;

use dynct::linalg::{dot, norm2, LinearMap};
use dynct::sequence::{SinogramStack, SinogramStep};
use dynct::{BlockDiagonalOperator, DetectorSpec, FlowSequence, GridSpec, ImageSequence};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn random_vec(r: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// `|⟨Kx, y⟩ − ⟨x, Kᵀy⟩| / (‖Kx‖‖y‖ + ‖x‖‖Kᵀy‖)`.
pub fn adjoint_gap(k: &dyn LinearMap, r: &mut impl Rng) -> f64 {
    let x = random_vec(r, k.input_len());
    let y = random_vec(r, k.output_len());
    let mut kx = vec![0.0; k.output_len()];
    let mut kty = vec![0.0; k.input_len()];
    k.apply(&x, &mut kx);
    k.apply_transpose(&y, &mut kty);
    let scale = norm2(&kx) * norm2(&y) + norm2(&x) * norm2(&kty);
    if scale == 0.0 {
        return 0.0;
    }
    (dot(&kx, &y) - dot(&x, &kty)).abs() / scale
}

/// Dense matrices of `K` and of `Kᵀ`, built column by column from unit vectors.
pub fn densify(k: &dyn LinearMap) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = (k.output_len(), k.input_len());
    let mut a = DMatrix::zeros(m, n);
    let mut at = DMatrix::zeros(n, m);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; m];
    for j in 0..n {
        e[j] = 1.0;
        k.apply(&e, &mut col);
        a.set_column(j, &DVector::from_column_slice(&col));
        e[j] = 0.0;
    }
    let mut e = vec![0.0; m];
    let mut col = vec![0.0; n];
    for j in 0..m {
        e[j] = 1.0;
        k.apply_transpose(&e, &mut col);
        at.set_column(j, &DVector::from_column_slice(&col));
        e[j] = 0.0;
    }
    (a, at)
}

pub struct Instance {
    pub grid: GridSpec,
    pub n_t: usize,
    pub op: BlockDiagonalOperator,
    pub u: ImageSequence,
    pub v: FlowSequence,
}

/// Random grid up to 16×16, 2 to 4 steps, 1 to 3 random angles per step.
pub fn random_instance(r: &mut impl Rng) -> Instance {
    let n = r.random_range(2..=16);
    let n_t = r.random_range(2..=4);
    let grid = GridSpec::new(n, r.random_range(0.5..2.0)).unwrap();
    let det = DetectorSpec::covering(&grid);
    let per_step: Vec<Vec<f64>> = (0..n_t)
        .map(|_| (0..r.random_range(1..=3)).map(|_| r.random_range(0.0..PI)).collect())
        .collect();
    let op = BlockDiagonalOperator::build(&grid, &det, &per_step).unwrap();
    let u = ImageSequence::from_vec(n_t, n, random_vec(r, n_t * n * n)).unwrap();
    let v = FlowSequence::from_vec(n_t - 1, n, random_vec(r, (n_t - 1) * 2 * n * n)).unwrap();
    Instance { grid, n_t, op, u, v }
}

/// Chord length of the line `{p + t d}` through `[lo, hi]²` by slab clipping.
pub fn chord_oracle(p: [f64; 2], d: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..2 {
        if d[k] == 0.0 {
            if p[k] < lo[k] || p[k] > hi[k] {
                return 0.0;
            }
        } else {
            let a = (lo[k] - p[k]) / d[k];
            let b = (hi[k] - p[k]) / d[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
    ((t1 - t0).max(0.0)) * norm
}

/// Measurements for `A = I`: one pseudo-angle per step, one bin per pixel.
pub fn identity_data(u: &ImageSequence) -> SinogramStack {
    SinogramStack {
        n_bins: u.frame_len(),
        steps: u
            .frames()
            .map(|f| SinogramStep {
                angles: vec![0.0],
                values: f.to_vec(),
            })
            .collect(),
        noise_level: 0.0,
        seed: 0,
    }
}

/// Forward-difference matrix (replicate boundary) of an `n × n` frame, rows
/// `[u_x; u_y]`.
pub fn difference_matrix(n: usize) -> DMatrix<f64> {
    let m = n * n;
    let mut d = DMatrix::zeros(2 * m, m);
    for r in 0..n {
        for c in 0..n {
            let j = r * n + c;
            if c + 1 < n {
                d[(j, j + 1)] = 1.0;
                d[(j, j)] = -1.0;
            }
            if r + 1 < n {
                d[(m + j, j + n)] = 1.0;
                d[(m + j, j)] = -1.0;
            }
        }
    }
    d
}

/// `½‖u − f‖² + α Σ √(g_x² + g_y² + ε²)`, its gradient and Hessian.
fn smoothed(u: &DVector<f64>, f: &DVector<f64>, d: &DMatrix<f64>, alpha: f64, eps: f64) -> (f64, DVector<f64>, DMatrix<f64>) {
    let m = u.len();
    let g = d * u;
    let mut e = 0.5 * (u - f).norm_squared();
    let mut w = DVector::zeros(2 * m);
    let mut b = DMatrix::zeros(2 * m, 2 * m);
    for j in 0..m {
        let (gx, gy) = (g[j], g[m + j]);
        let phi = (gx * gx + gy * gy + eps * eps).sqrt();
        e += alpha * phi;
        w[j] = gx / phi;
        w[m + j] = gy / phi;
        let p3 = phi * phi * phi;
        b[(j, j)] = (gy * gy + eps * eps) / p3;
        b[(m + j, m + j)] = (gx * gx + eps * eps) / p3;
        b[(j, m + j)] = -gx * gy / p3;
        b[(m + j, j)] = -gx * gy / p3;
    }
    let grad = (u - f) + alpha * d.transpose() * w;
    let hess = DMatrix::identity(m, m) + alpha * d.transpose() * b * d;
    (e, grad, hess)
}

/// `½‖u − f‖² + α TV(u)` without smoothing.
pub fn rof_energy(u: &DVector<f64>, f: &DVector<f64>, d: &DMatrix<f64>, alpha: f64) -> f64 {
    let m = u.len();
    let g = d * u;
    0.5 * (u - f).norm_squared() + alpha * (0..m).map(|j| g[j].hypot(g[m + j])).sum::<f64>()
}

/// Minimiser of the smoothed ROF energy by damped Newton, with continuation
/// in the smoothing parameter down to 1e-9.
pub fn newton_rof(f: &DVector<f64>, n: usize, alpha: f64) -> DVector<f64> {
    let d = difference_matrix(n);
    let mut u = f.clone();
    let mut eps = 1e-1;
    loop {
        for _ in 0..500 {
            let (e, g, h) = smoothed(&u, f, &d, alpha, eps);
            let step = h.lu().solve(&(-&g)).expect("Hessian is positive definite");
            let decrement = -g.dot(&step);
            if decrement < 1e-24 {
                break;
            }
            let mut t = 1.0;
            loop {
                let cand = &u + t * &step;
                if smoothed(&cand, f, &d, alpha, eps).0 <= e - 1e-4 * t * decrement || t < 1e-12 {
                    u = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        if eps <= 1e-9 {
            return u;
        }
        eps *= 0.1;
    }
}

/// `u(x) = x − shift` on an `n × n` frame.
pub fn ramp(n: usize, shift: f64) -> Vec<f64> {
    (0..n * n).map(|j| (j % n) as f64 - shift).collect()
}

/// SSIM of two frames written out directly from the sample statistics.
pub fn ssim_oracle(a: &[f64], b: &[f64], c1: f64, c2: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
    let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}
