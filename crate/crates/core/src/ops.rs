//! Discrete differential, transport and warping operators.
//!
//! One stencil is used everywhere: forward differences with a replicate
//! (Neumann) boundary, so the difference across the last column/row is zero.
//! A gradient field of an `n × n` frame is stored as `[u_x …, u_y …]`.

use crate::error::{Error, Result};
use crate::linalg::LinearMap;
use crate::sequence::{FlowSequence, ImageSequence};

/// Forward-difference gradient of one frame into `out = [u_x, u_y]`.
pub fn gradient_into(frame: &[f64], n: usize, out: &mut [f64]) {
    let m = n * n;
    debug_assert_eq!(frame.len(), m);
    debug_assert_eq!(out.len(), 2 * m);
    let (gx, gy) = out.split_at_mut(m);
    for r in 0..n {
        let row = &frame[r * n..(r + 1) * n];
        let gxr = &mut gx[r * n..(r + 1) * n];
        for c in 0..n - 1 {
            gxr[c] = row[c + 1] - row[c];
        }
        gxr[n - 1] = 0.0;
        let gyr = &mut gy[r * n..(r + 1) * n];
        if r + 1 < n {
            let next = &frame[(r + 1) * n..(r + 2) * n];
            for c in 0..n {
                gyr[c] = next[c] - row[c];
            }
        } else {
            gyr.fill(0.0);
        }
    }
}

pub fn gradient(frame: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * n * n];
    gradient_into(frame, n, &mut out);
    out
}

/// `out += ∇ᵀ p` for one gradient field `p = [p_x, p_y]`.
pub fn gradient_transpose_add(p: &[f64], n: usize, out: &mut [f64]) {
    let m = n * n;
    debug_assert_eq!(p.len(), 2 * m);
    let (px, py) = p.split_at(m);
    for r in 0..n {
        let pxr = &px[r * n..(r + 1) * n];
        let o = &mut out[r * n..(r + 1) * n];
        if n > 1 {
            o[0] -= pxr[0];
            for c in 1..n - 1 {
                o[c] += pxr[c - 1] - pxr[c];
            }
            o[n - 1] += pxr[n - 2];
        }
    }
    if n > 1 {
        for c in 0..n {
            out[c] -= py[c];
        }
        for r in 1..n - 1 {
            for c in 0..n {
                out[r * n + c] += py[(r - 1) * n + c] - py[r * n + c];
            }
        }
        for c in 0..n {
            out[(n - 1) * n + c] += py[(n - 2) * n + c];
        }
    }
}

/// Discrete divergence `−∇ᵀ p`, so that `⟨∇u, p⟩ = −⟨u, div p⟩`.
pub fn divergence(p: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    gradient_transpose_add(p, n, &mut out);
    out.iter_mut().for_each(|v| *v = -*v);
    out
}

/// Isotropic total variation `Σ √(u_x² + u_y²)` of one gradient field.
pub fn tv_norm(field: &[f64]) -> f64 {
    let m = field.len() / 2;
    let (gx, gy) = field.split_at(m);
    gx.iter().zip(gy).map(|(a, b)| a.hypot(*b)).sum()
}

/// `Σ_frames ‖∇ f‖_{2,1}` over consecutive `n × n` frames in `frames`.
pub fn tv_of_frames(frames: &[f64], n: usize) -> f64 {
    let mut g = vec![0.0; 2 * n * n];
    frames
        .chunks(n * n)
        .map(|f| {
            gradient_into(f, n, &mut g);
            tv_norm(&g)
        })
        .sum()
}

/// `∇` applied independently to `n_frames` stacked frames.
#[derive(Clone, Copy, Debug)]
pub struct Gradient {
    pub n: usize,
    pub n_frames: usize,
}

impl LinearMap for Gradient {
    fn input_len(&self) -> usize {
        self.n_frames * self.n * self.n
    }

    fn output_len(&self) -> usize {
        2 * self.input_len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let m = self.n * self.n;
        for (f, g) in x.chunks(m).zip(y.chunks_mut(2 * m)) {
            gradient_into(f, self.n, g);
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let m = self.n * self.n;
        x.fill(0.0);
        for (f, g) in x.chunks_mut(m).zip(y.chunks(2 * m)) {
            gradient_transpose_add(g, self.n, f);
        }
    }
}

/// Motion-linearised temporal operator `T` for a fixed flow:
/// `(Tu)_i = u^{i+1} − u^i + ∇u^i · v^i`.
#[derive(Clone, Debug)]
pub struct Transport<'a> {
    flow: &'a FlowSequence,
    n_t: usize,
}

impl<'a> Transport<'a> {
    pub fn new(flow: &'a FlowSequence, n_t: usize) -> Result<Self> {
        if flow.n_fields() + 1 != n_t {
            return Err(Error::mismatch(format!(
                "flow has {} fields, image sequence has {n_t} frames",
                flow.n_fields()
            )));
        }
        Ok(Self { flow, n_t })
    }

    pub fn n(&self) -> usize {
        self.flow.n()
    }
}

impl LinearMap for Transport<'_> {
    fn input_len(&self) -> usize {
        self.n_t * self.flow.frame_len()
    }

    fn output_len(&self) -> usize {
        self.flow.n_fields() * self.flow.frame_len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n();
        let m = n * n;
        let mut g = vec![0.0; 2 * m];
        for i in 0..self.flow.n_fields() {
            let cur = &x[i * m..(i + 1) * m];
            let next = &x[(i + 1) * m..(i + 2) * m];
            gradient_into(cur, n, &mut g);
            let (gx, gy) = g.split_at(m);
            let v1 = self.flow.component(i, 0);
            let v2 = self.flow.component(i, 1);
            let out = &mut y[i * m..(i + 1) * m];
            for j in 0..m {
                out[j] = next[j] - cur[j] + gx[j] * v1[j] + gy[j] * v2[j];
            }
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let n = self.n();
        let m = n * n;
        x.fill(0.0);
        let mut w = vec![0.0; 2 * m];
        for i in 0..self.flow.n_fields() {
            let r = &y[i * m..(i + 1) * m];
            let v1 = self.flow.component(i, 0);
            let v2 = self.flow.component(i, 1);
            {
                let (wx, wy) = w.split_at_mut(m);
                for j in 0..m {
                    wx[j] = v1[j] * r[j];
                    wy[j] = v2[j] * r[j];
                }
            }
            let (head, tail) = x.split_at_mut((i + 1) * m);
            let cur = &mut head[i * m..];
            let next = &mut tail[..m];
            for j in 0..m {
                next[j] += r[j];
                cur[j] -= r[j];
            }
            gradient_transpose_add(&w, n, cur);
        }
    }
}

/// Residual sequence `Tu` (`N_t − 1` frames).
pub fn transport_apply(u: &ImageSequence, v: &FlowSequence) -> Result<Vec<f64>> {
    check_pair(u, v)?;
    let t = Transport::new(v, u.n_t())?;
    let mut out = vec![0.0; t.output_len()];
    t.apply(u.as_slice(), &mut out);
    Ok(out)
}

/// `Tᵀ r` for fixed `v`.
pub fn transport_adjoint(v: &FlowSequence, r: &[f64]) -> Result<ImageSequence> {
    let n_t = v.n_fields() + 1;
    let t = Transport::new(v, n_t)?;
    if r.len() != t.output_len() {
        return Err(Error::mismatch(format!(
            "residual has {} values, expected {}",
            r.len(),
            t.output_len()
        )));
    }
    let mut u = ImageSequence::zeros(n_t, v.n());
    t.apply_transpose(r, u.as_mut_slice());
    Ok(u)
}

fn check_pair(u: &ImageSequence, v: &FlowSequence) -> Result<()> {
    if u.n() != v.n() || u.n_t() != v.n_fields() + 1 {
        return Err(Error::mismatch(format!(
            "image sequence {:?} and flow sequence {:?} are incompatible",
            u.shape(),
            v.shape()
        )));
    }
    Ok(())
}

/// Flow-side operator `T̂` for fixed images: `(T̂v)_i = g_i · v^i`, where
/// `g_i` is the gradient of the (possibly warped) frame `i`.
#[derive(Clone, Debug)]
pub struct FlowOperator {
    n: usize,
    n_fields: usize,
    /// Per field, `[g_x, g_y]`.
    grads: Vec<f64>,
}

impl FlowOperator {
    /// Linearisation at zero flow: `g_i = ∇u^i`.
    pub fn from_images(u: &ImageSequence) -> Self {
        let n = u.n();
        let n_fields = u.n_t().saturating_sub(1);
        let m = n * n;
        let mut grads = vec![0.0; n_fields * 2 * m];
        for i in 0..n_fields {
            gradient_into(u.frame(i), n, &mut grads[i * 2 * m..(i + 1) * 2 * m]);
        }
        Self { n, n_fields, grads }
    }

    pub fn from_gradients(n: usize, n_fields: usize, grads: Vec<f64>) -> Result<Self> {
        if grads.len() != n_fields * 2 * n * n {
            return Err(Error::mismatch("flow operator gradient buffer has wrong length"));
        }
        Ok(Self { n, n_fields, grads })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    pub fn gradients(&self, i: usize) -> &[f64] {
        let m = 2 * self.n * self.n;
        &self.grads[i * m..(i + 1) * m]
    }
}

impl LinearMap for FlowOperator {
    fn input_len(&self) -> usize {
        self.n_fields * 2 * self.n * self.n
    }

    fn output_len(&self) -> usize {
        self.n_fields * self.n * self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let m = self.n * self.n;
        for i in 0..self.n_fields {
            let (gx, gy) = self.gradients(i).split_at(m);
            let (v1, v2) = x[i * 2 * m..(i + 1) * 2 * m].split_at(m);
            let out = &mut y[i * m..(i + 1) * m];
            for j in 0..m {
                out[j] = gx[j] * v1[j] + gy[j] * v2[j];
            }
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let m = self.n * self.n;
        for i in 0..self.n_fields {
            let (gx, gy) = self.gradients(i).split_at(m);
            let r = &y[i * m..(i + 1) * m];
            let (v1, v2) = x[i * 2 * m..(i + 1) * 2 * m].split_at_mut(m);
            for j in 0..m {
                v1[j] = gx[j] * r[j];
                v2[j] = gy[j] * r[j];
            }
        }
    }
}

/// `T̂v` with `T̂` built from `u`.
pub fn flow_operator_apply(u: &ImageSequence, v: &FlowSequence) -> Result<Vec<f64>> {
    check_pair(u, v)?;
    let op = FlowOperator::from_images(u);
    let mut out = vec![0.0; op.output_len()];
    op.apply(v.as_slice(), &mut out);
    Ok(out)
}

/// `T̂ᵀ r` with `T̂` built from `u`.
pub fn flow_operator_adjoint(u: &ImageSequence, r: &[f64]) -> Result<FlowSequence> {
    let op = FlowOperator::from_images(u);
    if r.len() != op.output_len() {
        return Err(Error::mismatch(format!(
            "residual has {} values, expected {}",
            r.len(),
            op.output_len()
        )));
    }
    let mut v = FlowSequence::zeros_for(u);
    op.apply_transpose(r, v.as_mut_slice());
    Ok(v)
}

/// `b_i = u^i − u^{i+1}`, so that `T̂v − b = Tu`.
pub fn flow_rhs(u: &ImageSequence) -> Vec<f64> {
    let m = u.frame_len();
    let mut b = vec![0.0; u.n_t().saturating_sub(1) * m];
    for (i, bi) in b.chunks_mut(m.max(1)).enumerate() {
        for ((o, a), c) in bi.iter_mut().zip(u.frame(i)).zip(u.frame(i + 1)) {
            *o = a - c;
        }
    }
    b
}

/// Bilinear sample of `frame` at fractional `(x, y)` = (column, row), with
/// coordinates clamped to the grid (replicate boundary).
pub fn sample_bilinear(frame: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let max = (n - 1) as f64;
    let x = x.clamp(0.0, max);
    let y = y.clamp(0.0, max);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let c0 = x0 as usize;
    let r0 = y0 as usize;
    let c1 = (c0 + 1).min(n - 1);
    let r1 = (r0 + 1).min(n - 1);
    let top = frame[r0 * n + c0] * (1.0 - fx) + frame[r0 * n + c1] * fx;
    let bottom = frame[r1 * n + c0] * (1.0 - fx) + frame[r1 * n + c1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// `out(x) = frame(x + v(x))`, where `flow = [v¹, v²]` in pixels.
pub fn warp(frame: &[f64], flow: &[f64], n: usize) -> Vec<f64> {
    let m = n * n;
    let (v1, v2) = flow.split_at(m);
    let mut out = vec![0.0; m];
    for r in 0..n {
        for c in 0..n {
            let j = r * n + c;
            out[j] = sample_bilinear(frame, n, c as f64 + v1[j], r as f64 + v2[j]);
        }
    }
    out
}

/// Side length after one restriction step.
pub fn coarse_size(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2×2 block average; odd sizes are padded by replicating the last
/// row/column first.
pub fn restrict(frame: &[f64], n: usize) -> Vec<f64> {
    let nc = coarse_size(n);
    let at = |r: usize, c: usize| frame[r.min(n - 1) * n + c.min(n - 1)];
    let mut out = vec![0.0; nc * nc];
    for r in 0..nc {
        for c in 0..nc {
            out[r * nc + c] = 0.25
                * (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1));
        }
    }
    out
}

/// Bilinear upsampling of an `n_coarse` frame to `n_fine` (≤ 2·n_coarse),
/// aligning pixel centres.
pub fn prolong(frame: &[f64], n_coarse: usize, n_fine: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_fine * n_fine];
    for r in 0..n_fine {
        let y = (r as f64 + 0.5) * 0.5 - 0.5;
        for c in 0..n_fine {
            let x = (c as f64 + 0.5) * 0.5 - 0.5;
            out[r * n_fine + c] = sample_bilinear(frame, n_coarse, x, y);
        }
    }
    out
}

/// Restricts every frame of a sequence.
pub fn restrict_sequence(u: &ImageSequence) -> ImageSequence {
    let nc = coarse_size(u.n());
    let frames = u.frames().map(|f| restrict(f, u.n())).collect();
    ImageSequence::from_frames(nc, frames).expect("consistent sizes")
}

/// Restricts a flow; displacements shrink by the resolution ratio.
pub fn restrict_flow(v: &FlowSequence) -> FlowSequence {
    let n = v.n();
    let nc = coarse_size(n);
    let mut out = FlowSequence::zeros(v.n_fields(), nc);
    for i in 0..v.n_fields() {
        for c in 0..2 {
            let r = restrict(v.component(i, c), n);
            for (o, x) in out.component_mut(i, c).iter_mut().zip(r) {
                *o = 0.5 * x;
            }
        }
    }
    out
}

/// Prolongs a flow to `n_fine`; displacements double with the resolution.
pub fn prolong_flow(v: &FlowSequence, n_fine: usize) -> FlowSequence {
    let mut out = FlowSequence::zeros(v.n_fields(), n_fine);
    for i in 0..v.n_fields() {
        for c in 0..2 {
            let p = prolong(v.component(i, c), v.n(), n_fine);
            for (o, x) in out.component_mut(i, c).iter_mut().zip(p) {
                *o = 2.0 * x;
            }
        }
    }
    out
}
