//! Joint reconstruction of the image sequence `u` and flow sequence `v`.
//!
//! The time-discrete functional is
//!
//! ```text
//! J(u, v) = Σ_i (1/p)‖A^i u^i − m^i‖_p^p + α‖∇u^i‖_{2,1}
//!         + Σ_i γ‖u^{i+1} − u^i + ∇u^i·v^i‖₁ + β Σ_j ‖∇v^{i,j}‖_{2,1}
//! ```
//!
//! It is minimised by alternating two convex subproblems, each solved with
//! a first-order primal-dual iteration:
//!
//! - `u`-step: `(1/p)‖Au − m‖_p^p + α‖∇u‖_{2,1} + γ‖Tu‖₁` for fixed `v`;
//! - `v`-step: `‖T̂v − b‖₁ + (β/γ) Σ_j ‖∇v^j‖_{2,1}` for fixed `u`.
//!
//! Both inner solvers use equal steps `σ = τ = step_rule / L̂`, where `L̂`
//! is a power-iteration estimate of the stacked operator norm. Every
//! inner solve returns the lowest-energy checkpoint it visited (checked
//! every [`ENERGY_WINDOW`] iterations, warm start included), so neither
//! step can increase the joint energy.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{operator_norm_estimate, BlockDiagonalOperator};
use crate::linalg::{norm1, spectral_norm, LinearMap, PowerIterationOptions, Stacked};
use crate::ops::{
    gradient_into, prolong_flow, restrict_flow, restrict_sequence, tv_of_frames, warp,
    FlowOperator, Gradient, Transport,
};
use crate::sequence::{FlowSequence, ImageSequence, SinogramStack};

/// Iterations between energy checkpoints of the inner solvers.
pub const ENERGY_WINDOW: usize = 10;

/// Data-fidelity exponent `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    L1,
    L2,
}

impl Fidelity {
    pub fn exponent(self) -> u32 {
        match self {
            Fidelity::L1 => 1,
            Fidelity::L2 => 2,
        }
    }

    pub fn from_exponent(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Fidelity::L1),
            2 => Ok(Fidelity::L2),
            _ => Err(Error::invalid(format!("fidelity exponent must be 1 or 2, got {p}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Fidelity::L1 => "l1",
            Fidelity::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" | "L1" | "1" => Ok(Fidelity::L1),
            "l2" | "L2" | "2" => Ok(Fidelity::L2),
            _ => Err(Error::invalid(format!("unknown fidelity {s:?} (expected l1 or l2)"))),
        }
    }

    /// `(1/p)‖r‖_p^p`.
    pub fn data_term(self, r: &[f64]) -> f64 {
        match self {
            Fidelity::L1 => norm1(r),
            Fidelity::L2 => 0.5 * r.iter().map(|x| x * x).sum::<f64>(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub fidelity: Fidelity,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub inner_max_iters: usize,
    pub inner_tol: f64,
    pub outer_max_iters: usize,
    pub outer_tol: f64,
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    /// Warping passes per pyramid level.
    pub pyramid_warps: usize,
    /// `σ = τ = step_rule / L̂`.
    pub step_rule: f64,
    /// Clamp `u` at zero after the run.
    pub clamp_nonnegative: bool,
    pub norm_max_iters: usize,
    pub norm_tol: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self::pinball(Fidelity::L1)
    }
}

impl SolverParams {
    /// Weights tuned for the pinball study: `(0.1, 0.2, 0.5)` for L¹ and
    /// `(0.05, 0.2, 8)` for L².
    pub fn pinball(fidelity: Fidelity) -> Self {
        let (alpha, beta, gamma) = match fidelity {
            Fidelity::L1 => (0.1, 0.2, 0.5),
            Fidelity::L2 => (0.05, 0.2, 8.0),
        };
        Self {
            fidelity,
            alpha,
            beta,
            gamma,
            inner_max_iters: 5000,
            inner_tol: 1e-6,
            outer_max_iters: 20,
            outer_tol: 1e-4,
            pyramid_levels: 1,
            pyramid_scale: 0.5,
            pyramid_warps: 1,
            step_rule: 0.99,
            clamp_nonnegative: false,
            norm_max_iters: 5000,
            norm_tol: 1e-6,
        }
    }

    /// Full check for the joint problem: all three weights positive.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("solver.{name} must be positive, got {v}")));
            }
        }
        self.validate_numerics()
    }

    /// Check for a single `u`-subproblem, where `α = 0` or `γ = 0` drops a term.
    pub fn validate_u_step(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("solver.{name} must be >= 0, got {v}")));
            }
        }
        self.validate_numerics()
    }

    /// Check for a single `v`-subproblem: `γ > 0`, `β ≥ 0`.
    pub fn validate_v_step(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("solver.gamma must be positive, got {}", self.gamma)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("solver.beta must be >= 0, got {}", self.beta)));
        }
        self.validate_numerics()
    }

    fn validate_numerics(&self) -> Result<()> {
        for (name, v) in [
            ("inner_tol", self.inner_tol),
            ("outer_tol", self.outer_tol),
            ("norm_tol", self.norm_tol),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("solver.{name} must be positive, got {v}")));
            }
        }
        if self.inner_max_iters == 0 || self.outer_max_iters == 0 || self.norm_max_iters == 0 {
            return Err(Error::invalid("solver iteration caps must be at least 1"));
        }
        if self.pyramid_levels == 0 || self.pyramid_warps == 0 {
            return Err(Error::invalid("solver.pyramid_levels and pyramid_warps must be at least 1"));
        }
        if self.pyramid_scale != 0.5 {
            return Err(Error::invalid(format!(
                "solver.pyramid_scale must be 0.5, got {}",
                self.pyramid_scale
            )));
        }
        if !(self.step_rule > 0.0 && self.step_rule <= 1.0) {
            return Err(Error::invalid(format!(
                "solver.step_rule must lie in (0, 1], got {}",
                self.step_rule
            )));
        }
        Ok(())
    }

    fn norm_opts(&self) -> PowerIterationOptions {
        PowerIterationOptions {
            max_iters: self.norm_max_iters,
            tol: self.norm_tol,
        }
    }
}

/// Clamps every entry to `[−radius, radius]`.
pub fn project_linf(x: &mut [f64], radius: f64) {
    for v in x {
        *v = v.clamp(-radius, radius);
    }
}

/// Scales each pixel's 2-vector of a gradient field `[p_x …, p_y …]` to
/// Euclidean norm at most `radius`.
pub fn project_l2inf(field: &mut [f64], radius: f64) {
    let m = field.len() / 2;
    let (px, py) = field.split_at_mut(m);
    for (a, b) in px.iter_mut().zip(py.iter_mut()) {
        let norm = a.hypot(*b);
        if norm > radius {
            let s = if norm > 0.0 { radius / norm } else { 0.0 };
            *a *= s;
            *b *= s;
        }
    }
}

fn project_l2inf_frames(field: &mut [f64], n: usize, radius: f64) {
    for chunk in field.chunks_mut(2 * n * n) {
        project_l2inf(chunk, radius);
    }
}

/// Dual variables of the `u`-step.
#[derive(Clone, Debug, PartialEq)]
pub struct DualStateU {
    /// Sinogram-shaped.
    pub p1: Vec<f64>,
    /// Gradient field per frame.
    pub p2: Vec<f64>,
    /// Residual-sequence-shaped.
    pub p3: Vec<f64>,
}

/// Dual variables of the `v`-step.
#[derive(Clone, Debug, PartialEq)]
pub struct DualStateV {
    /// Residual-shaped.
    pub q1: Vec<f64>,
    /// Per field, the dual of `∇v¹` followed by the dual of `∇v²`.
    pub q23: Vec<f64>,
}

/// Counts of each update rule executed, for checking which code paths ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InnerStats {
    pub iterations: usize,
    pub data_projection_updates: usize,
    pub data_resolvent_updates: usize,
    pub tv_dual_updates: usize,
    pub transport_dual_updates: usize,
    pub primal_updates: usize,
    pub energy_evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct USolution {
    pub u: ImageSequence,
    pub duals: DualStateU,
    pub energy: f64,
    pub initial_energy: f64,
    pub sigma: f64,
    pub tau: f64,
    pub norm_estimate: f64,
    pub stats: InnerStats,
}

#[derive(Clone, Debug)]
pub struct VSolution {
    pub v: FlowSequence,
    pub duals: DualStateV,
    pub energy: f64,
    pub initial_energy: f64,
    pub sigma: f64,
    pub tau: f64,
    pub norm_estimate: f64,
    pub stats: InnerStats,
}

fn check_measurements(op: &BlockDiagonalOperator, m: &SinogramStack) -> Result<Vec<f64>> {
    if m.n_t() != op.n_t() {
        return Err(Error::mismatch(format!(
            "sinogram has {} steps, operator has {}",
            m.n_t(),
            op.n_t()
        )));
    }
    for t in 0..op.n_t() {
        if m.steps[t].values.len() != op.row_range(t).len() {
            return Err(Error::mismatch(format!(
                "sinogram step {t} has {} values, operator block has {} rows",
                m.steps[t].values.len(),
                op.row_range(t).len()
            )));
        }
    }
    Ok(m.flat_values())
}

fn steps(params: &SolverParams, norm: f64) -> Result<(f64, f64)> {
    if norm == 0.0 {
        return Ok((0.0, 0.0));
    }
    let s = params.step_rule / norm;
    if s * s * norm * norm > 1.0 + 1e-12 {
        return Err(Error::SolverAbort(format!(
            "step sizes violate στL² ≤ 1 (σ = τ = {s}, L = {norm})"
        )));
    }
    Ok((s, s))
}

/// `(1/p)‖Au − m‖_p^p + α‖∇u‖_{2,1} + γ‖Tu‖₁`.
pub fn u_energy(
    op: &BlockDiagonalOperator,
    f: &[f64],
    v: &FlowSequence,
    params: &SolverParams,
    u: &[f64],
) -> f64 {
    let n = v.n();
    let mut au = vec![0.0; op.total_rows()];
    op.apply(u, &mut au);
    au.iter_mut().zip(f).for_each(|(a, b)| *a -= b);
    let mut e = params.fidelity.data_term(&au) + params.alpha * tv_of_frames(u, n);
    if v.n_fields() > 0 {
        let t = Transport::new(v, op.n_t()).expect("checked shapes");
        let mut r = vec![0.0; t.output_len()];
        t.apply(u, &mut r);
        e += params.gamma * norm1(&r);
    }
    e
}

/// Solves the `u`-subproblem for fixed `v`.
pub fn solve_u(
    op: &BlockDiagonalOperator,
    m: &SinogramStack,
    v: &FlowSequence,
    params: &SolverParams,
    warm_u: Option<&ImageSequence>,
    warm_duals: Option<&DualStateU>,
) -> Result<USolution> {
    params.validate_u_step()?;
    let f = check_measurements(op, m)?;
    let n_t = op.n_t();
    let n = v.n();
    if v.n_fields() + 1 != n_t || n * n != op.cols() {
        return Err(Error::mismatch(format!(
            "flow {:?} does not fit operator with {n_t} steps of {} pixels",
            v.shape(),
            op.cols()
        )));
    }
    let m_px = n * n;
    let grad = Gradient { n, n_frames: n_t };
    let transport = Transport::new(v, n_t)?;
    // With γ = 0 the transport dual is pinned at zero; leave T out of K.
    let use_transport = params.gamma > 0.0 && v.n_fields() > 0;

    let norm = if use_transport {
        operator_norm_estimate(op, &[&grad, &transport], params.norm_opts())?
    } else {
        operator_norm_estimate(op, &[&grad], params.norm_opts())?
    };
    let (sigma, tau) = steps(params, norm)?;

    let mut u = match warm_u {
        Some(u0) => {
            if u0.n_t() != n_t || u0.frame_len() != m_px {
                return Err(Error::mismatch("warm-start image sequence has wrong shape"));
            }
            u0.as_slice().to_vec()
        }
        None => vec![0.0; n_t * m_px],
    };
    let mut duals = warm_duals.cloned().unwrap_or_else(|| DualStateU {
        p1: vec![0.0; op.total_rows()],
        p2: vec![0.0; grad.output_len()],
        p3: vec![0.0; transport.output_len()],
    });
    if duals.p1.len() != op.total_rows()
        || duals.p2.len() != grad.output_len()
        || duals.p3.len() != transport.output_len()
    {
        return Err(Error::mismatch("warm-start dual state has wrong shape"));
    }

    let energy = |x: &[f64]| u_energy(op, &f, v, params, x);
    let initial_energy = energy(&u);
    if !initial_energy.is_finite() {
        return Err(Error::SolverAbort("initial u-energy is not finite".into()));
    }
    let mut stats = InnerStats {
        energy_evaluations: 1,
        ..Default::default()
    };
    let mut best = (initial_energy, u.clone());
    let mut last_checkpoint = initial_energy;

    let mut u_bar = u.clone();
    let mut k1 = vec![0.0; op.total_rows()];
    let mut k2 = vec![0.0; grad.output_len()];
    let mut k3 = vec![0.0; transport.output_len()];
    let mut g = vec![0.0; u.len()];
    let mut tmp = vec![0.0; u.len()];

    if norm > 0.0 {
        for k in 1..=params.inner_max_iters {
            // p1: data term
            op.apply(&u_bar, &mut k1);
            match params.fidelity {
                Fidelity::L1 => {
                    for ((p, a), fi) in duals.p1.iter_mut().zip(&k1).zip(&f) {
                        *p = (*p + sigma * (a - fi)).clamp(-1.0, 1.0);
                    }
                    stats.data_projection_updates += 1;
                }
                Fidelity::L2 => {
                    let s = 1.0 / (1.0 + sigma);
                    for ((p, a), fi) in duals.p1.iter_mut().zip(&k1).zip(&f) {
                        *p = (*p + sigma * (a - fi)) * s;
                    }
                    stats.data_resolvent_updates += 1;
                }
            }
            // p2: total variation
            grad.apply(&u_bar, &mut k2);
            for (p, a) in duals.p2.iter_mut().zip(&k2) {
                *p += sigma * a;
            }
            project_l2inf_frames(&mut duals.p2, n, params.alpha);
            stats.tv_dual_updates += 1;
            // p3: transport
            if use_transport {
                transport.apply(&u_bar, &mut k3);
                for (p, a) in duals.p3.iter_mut().zip(&k3) {
                    *p += sigma * a;
                }
                project_linf(&mut duals.p3, params.gamma);
                stats.transport_dual_updates += 1;
            }
            // primal
            op.apply_transpose(&duals.p1, &mut g);
            grad.apply_transpose(&duals.p2, &mut tmp);
            g.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            if use_transport {
                transport.apply_transpose(&duals.p3, &mut tmp);
                g.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
            for ((ui, ub), gi) in u.iter_mut().zip(u_bar.iter_mut()).zip(&g) {
                let next = *ui - tau * gi;
                *ub = 2.0 * next - *ui;
                *ui = next;
            }
            stats.primal_updates += 1;
            stats.iterations = k;

            if k % ENERGY_WINDOW == 0 {
                let e = energy(&u);
                stats.energy_evaluations += 1;
                if !e.is_finite() {
                    return Err(Error::SolverAbort(format!(
                        "u-step diverged at iteration {k} (σ = τ = {sigma}, L = {norm})"
                    )));
                }
                if e < best.0 {
                    best = (e, u.clone());
                }
                let change = (e - last_checkpoint).abs() / last_checkpoint.abs().max(f64::MIN_POSITIVE);
                last_checkpoint = e;
                if change < params.inner_tol {
                    break;
                }
            }
        }
    }

    let (energy, u_best) = best;
    Ok(USolution {
        u: ImageSequence::from_vec(n_t, n, u_best)?,
        duals,
        energy,
        initial_energy,
        sigma,
        tau,
        norm_estimate: norm,
        stats,
    })
}

/// `‖T̂v − b‖₁ + (β/γ) Σ_j ‖∇v^j‖_{2,1}`.
pub fn v_energy(flow_op: &FlowOperator, b: &[f64], params: &SolverParams, v: &[f64]) -> f64 {
    let mut r = vec![0.0; flow_op.output_len()];
    flow_op.apply(v, &mut r);
    let data: f64 = r.iter().zip(b).map(|(a, c)| (a - c).abs()).sum();
    data + params.beta / params.gamma * tv_of_frames(v, flow_op.n())
}

/// Solves the `v`-subproblem for fixed `u` (linearised at zero flow).
pub fn solve_v(
    u: &ImageSequence,
    params: &SolverParams,
    warm_v: Option<&FlowSequence>,
    warm_duals: Option<&DualStateV>,
) -> Result<VSolution> {
    let flow_op = FlowOperator::from_images(u);
    let b = crate::ops::flow_rhs(u);
    solve_v_linearized(&flow_op, &b, params, warm_v, warm_duals)
}

/// Solves `min_v ‖T̂v − b‖₁ + (β/γ) Σ_j ‖∇v^j‖_{2,1}` for a given `T̂`, `b`.
pub fn solve_v_linearized(
    flow_op: &FlowOperator,
    b: &[f64],
    params: &SolverParams,
    warm_v: Option<&FlowSequence>,
    warm_duals: Option<&DualStateV>,
) -> Result<VSolution> {
    params.validate_v_step()?;
    let n = flow_op.n();
    let n_fields = flow_op.n_fields();
    if b.len() != flow_op.output_len() {
        return Err(Error::mismatch(format!(
            "flow right-hand side has {} values, expected {}",
            b.len(),
            flow_op.output_len()
        )));
    }
    let grad = Gradient {
        n,
        n_frames: 2 * n_fields,
    };
    let radius = params.beta / params.gamma;

    let norm = if n_fields == 0 {
        0.0
    } else {
        spectral_norm(&Stacked::new(vec![flow_op, &grad])?, params.norm_opts())?
    };
    let (sigma, tau) = steps(params, norm)?;

    let mut v = match warm_v {
        Some(v0) => {
            if v0.n_fields() != n_fields || v0.n() != n {
                return Err(Error::mismatch("warm-start flow has wrong shape"));
            }
            v0.as_slice().to_vec()
        }
        None => vec![0.0; flow_op.input_len()],
    };
    let mut duals = warm_duals.cloned().unwrap_or_else(|| DualStateV {
        q1: vec![0.0; flow_op.output_len()],
        q23: vec![0.0; grad.output_len()],
    });
    if duals.q1.len() != flow_op.output_len() || duals.q23.len() != grad.output_len() {
        return Err(Error::mismatch("warm-start dual state has wrong shape"));
    }

    let energy = |x: &[f64]| v_energy(flow_op, b, params, x);
    let initial_energy = energy(&v);
    if !initial_energy.is_finite() {
        return Err(Error::SolverAbort("initial v-energy is not finite".into()));
    }
    let mut stats = InnerStats {
        energy_evaluations: 1,
        ..Default::default()
    };
    let mut best = (initial_energy, v.clone());
    let mut last_checkpoint = initial_energy;

    let mut v_bar = v.clone();
    let mut k1 = vec![0.0; flow_op.output_len()];
    let mut k2 = vec![0.0; grad.output_len()];
    let mut g = vec![0.0; v.len()];
    let mut tmp = vec![0.0; v.len()];

    if norm > 0.0 && initial_energy > 0.0 {
        for k in 1..=params.inner_max_iters {
            flow_op.apply(&v_bar, &mut k1);
            for ((q, a), bi) in duals.q1.iter_mut().zip(&k1).zip(b) {
                *q = (*q + sigma * (a - bi)).clamp(-1.0, 1.0);
            }
            stats.data_projection_updates += 1;
            grad.apply(&v_bar, &mut k2);
            for (q, a) in duals.q23.iter_mut().zip(&k2) {
                *q += sigma * a;
            }
            project_l2inf_frames(&mut duals.q23, n, radius);
            stats.tv_dual_updates += 1;

            flow_op.apply_transpose(&duals.q1, &mut g);
            grad.apply_transpose(&duals.q23, &mut tmp);
            for ((vi, vb), (gi, ti)) in v.iter_mut().zip(v_bar.iter_mut()).zip(g.iter().zip(&tmp)) {
                let next = *vi - tau * (gi + ti);
                *vb = 2.0 * next - *vi;
                *vi = next;
            }
            stats.primal_updates += 1;
            stats.iterations = k;

            if k % ENERGY_WINDOW == 0 {
                let e = energy(&v);
                stats.energy_evaluations += 1;
                if !e.is_finite() {
                    return Err(Error::SolverAbort(format!(
                        "v-step diverged at iteration {k} (σ = τ = {sigma}, L = {norm})"
                    )));
                }
                if e < best.0 {
                    best = (e, v.clone());
                }
                let change = (e - last_checkpoint).abs() / last_checkpoint.abs().max(f64::MIN_POSITIVE);
                last_checkpoint = e;
                if change < params.inner_tol || e == 0.0 {
                    break;
                }
            }
        }
    }

    let (energy, v_best) = best;
    Ok(VSolution {
        v: FlowSequence::from_vec(n_fields, n, v_best)?,
        duals,
        energy,
        initial_energy,
        sigma,
        tau,
        norm_estimate: norm,
        stats,
    })
}

/// Value of the full time-discrete functional `J(u, v)`.
pub fn joint_energy(
    op: &BlockDiagonalOperator,
    m: &SinogramStack,
    u: &ImageSequence,
    v: &FlowSequence,
    params: &SolverParams,
) -> Result<f64> {
    let f = check_measurements(op, m)?;
    if u.n_t() != op.n_t() || u.frame_len() != op.cols() || v.n_fields() + 1 != u.n_t() || v.n() != u.n() {
        return Err(Error::mismatch("joint energy: shapes of u, v and the operator disagree"));
    }
    Ok(u_energy(op, &f, v, params, u.as_slice()) + params.beta * tv_of_frames(v.as_slice(), v.n()))
}

/// One row of the outer-loop trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub joint_energy: f64,
    pub r_main: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct JointResult {
    pub u: ImageSequence,
    pub v: FlowSequence,
    /// Joint energy after each outer iteration.
    pub energy_trace: Vec<f64>,
    /// `r_main = ‖u − u_old‖₂ + ‖v − v_old‖₂` after each outer iteration.
    pub outer_residual_trace: Vec<f64>,
    pub wall_seconds: Vec<f64>,
    /// False if the outer loop stopped at `outer_max_iters`.
    pub converged: bool,
    pub u_stats: Vec<InnerStats>,
    pub v_stats: Vec<InnerStats>,
}

impl JointResult {
    pub fn trace(&self) -> Vec<TraceRow> {
        (0..self.energy_trace.len())
            .map(|i| TraceRow {
                iteration: i + 1,
                joint_energy: self.energy_trace[i],
                r_main: self.outer_residual_trace[i],
                wall_seconds: self.wall_seconds[i],
            })
            .collect()
    }
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn initial_state(
    op: &BlockDiagonalOperator,
    initial_u: Option<ImageSequence>,
    initial_v: Option<FlowSequence>,
) -> Result<(ImageSequence, FlowSequence)> {
    let n = (op.cols() as f64).sqrt().round() as usize;
    if n * n != op.cols() {
        return Err(Error::mismatch(format!(
            "operator has {} columns, not a square frame",
            op.cols()
        )));
    }
    let u = initial_u.unwrap_or_else(|| ImageSequence::zeros(op.n_t(), n));
    let v = initial_v.unwrap_or_else(|| FlowSequence::zeros_for(&u));
    if u.n_t() != op.n_t() || u.n() != n {
        return Err(Error::mismatch("initial u does not match the operator"));
    }
    if v.n_fields() + 1 != u.n_t() || v.n() != n {
        return Err(Error::mismatch("initial v does not match the operator"));
    }
    Ok((u, v))
}

type VStep<'a> = dyn FnMut(&ImageSequence, &FlowSequence, Option<&DualStateV>) -> Result<VSolution> + 'a;

fn outer_loop(
    op: &BlockDiagonalOperator,
    m: &SinogramStack,
    params: &SolverParams,
    mut u: ImageSequence,
    mut v: FlowSequence,
    v_step: &mut VStep<'_>,
) -> Result<JointResult> {
    let start = Instant::now();
    let mut u_duals: Option<DualStateU> = None;
    let mut v_duals: Option<DualStateV> = None;
    let mut energy_trace = Vec::new();
    let mut residuals = Vec::new();
    let mut wall = Vec::new();
    let mut u_stats = Vec::new();
    let mut v_stats = Vec::new();
    let mut converged = false;

    for _ in 0..params.outer_max_iters {
        let u_old = u.clone();
        let v_old = v.clone();

        let us = solve_u(op, m, &v, params, Some(&u), u_duals.as_ref())?;
        u = us.u;
        u_duals = Some(us.duals);
        u_stats.push(us.stats);

        let vs = v_step(&u, &v, v_duals.as_ref())?;
        v = vs.v;
        v_duals = Some(vs.duals);
        v_stats.push(vs.stats);

        let r_main = diff_norm(u.as_slice(), u_old.as_slice()) + diff_norm(v.as_slice(), v_old.as_slice());
        let e = joint_energy(op, m, &u, &v, params)?;
        if !(r_main.is_finite() && e.is_finite()) {
            return Err(Error::SolverAbort("outer iterate is not finite".into()));
        }
        energy_trace.push(e);
        residuals.push(r_main);
        wall.push(start.elapsed().as_secs_f64());

        let scale = crate::linalg::norm2(u.as_slice()) + crate::linalg::norm2(v.as_slice());
        if r_main <= params.outer_tol * scale {
            converged = true;
            break;
        }
    }

    if params.clamp_nonnegative {
        u.as_mut_slice().iter_mut().for_each(|x| *x = x.max(0.0));
    }
    Ok(JointResult {
        u,
        v,
        energy_trace,
        outer_residual_trace: residuals,
        wall_seconds: wall,
        converged,
        u_stats,
        v_stats,
    })
}

/// Alternating minimisation: `u`-step with `T` from the current `v`, then
/// `v`-step with `T̂`, `b` from the new `u`, until `r_main` falls below
/// `outer_tol · (‖u‖ + ‖v‖)` or `outer_max_iters` is reached. Starts from
/// zero unless initial values are given.
pub fn joint_solve(
    op: &BlockDiagonalOperator,
    m: &SinogramStack,
    params: &SolverParams,
    initial_u: Option<ImageSequence>,
    initial_v: Option<FlowSequence>,
) -> Result<JointResult> {
    params.validate()?;
    check_measurements(op, m)?;
    let (u, v) = initial_state(op, initial_u, initial_v)?;
    let mut step = |u: &ImageSequence, v: &FlowSequence, d: Option<&DualStateV>| {
        solve_v(u, params, Some(v), d)
    };
    outer_loop(op, m, params, u, v, &mut step)
}

/// `T̂` and `b` linearised around `v0` after warping frame `i` by `−v0`:
/// with `w_i(x) = u^i(x − v0_i(x))`, the residual is
/// `u^{i+1} − w_i + ∇w_i·(v − v0) = ∇w_i·v − b_i`.
pub fn linearize_warped(u: &ImageSequence, v0: &FlowSequence) -> Result<(FlowOperator, Vec<f64>)> {
    let n = u.n();
    let m = n * n;
    if v0.n() != n || v0.n_fields() + 1 != u.n_t() {
        return Err(Error::mismatch("linearisation flow does not match the images"));
    }
    let n_fields = v0.n_fields();
    let mut grads = vec![0.0; n_fields * 2 * m];
    let mut b = vec![0.0; n_fields * m];
    let mut neg = vec![0.0; 2 * m];
    for i in 0..n_fields {
        neg.iter_mut().zip(v0.field(i)).for_each(|(a, b)| *a = -b);
        let w = warp(u.frame(i), &neg, n);
        let g = &mut grads[i * 2 * m..(i + 1) * 2 * m];
        gradient_into(&w, n, g);
        let (gx, gy) = g.split_at(m);
        let (v1, v2) = (v0.component(i, 0), v0.component(i, 1));
        let next = u.frame(i + 1);
        for j in 0..m {
            b[i * m + j] = w[j] - next[j] + gx[j] * v1[j] + gy[j] * v2[j];
        }
    }
    Ok((FlowOperator::from_gradients(n, n_fields, grads)?, b))
}

/// Coarse-to-fine flow estimate for fixed `u`, starting from `v_init`.
///
/// The images are restricted `levels − 1` times; at each level the flow is
/// refined by `warps` warped linearisations, then prolonged (and doubled) to
/// the next finer level.
pub fn solve_v_pyramid(u: &ImageSequence, v_init: &FlowSequence, params: &SolverParams) -> Result<VSolution> {
    let levels = params.pyramid_levels;
    let mut images = vec![u.clone()];
    for _ in 1..levels {
        let coarser = restrict_sequence(images.last().unwrap());
        images.push(coarser);
    }
    let mut v = v_init.clone();
    for _ in 1..levels {
        v = restrict_flow(&v);
    }
    debug_assert_eq!(v.n(), images.last().unwrap().n());

    let mut last = None;
    for level in (0..levels).rev() {
        let img = &images[level];
        if v.n() != img.n() {
            v = prolong_flow(&v, img.n());
        }
        for _ in 0..params.pyramid_warps {
            let (flow_op, b) = linearize_warped(img, &v)?;
            let sol = solve_v_linearized(&flow_op, &b, params, Some(&v), None)?;
            v = sol.v.clone();
            last = Some(sol);
        }
    }
    last.ok_or_else(|| Error::invalid("pyramid produced no level"))
}

/// [`joint_solve`] with the flow step run coarse-to-fine. The Radon data
/// term always stays at full resolution. One level is exactly
/// [`joint_solve`].
pub fn joint_solve_pyramid(
    op: &BlockDiagonalOperator,
    m: &SinogramStack,
    params: &SolverParams,
) -> Result<JointResult> {
    params.validate()?;
    if params.pyramid_levels == 1 {
        return joint_solve(op, m, params, None, None);
    }
    check_measurements(op, m)?;
    let (u, v) = initial_state(op, None, None)?;
    let mut step = |u: &ImageSequence, v: &FlowSequence, _d: Option<&DualStateV>| solve_v_pyramid(u, v, params);
    outer_loop(op, m, params, u, v, &mut step)
}
