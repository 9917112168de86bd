//! Acceptance harness: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use dynct::cli::{self, CellReport};
use dynct::config::{RunConfig, TableCell, TABLE_PROTOCOLS};
use dynct::geometry::BlockDiagonalOperator;
use dynct::linalg::LinearMap;
use dynct::metrics::{relative_error, ssim_frame, ssim_sequence};
use dynct::ops::{flow_operator_apply, flow_rhs, FlowOperator, Gradient, Transport};
use dynct::solver::{joint_solve, solve_u, solve_v, u_energy, v_energy, Fidelity, SolverParams};
use dynct::{phantom, DetectorSpec, FlowSequence, GridSpec, ImageSequence, RadonBlock};
use nalgebra::DVector;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || format!("{what} took {:.1} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_instance(&mut r);
        let grad = Gradient {
            n: inst.grid.n,
            n_frames: inst.n_t,
        };
        let transport = Transport::new(&inst.v, inst.n_t).map_err(|e| e.to_string())?;
        let flow = FlowOperator::from_images(&inst.u);
        for (name, k) in [
            ("A", &inst.op as &dyn LinearMap),
            ("grad", &grad),
            ("T", &transport),
            ("T-hat", &flow),
        ] {
            let gap = adjoint_gap(k, &mut r);
            worst = worst.max(gap);
            ensure(gap <= 1e-10, || format!("{name} adjoint gap {gap:e}"))?;
        }
    }
    let mut worst_chord: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(1..=16);
        let grid = GridSpec {
            n,
            pixel_size: r.random_range(0.25..2.0),
            origin: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
        };
        let det = DetectorSpec::new(r.random_range(3..40), r.random_range(0.1..1.5)).map_err(|e| e.to_string())?;
        let mut angles: Vec<f64> = (0..5).map(|_| r.random_range(0.0..std::f64::consts::PI)).collect();
        angles.extend([0.0, std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_4]);
        let block = RadonBlock::build(&grid, &det, &angles).map_err(|e| e.to_string())?;
        let lo = grid.lower_corner();
        let hi = [lo[0] + grid.extent(), lo[1] + grid.extent()];
        for (ai, &theta) in angles.iter().enumerate() {
            for b in 0..det.n_bins {
                let s = det.offset(b);
                let d = [theta.cos(), theta.sin()];
                let p = [grid.origin[0] - s * d[1], grid.origin[1] + s * d[0]];
                let expect = chord_oracle(p, d, lo, hi);
                let row: f64 = block.row(ai * det.n_bins + b).map(|(_, w)| w).sum();
                let err = (row - expect).abs() / grid.extent().max(1.0);
                worst_chord = worst_chord.max(err);
                ensure(err <= 1e-12, || format!("row sum {row} vs chord {expect} at theta {theta}, s {s}"))?;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10), "operator suite")?;
    Ok(format!(
        "max adjoint gap {worst:.1e}, max chord error {worst_chord:.1e}, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let n = 4;
    let mut r = rng(202);
    let f: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..1.0)).collect();
    let truth = ImageSequence::from_vec(1, n, f.clone()).map_err(|e| e.to_string())?;
    let op = BlockDiagonalOperator::identity(1, n * n);
    let v = FlowSequence::zeros(0, n);
    let alpha = 0.1;
    let params = SolverParams {
        alpha,
        gamma: 0.0,
        inner_max_iters: 400_000,
        inner_tol: 1e-13,
        ..SolverParams::pinball(Fidelity::L2)
    };
    let sol = solve_u(&op, &identity_data(&truth), &v, &params, None, None).map_err(|e| e.to_string())?;
    let fv = DVector::from_vec(f.clone());
    let e_oracle = rof_energy(&newton_rof(&fv, n, alpha), &fv, &difference_matrix(n), alpha);
    let e_solver = u_energy(&op, &f, &v, &params, sol.u.as_slice());
    let rel = (e_solver - e_oracle).abs() / e_oracle;
    ensure(rel <= 1e-6, || format!("solve_u energy {e_solver} vs oracle {e_oracle} (rel {rel:.1e})"))?;

    // Translating ramp: the data term vanishes wherever the x-difference exists.
    let n = 8;
    let u = ImageSequence::from_frames(n, vec![ramp(n, 0.0), ramp(n, 1.0)]).map_err(|e| e.to_string())?;
    let vparams = SolverParams {
        inner_max_iters: 400_000,
        inner_tol: 1e-13,
        gamma: 1.0,
        ..SolverParams::pinball(Fidelity::L1)
    };
    let vs = solve_v(&u, &vparams, None, None).map_err(|e| e.to_string())?;
    let b = flow_rhs(&u);
    let res = flow_operator_apply(&u, &vs.v).map_err(|e| e.to_string())?;
    let data: f64 = (0..n * n).filter(|j| j % n != n - 1).map(|j| (res[j] - b[j]).abs()).sum();
    ensure(data <= 1e-6, || format!("ramp data term {data:e}"))?;
    let flow_op = FlowOperator::from_images(&u);
    let e_cand = v_energy(&flow_op, &b, &vparams, FlowSequence::constant(1, n, 1.0, 0.0).as_slice());
    ensure((vs.energy - e_cand).abs() <= 1e-6 * e_cand, || {
        format!("ramp energy {} vs exact solution {e_cand}", vs.energy)
    })?;
    within(start.elapsed(), Duration::from_secs(30), "oracle suite")?;
    Ok(format!(
        "ROF rel energy gap {rel:.1e}, ramp interior data term {data:.1e}, {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::pinball(21, 10);
    let sim = cli::simulate(&cfg, "randomized").map_err(|e| e.to_string())?;
    let per_step: Vec<Vec<f64>> = sim.sinogram.stack.steps.iter().map(|s| s.angles.clone()).collect();
    let op = BlockDiagonalOperator::build(&sim.sinogram.grid, &sim.sinogram.detector, &per_step)
        .map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for fid in [Fidelity::L1, Fidelity::L2] {
        let params = SolverParams {
            outer_max_iters: 6,
            outer_tol: 1e-15,
            ..SolverParams::pinball(fid)
        };
        let res = joint_solve(&op, &sim.sinogram.stack, &params, None, None).map_err(|e| e.to_string())?;
        let tr = &res.energy_trace;
        ensure(tr.len() >= 5, || format!("{fid:?}: only {} outer iterations", tr.len()))?;
        for (i, w) in tr.windows(2).enumerate() {
            ensure(w[1] <= w[0] + 1e-6 * w[0].abs(), || {
                format!("{fid:?}: energy rose at outer iteration {}: {tr:?}", i + 2)
            })?;
        }
        detail.push(format!("{}: {:.4} -> {:.4} over {}", fid.name(), tr[0], tr[tr.len() - 1], tr.len()));
    }
    within(start.elapsed(), Duration::from_secs(120), "descent runs")?;
    Ok(format!("{}, {:.1} s", detail.join("; "), start.elapsed().as_secs_f64()))
}

/// The eight table cells at full size, computed once for criteria 4 and 5.
struct TableRun {
    cells: BTreeMap<(String, &'static str), Result<CellReport, String>>,
    slowest: Duration,
}

fn full_table() -> TableRun {
    let cfg = RunConfig::default();
    let truth = phantom::ground_truth(&cfg.phantom).expect("phantom");
    let mut cells = BTreeMap::new();
    let mut slowest = Duration::ZERO;
    for fidelity in [Fidelity::L1, Fidelity::L2] {
        for p in TABLE_PROTOCOLS {
            let cell = TableCell {
                protocol: p.to_string(),
                fidelity,
            };
            let t = Instant::now();
            let r = cli::run_cell(&cfg, &cell, &truth).map(|x| x.0).map_err(|e| e.to_string());
            let dt = t.elapsed();
            slowest = slowest.max(dt);
            match &r {
                Ok(c) => println!(
                    "  cell {:<24} rel_l1 {:.4} rel_l2 {:.4} ssim {:.4} outer {} ({:.0} s)",
                    cell.label(),
                    c.report.rel_l1,
                    c.report.rel_l2,
                    c.report.ssim,
                    c.outer_iterations,
                    dt.as_secs_f64()
                ),
                Err(e) => println!("  cell {:<24} failed: {e}", cell.label()),
            }
            cells.insert((p.to_string(), fidelity.name()), r);
        }
    }
    TableRun { cells, slowest }
}

fn cell<'a>(t: &'a TableRun, p: &str, f: Fidelity) -> Result<&'a CellReport, String> {
    t.cells[&(p.to_string(), f.name())].as_ref().map_err(|e| format!("{p}/{} failed: {e}", f.name()))
}

fn criterion_4(t: &TableRun) -> Outcome {
    let rnd = cell(t, "randomized", Fidelity::L1)?.report.ssim;
    let trk = cell(t, "tracking", Fidelity::L1)?.report.ssim;
    let si1 = cell(t, "small_increments_1", Fidelity::L1)?.report.ssim;
    let si1_l2 = cell(t, "small_increments_1", Fidelity::L2)?.report.ssim;
    let summary = format!(
        "L1 SSIM randomized {rnd:.4} > tracking {trk:.4} > small_increments_1 {si1:.4}; L2 small_increments_1 {si1_l2:.4}; slowest cell {:.0} s",
        t.slowest.as_secs_f64()
    );
    ensure(rnd > trk && trk > si1, || format!("ordering violated: {summary}"))?;
    ensure(rnd >= 0.80, || format!("randomized L1 SSIM {rnd:.4} < 0.80"))?;
    ensure(si1_l2 <= 0.55, || format!("small_increments_1 L2 SSIM {si1_l2:.4} > 0.55"))?;
    within(t.slowest, Duration::from_secs(15 * 60), "slowest cell")?;
    Ok(summary)
}

fn criterion_5(t: &TableRun) -> Outcome {
    let mut violations = Vec::new();
    for p in TABLE_PROTOCOLS {
        let a = &cell(t, p, Fidelity::L1)?.report;
        let b = &cell(t, p, Fidelity::L2)?.report;
        if a.rel_l1 > b.rel_l1 {
            violations.push(format!("{p}: rel_l1 L1 {:.4} > L2 {:.4}", a.rel_l1, b.rel_l1));
        }
        if b.rel_l2 > a.rel_l2 {
            violations.push(format!("{p}: rel_l2 L2 {:.4} > L1 {:.4}", b.rel_l2, a.rel_l2));
        }
    }
    if violations.is_empty() {
        Ok("L1 fidelity wins rel_l1 and L2 fidelity wins rel_l2 for all protocols".into())
    } else {
        Err(violations.join("; "))
    }
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::pinball(14, 5);
    cfg.solver.outer_max_iters = 3;
    cfg.solver.inner_max_iters = 400;
    cfg.table = vec![
        TableCell {
            protocol: "randomized".into(),
            fidelity: Fidelity::L1,
        },
        TableCell {
            protocol: "tracking".into(),
            fidelity: Fidelity::L2,
        },
        TableCell {
            protocol: "small_increments_2".into(),
            fidelity: Fidelity::L1,
        },
    ];
    let mut outputs = Vec::new();
    for threads in [1, 4, 4, 1] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        let out = dir.path().join(format!("t{threads}_{}", outputs.len()));
        pool.install(|| cli::cmd_table(&cfg, &out)).map_err(|e| e.to_string())?;
        outputs.push(std::fs::read(out.join(cli::TABLE_FILE)).map_err(|e| e.to_string())?);
    }
    ensure(outputs.windows(2).all(|w| w[0] == w[1]), || "table.csv differs between runs".into())?;
    let text = String::from_utf8_lossy(&outputs[0]);
    ensure(!text.contains("failed"), || format!("a cell failed:\n{text}"))?;
    Ok(format!("{} identical bytes across threads 1, 4, 4, 1", outputs[0].len()))
}

fn criterion_7() -> Outcome {
    let t = ImageSequence::from_vec(2, 2, vec![1.0, 2.0, 0.0, -1.0, 3.0, 0.5, 0.0, 1.0]).map_err(|e| e.to_string())?;
    let zero = ImageSequence::zeros(2, 2);
    let double = ImageSequence::from_vec(2, 2, t.as_slice().iter().map(|x| 2.0 * x).collect()).map_err(|e| e.to_string())?;
    for e in [1, 2] {
        let rel = |a: &ImageSequence| relative_error(a, &t, e).map_err(|x| x.to_string());
        ensure(rel(&t)? == 0.0, || format!("rel_l{e}(truth, truth) != 0"))?;
        ensure(rel(&zero)? == 1.0, || format!("rel_l{e}(0, truth) != 1"))?;
        ensure(rel(&double)? == 1.0, || format!("rel_l{e}(2 truth, truth) != 1"))?;
    }
    let a = [0.1, 0.7, 0.3, 0.9];
    ensure(ssim_frame(&a, &a, 1e-4, 9e-4) == 1.0, || "ssim(a, a) != 1".into())?;
    ensure(ssim_frame(&[0.0; 4], &[0.0; 4], 1e-4, 9e-4) == 1.0, || "ssim(0, 0) != 1".into())?;
    let b = [1.0, -1.0, 2.0, -2.0];
    let nb: Vec<f64> = b.iter().map(|x| -x).collect();
    let anti = ssim_frame(&b, &nb, 1e-300, 1e-300);
    let anti_oracle = ssim_oracle(&b, &nb, 1e-300, 1e-300);
    ensure((anti + 1.0).abs() <= 1e-12 && (anti - anti_oracle).abs() <= 1e-12, || {
        format!("ssim(b, -b) = {anti}, oracle {anti_oracle}")
    })?;
    let truth = ImageSequence::from_frames(2, vec![vec![0.0, 1.0, 0.0, 1.0]; 4]).map_err(|e| e.to_string())?;
    ensure(ssim_sequence(&truth, &truth, 1e-4, 9e-4).map_err(|e| e.to_string())? == 1.0, || {
        "ssim_sequence(truth, truth) != 1".into()
    })?;
    let mut half = truth.clone();
    for k in 2..4 {
        half.frame_mut(k).fill(0.0);
    }
    let s = ssim_sequence(&half, &truth, 1e-300, 1e-300).map_err(|e| e.to_string())?;
    ensure(s == 0.5, || format!("half-identical sequence SSIM {s}"))?;

    let mut r = rng(707);
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..1000 {
        let len = r.random_range(1..=64);
        let scale = r.random_range(0.01..10.0);
        let x: Vec<f64> = (0..len).map(|_| scale * r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..len).map(|_| scale * r.random_range(-1.0..1.0)).collect();
        let (c1, c2) = (r.random_range(1e-8..1e-2), r.random_range(1e-8..1e-2));
        let xy = ssim_frame(&x, &y, c1, c2);
        ensure(xy == ssim_frame(&y, &x, c1, c2), || format!("asymmetric on length {len}"))?;
        ensure(ssim_frame(&x, &x, c1, c2) == 1.0, || format!("ssim(x, x) != 1 on length {len}"))?;
        worst_oracle = worst_oracle.max((xy - ssim_oracle(&x, &y, c1, c2)).abs());
    }
    ensure(worst_oracle <= 1e-12, || format!("ssim differs from direct formula by {worst_oracle:e}"))?;
    Ok(format!("examples exact; 1000 random pairs symmetric and self-similar (oracle gap {worst_oracle:.1e})"))
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(msg) => {
            println!("criterion {id} PASS {name}: {msg} [{secs:.1} s]");
            true
        }
        Err(msg) => {
            println!("criterion {id} FAIL {name}: {msg} [{secs:.1} s]");
            false
        }
    }
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| selected.is_empty() || selected.contains(&id);
    let mut ok = true;
    if want(1) {
        ok &= run(1, "operator correctness", criterion_1);
    }
    if want(2) {
        ok &= run(2, "inner-solver optimality", criterion_2);
    }
    if want(3) {
        ok &= run(3, "joint energy descent", criterion_3);
    }
    if want(4) || want(5) {
        let start = Instant::now();
        let table = catch_unwind(full_table);
        println!("  full table computed in {:.0} s", start.elapsed().as_secs_f64());
        match table {
            Ok(t) => {
                if want(4) {
                    ok &= run(4, "protocol ordering", || criterion_4(&t));
                }
                if want(5) {
                    ok &= run(5, "fidelity-norm bias", || criterion_5(&t));
                }
            }
            Err(_) => {
                for id in [4, 5].into_iter().filter(|&i| want(i)) {
                    ok &= run(id, "table", || Err("table computation panicked".into()));
                }
            }
        }
    }
    if want(6) {
        ok &= run(6, "determinism", criterion_6);
    }
    if want(7) {
        ok &= run(7, "metric suite", criterion_7);
    }
    if !ok {
        std::process::exit(1);
    }
}
