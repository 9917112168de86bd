//! File formats and the command-line pipeline.

use std::path::{Path, PathBuf};
use std::process::Command;

use dynct::cli::{self, CellOutcome};
use dynct::config::{RunConfig, TableCell};
use dynct::io::{self, FlowFile, ImageFile, Meta, SinogramFile};
use dynct::metrics::MetricReport;
use dynct::schedule;
use dynct::sequence::{SinogramStack, SinogramStep};
use dynct::solver::Fidelity;
use dynct::{DetectorSpec, FlowSequence, GridSpec, ImageSequence};
use proptest::prelude::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynct"))
}

/// A small, quick configuration.
fn small_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig::pinball(12, 4);
    c.out_dir = dir.to_path_buf();
    c.solver.outer_max_iters = 2;
    c.solver.inner_max_iters = 200;
    c.validate().unwrap();
    c
}

fn write_config(dir: &Path, c: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, c.to_toml().unwrap()).unwrap();
    p
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE), Just(1.0 / 3.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn image_files_round_trip(n_t in 1usize..4, n in 1usize..6, seed in any::<u64>(), label in "[a-z_]{0,8}") {
        let data: Vec<f64> = (0..n_t * n * n).map(|i| ((i as u64 ^ seed) as f64).sin() * 1e3).collect();
        let mut meta = Meta::new();
        meta.insert("label".into(), label);
        let f = ImageFile { meta, images: ImageSequence::from_vec(n_t, n, data).unwrap() };
        let back = io::decode_images(Path::new("x"), &io::encode_images(&f).unwrap()).unwrap();
        prop_assert_eq!(back.images.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        f.images.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back, f);
    }

    #[test]
    fn flow_files_round_trip(k in 0usize..3, n in 1usize..5, xs in prop::collection::vec(finite(), 50)) {
        let data: Vec<f64> = (0..k * 2 * n * n).map(|i| xs[i % xs.len()]).collect();
        let f = FlowFile { meta: Meta::new(), flow: FlowSequence::from_vec(k, n, data).unwrap() };
        let back = io::decode_flow(Path::new("x"), &io::encode_flow(&f).unwrap()).unwrap();
        prop_assert_eq!(back.flow.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        f.flow.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn sinogram_files_round_trip(counts in prop::collection::vec(1usize..4, 1..5), bins in 1usize..6,
                                 xs in prop::collection::vec(finite(), 30), seed in 0u64..1000) {
        let steps: Vec<SinogramStep> = counts.iter().enumerate().map(|(t, &c)| SinogramStep {
            angles: (0..c).map(|j| (t * 7 + j) as f64 * 0.1 % std::f64::consts::PI).collect(),
            values: (0..c * bins).map(|i| xs[(i + t) % xs.len()]).collect(),
        }).collect();
        let f = SinogramFile {
            grid: GridSpec { n: 3, pixel_size: 0.7, origin: [0.1, -0.2] },
            detector: DetectorSpec { n_bins: bins, bin_spacing: 0.3 },
            protocol: "custom".into(),
            schedule_seed: if seed % 2 == 0 { Some(seed) } else { None },
            extra: Meta::new(),
            stack: SinogramStack { n_bins: bins, steps, noise_level: 0.01, seed },
        };
        let bytes = io::encode_sinogram(&f).unwrap();
        prop_assert_eq!(io::decode_sinogram(Path::new("x"), &bytes).unwrap(), f);
        // Every strict prefix is rejected.
        let cut = (seed as usize) % bytes.len();
        prop_assert!(io::decode_sinogram(Path::new("x"), &bytes[..cut]).is_err());
    }

    #[test]
    fn schedules_round_trip(n_t in 1usize..40, seed in 0u64..(i64::MAX as u64), k in 1usize..4) {
        for s in [
            schedule::randomized(n_t, seed).unwrap(),
            schedule::small_increments(n_t, std::f64::consts::PI / n_t as f64, k).unwrap(),
        ] {
            prop_assert_eq!(io::schedule_from_toml(&io::schedule_to_toml(&s).unwrap()).unwrap(), s);
        }
    }

    #[test]
    fn reports_round_trip(a in finite(), b in finite(), c in -1.0..1.0f64) {
        let r = MetricReport { label: "x".into(), rel_l1: a.abs(), rel_l2: b.abs(), ssim: c,
                               per_frame_ssim: vec![c, c], c1: 1e-4, c2: 9e-4 };
        prop_assert_eq!(io::report_from_toml(&io::report_to_toml(&[r.clone()]).unwrap()).unwrap(), vec![r.clone()]);
        let rows = io::reports_from_csv(&io::reports_to_csv(&[r.clone()])).unwrap();
        prop_assert_eq!(rows, vec![(r.label, r.rel_l1, r.rel_l2, r.ssim)]);
    }

    #[test]
    fn configs_round_trip(seed in 0u64..(i64::MAX as u64), noise in 0.0..0.1f64, fid in prop_oneof![Just(Fidelity::L1), Just(Fidelity::L2)]) {
        let mut c = RunConfig::pinball(16, 5);
        c.seed = seed;
        c.noise_level = noise;
        c.solver.fidelity = fid;
        c.schedule.protocol = "tracking".into();
        prop_assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}

#[test]
fn simulate_records_protocol_and_seed_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.schedule.seed = Some(7);
    let cfg = write_config(dir.path(), &c);
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let o = bin()
            .args(["simulate", "--protocol", "randomized", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let line = String::from_utf8_lossy(&o.stdout);
        assert!(line.contains("4 steps") && line.contains("noise_level 0.01"), "{line}");
    }
    let s = io::read_sinogram(&out1.join(cli::SINOGRAM_FILE)).unwrap();
    assert_eq!(s.protocol, "randomized");
    assert_eq!(s.schedule_seed, Some(7));
    for f in [cli::SINOGRAM_FILE, cli::TRUTH_FILE, cli::SCHEDULE_FILE] {
        assert_eq!(std::fs::read(out1.join(f)).unwrap(), std::fs::read(out2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn schedule_length_mismatch_names_both_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.schedule.n_t = Some(9);
    let text = c.to_toml().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, text).unwrap();
    let o = bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('9') && err.contains('4'), "{err}");
}

#[test]
fn constant_phantom_single_step_reconstructs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::pinball(12, 1);
    c.phantom.ball_intensity = c.phantom.ellipse_intensity;
    c.phantom.ellipse_semi_axes = [60.0, 60.0];
    c.phantom.supersample = 1;
    c.noise_level = 0.0;
    c.solver.fidelity = Fidelity::L2;
    c.out_dir = dir.path().to_path_buf();
    // One step carrying a full angular sweep.
    c.schedule = dynct::config::ScheduleConfig::named("custom");
    c.schedule.angles = Some(vec![(0..60).map(|k| k as f64 * std::f64::consts::PI / 60.0).collect()]);
    c.validate().unwrap();
    let line = cli::cmd_simulate(&c, dir.path()).unwrap();
    assert!(line.contains("1 steps"));
    let res = cli::cmd_reconstruct(&dir.path().join(cli::SINOGRAM_FILE), &c, true, dir.path()).unwrap();
    let rep = cli::cmd_evaluate(
        &dir.path().join(cli::RECON_FILE),
        &dir.path().join(cli::TRUTH_FILE),
        "const",
        dir.path(),
    )
    .unwrap();
    assert!(rep.rel_l2 <= 0.05, "rel_l2 {}", rep.rel_l2);
    assert_eq!(res.v.n_fields(), 0);
}

#[test]
fn reconstruct_writes_frames_flows_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    let cfg = write_config(dir.path(), &c);
    assert!(bin().args(["simulate", "--config"]).arg(&cfg).status().unwrap().success());
    let o = bin().args(["reconstruct", "--config"]).arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let u = io::read_images(&dir.path().join(cli::RECON_FILE)).unwrap();
    let v = io::read_flow(&dir.path().join(cli::FLOW_FILE)).unwrap();
    assert_eq!(u.images.n_t(), 4);
    assert_eq!(v.flow.n_fields(), 3);
    let trace = std::fs::read_to_string(dir.path().join(cli::TRACE_FILE)).unwrap();
    assert!(trace.lines().any(|l| l == io::TRACE_COLUMNS));
}

#[test]
fn geometry_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    cli::cmd_simulate(&c, dir.path()).unwrap();
    let mut other = c.clone();
    other.detector = Some(DetectorSpec::new(30, 0.5).unwrap());
    let err = cli::cmd_reconstruct(&dir.path().join(cli::SINOGRAM_FILE), &other, true, dir.path()).unwrap_err();
    assert!(err.to_string().contains("geometry"), "{err}");
}

#[test]
fn missing_input_reports_path_and_io_code() {
    let o = bin()
        .args(["reconstruct", "--input", "/definitely/not/here.dct", "--out"])
        .arg(std::env::temp_dir())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/not/here.dct"));
}

#[test]
fn corrupt_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    cli::cmd_simulate(&c, dir.path()).unwrap();
    let p = dir.path().join(cli::SINOGRAM_FILE);
    let mut bytes = std::fs::read(&p).unwrap();
    let k = bytes.len() - 20;
    bytes[k] ^= 0x40;
    std::fs::write(&p, bytes).unwrap();
    let o = bin().args(["reconstruct", "--input"]).arg(&p).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn evaluate_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    cli::cmd_simulate(&c, dir.path()).unwrap();
    let truth = dir.path().join(cli::TRUTH_FILE);
    let o = bin()
        .args(["evaluate", "--recon"])
        .arg(&truth)
        .arg("--truth")
        .arg(&truth)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "rel_l1 0 rel_l2 0 ssim 1");
    let csv = std::fs::read_to_string(dir.path().join(cli::METRICS_CSV)).unwrap();
    assert_eq!(csv.lines().next(), Some("label,rel_l1,rel_l2,ssim"));
    assert_eq!(csv.lines().count(), 2);
    let toml = std::fs::read_to_string(dir.path().join(cli::METRICS_TOML)).unwrap();
    assert_eq!(io::report_from_toml(&toml).unwrap()[0].per_frame_ssim.len(), 4);
}

#[test]
fn evaluate_shape_mismatch_names_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.dct");
    let b = dir.path().join("b.dct");
    for (p, t) in [(&a, 2), (&b, 3)] {
        io::write_images(
            p,
            &ImageFile {
                meta: Meta::new(),
                images: ImageSequence::zeros(t, 4),
            },
        )
        .unwrap();
    }
    let o = bin()
        .args(["evaluate", "--recon"])
        .arg(&a)
        .arg("--truth")
        .arg(&b)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("(2, 4, 4)") && err.contains("(3, 4, 4)"), "{err}");
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    let mut text_cfg = c.clone();
    text_cfg.out_dir = PathBuf::from("ignored");
    let cfg = write_config(dir.path(), &text_cfg);
    let target = dir.path().join("env_out");
    let o = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .env(cli::OUT_DIR_ENV, &target)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(target.join(cli::SINOGRAM_FILE).exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn schedule_verb_prints_parseable_schedule() {
    let o = bin().args(["schedule", "--protocol", "tracking"]).output().unwrap();
    assert!(o.status.success());
    let s = io::schedule_from_toml(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(s.n_t(), 30);
    assert_eq!(s.per_step[0].len(), 60);
    assert_eq!(s.per_step[1].len(), 1);
}

#[test]
fn single_cell_table_has_one_row_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.table = vec![TableCell {
        protocol: "tracking".into(),
        fidelity: Fidelity::L1,
    }];
    let rows = cli::cmd_table(&c, dir.path()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].result.is_ok());
    let first = std::fs::read(dir.path().join(cli::TABLE_FILE)).unwrap();
    let text = String::from_utf8_lossy(&first).to_string();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with(cli::TABLE_COLUMNS));
    cli::cmd_table(&c, dir.path()).unwrap();
    assert_eq!(std::fs::read(dir.path().join(cli::TABLE_FILE)).unwrap(), first);
}

#[test]
fn failing_cell_does_not_stop_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.table = vec![
        TableCell {
            protocol: "tracking".into(),
            fidelity: Fidelity::L2,
        },
        TableCell {
            protocol: "custom".into(),
            fidelity: Fidelity::L1,
        },
    ];
    let rows: Vec<CellOutcome> = cli::run_table(&c).unwrap();
    assert!(rows[0].result.is_ok());
    assert!(rows[1].result.as_ref().unwrap_err().contains("angles"));
    let csv = cli::table_csv(&rows);
    assert!(csv.lines().nth(2).unwrap().contains("failed"));
}
