//! On-disk formats.
//!
//! Arrays (image sequences, flow sequences, sinograms) share one binary
//! container, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "DYNCTIMG" | "DYNCTFLW" | "DYNCTSIN"
//! version      u32       currently 1
//! meta_len     u32       length of the metadata block
//! meta         meta_len  UTF-8 lines "key=value\n", keys sorted
//! ndims        u32
//! dims         u64 × ndims
//! [sinogram only: angle count per step, u64 × dims[0]]
//! payload      f64 × (product implied by dims)
//! crc32        u32       CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Image sequences have dims `(n_t, n, n)`; flows `(n_fields, 2, n, n)`;
//! sinograms `(n_steps, n_bins)` followed by the per-step angle counts, and
//! a payload of all angles (radians) followed by all values, step-major.
//!
//! Schedules and metric reports are text: TOML for structured data, CSV for
//! tables. Every write goes to a temporary file in the target directory
//! which is then renamed into place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DetectorSpec, GridSpec};
use crate::metrics::MetricReport;
use crate::schedule::{AngleSchedule, Protocol};
use crate::sequence::{FlowSequence, ImageSequence, SinogramStack, SinogramStep};
use crate::solver::TraceRow;

pub const FORMAT_VERSION: u32 = 1;
pub const IMAGE_MAGIC: &[u8; 8] = b"DYNCTIMG";
pub const FLOW_MAGIC: &[u8; 8] = b"DYNCTFLW";
pub const SINOGRAM_MAGIC: &[u8; 8] = b"DYNCTSIN";

/// Angle convention recorded in every sinogram header.
pub const ANGLE_CONVENTION: &str =
    "theta from +x; ray direction (cos,sin); offset s along (-sin,cos); bins centred; rows angle-major";

pub type Meta = BTreeMap<String, String>;

/// Writes `bytes` to `path` atomically (temporary file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn encode_meta(meta: &Meta) -> Result<String> {
    let mut s = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("metadata entry {k:?} contains a reserved character")));
        }
        writeln!(s, "{k}={v}").unwrap();
    }
    Ok(s)
}

fn decode_meta(text: &str) -> Option<Meta> {
    text.lines()
        .map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

struct Container {
    meta: Meta,
    dims: Vec<u64>,
    counts: Vec<u64>,
    payload: Vec<f64>,
}

fn encode(magic: &[u8; 8], c: &Container) -> Result<Vec<u8>> {
    let meta = encode_meta(&c.meta)?;
    let mut out = Vec::with_capacity(32 + meta.len() + 8 * (c.dims.len() + c.counts.len() + c.payload.len()));
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(c.dims.len() as u32).to_le_bytes());
    for d in c.dims.iter().chain(&c.counts) {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &c.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

/// Parses a container; `counts_from_dim0` reads the sinogram angle counts.
fn decode(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 8],
    payload_len: impl Fn(&[u64], &[u64]) -> Option<usize>,
    counts_from_dim0: bool,
) -> Result<Container> {
    let corrupt = |reason: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 + 4 + 4 + 4 + 4 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != magic {
        return Err(corrupt(&format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    let meta_len = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
    let meta_raw = r.take(meta_len).ok_or_else(|| corrupt("truncated metadata"))?;
    let meta = std::str::from_utf8(meta_raw)
        .ok()
        .and_then(decode_meta)
        .ok_or_else(|| corrupt("malformed metadata"))?;
    let ndims = r.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
    if ndims > 8 {
        return Err(corrupt("implausible dimension count"));
    }
    let dims = (0..ndims)
        .map(|_| r.u64())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| corrupt("truncated dimensions"))?;
    let counts = if counts_from_dim0 {
        let steps = *dims.first().ok_or_else(|| corrupt("missing dimensions"))? as usize;
        if steps > body.len() / 8 {
            return Err(corrupt("implausible step count"));
        }
        (0..steps)
            .map(|_| r.u64())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt("truncated angle counts"))?
    } else {
        Vec::new()
    };
    let len = payload_len(&dims, &counts).ok_or_else(|| corrupt("dimension overflow"))?;
    let payload = r.f64s(len).ok_or_else(|| corrupt("truncated payload"))?;
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(Container {
        meta,
        dims,
        counts,
        payload,
    })
}

fn product(d: &[u64]) -> Option<usize> {
    d.iter()
        .try_fold(1usize, |acc, x| acc.checked_mul(usize::try_from(*x).ok()?))
}

/// An image sequence with free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFile {
    pub meta: Meta,
    pub images: ImageSequence,
}

pub fn encode_images(f: &ImageFile) -> Result<Vec<u8>> {
    let (n_t, n, _) = f.images.shape();
    encode(
        IMAGE_MAGIC,
        &Container {
            meta: f.meta.clone(),
            dims: vec![n_t as u64, n as u64, n as u64],
            counts: vec![],
            payload: f.images.as_slice().to_vec(),
        },
    )
}

pub fn decode_images(path: &Path, bytes: &[u8]) -> Result<ImageFile> {
    let c = decode(path, bytes, IMAGE_MAGIC, |d, _| product(d), false)?;
    if c.dims.len() != 3 || c.dims[1] != c.dims[2] {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("image dims {:?} are not (n_t, n, n)", c.dims),
        });
    }
    Ok(ImageFile {
        meta: c.meta,
        images: ImageSequence::from_vec(c.dims[0] as usize, c.dims[1] as usize, c.payload)?,
    })
}

pub fn write_images(path: &Path, f: &ImageFile) -> Result<()> {
    write_atomic(path, &encode_images(f)?)
}

pub fn read_images(path: &Path) -> Result<ImageFile> {
    decode_images(path, &read_bytes(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowFile {
    pub meta: Meta,
    pub flow: FlowSequence,
}

pub fn encode_flow(f: &FlowFile) -> Result<Vec<u8>> {
    let (k, n, _) = f.flow.shape();
    encode(
        FLOW_MAGIC,
        &Container {
            meta: f.meta.clone(),
            dims: vec![k as u64, 2, n as u64, n as u64],
            counts: vec![],
            payload: f.flow.as_slice().to_vec(),
        },
    )
}

pub fn decode_flow(path: &Path, bytes: &[u8]) -> Result<FlowFile> {
    let c = decode(path, bytes, FLOW_MAGIC, |d, _| product(d), false)?;
    if c.dims.len() != 4 || c.dims[1] != 2 || c.dims[2] != c.dims[3] {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("flow dims {:?} are not (n_fields, 2, n, n)", c.dims),
        });
    }
    Ok(FlowFile {
        meta: c.meta,
        flow: FlowSequence::from_vec(c.dims[0] as usize, c.dims[2] as usize, c.payload)?,
    })
}

pub fn write_flow(path: &Path, f: &FlowFile) -> Result<()> {
    write_atomic(path, &encode_flow(f)?)
}

pub fn read_flow(path: &Path) -> Result<FlowFile> {
    decode_flow(path, &read_bytes(path)?)
}

/// A sinogram stack with the geometry it was measured in.
#[derive(Clone, Debug, PartialEq)]
pub struct SinogramFile {
    pub grid: GridSpec,
    pub detector: DetectorSpec,
    pub protocol: String,
    pub schedule_seed: Option<u64>,
    /// Extra metadata, e.g. noise reference.
    pub extra: Meta,
    pub stack: SinogramStack,
}

fn float_str(x: f64) -> String {
    // Shortest representation that parses back to the same bits.
    format!("{x:?}")
}

pub fn encode_sinogram(f: &SinogramFile) -> Result<Vec<u8>> {
    f.stack.validate()?;
    let mut meta = f.extra.clone();
    meta.insert("angle_convention".into(), ANGLE_CONVENTION.into());
    meta.insert("grid.n".into(), f.grid.n.to_string());
    meta.insert("grid.pixel_size".into(), float_str(f.grid.pixel_size));
    meta.insert("grid.origin_x".into(), float_str(f.grid.origin[0]));
    meta.insert("grid.origin_y".into(), float_str(f.grid.origin[1]));
    meta.insert("detector.n_bins".into(), f.detector.n_bins.to_string());
    meta.insert("detector.bin_spacing".into(), float_str(f.detector.bin_spacing));
    meta.insert("noise_level".into(), float_str(f.stack.noise_level));
    meta.insert("noise_seed".into(), f.stack.seed.to_string());
    meta.insert("protocol".into(), f.protocol.clone());
    match f.schedule_seed {
        Some(s) => meta.insert("seed".into(), s.to_string()),
        None => meta.insert("seed".into(), "none".into()),
    };
    if f.stack.n_bins != f.detector.n_bins {
        return Err(Error::mismatch(format!(
            "sinogram has {} bins, detector has {}",
            f.stack.n_bins, f.detector.n_bins
        )));
    }
    let mut payload: Vec<f64> = f.stack.steps.iter().flat_map(|s| s.angles.iter().copied()).collect();
    payload.extend(f.stack.steps.iter().flat_map(|s| s.values.iter().copied()));
    encode(
        SINOGRAM_MAGIC,
        &Container {
            meta,
            dims: vec![f.stack.n_t() as u64, f.stack.n_bins as u64],
            counts: f.stack.steps.iter().map(|s| s.angles.len() as u64).collect(),
            payload,
        },
    )
}

pub fn decode_sinogram(path: &Path, bytes: &[u8]) -> Result<SinogramFile> {
    let c = decode(
        path,
        bytes,
        SINOGRAM_MAGIC,
        |d, counts| {
            if d.len() != 2 {
                return None;
            }
            let total: u64 = counts.iter().try_fold(0u64, |a, c| a.checked_add(*c))?;
            let bins = d[1];
            usize::try_from(total.checked_mul(bins.checked_add(1)?)?).ok()
        },
        true,
    )?;
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut meta = c.meta;
    let mut take = |k: &str| meta.remove(k).ok_or_else(|| corrupt(format!("missing header key {k}")));
    let parse_f = |k: &str, v: String| v.parse::<f64>().map_err(|_| corrupt(format!("bad value for {k}: {v}")));
    let parse_u = |k: &str, v: String| v.parse::<u64>().map_err(|_| corrupt(format!("bad value for {k}: {v}")));

    let grid = GridSpec {
        n: parse_u("grid.n", take("grid.n")?)? as usize,
        pixel_size: parse_f("grid.pixel_size", take("grid.pixel_size")?)?,
        origin: [
            parse_f("grid.origin_x", take("grid.origin_x")?)?,
            parse_f("grid.origin_y", take("grid.origin_y")?)?,
        ],
    };
    let detector = DetectorSpec {
        n_bins: parse_u("detector.n_bins", take("detector.n_bins")?)? as usize,
        bin_spacing: parse_f("detector.bin_spacing", take("detector.bin_spacing")?)?,
    };
    let noise_level = parse_f("noise_level", take("noise_level")?)?;
    let noise_seed = parse_u("noise_seed", take("noise_seed")?)?;
    let protocol = take("protocol")?;
    let seed = match take("seed")?.as_str() {
        "none" => None,
        s => Some(parse_u("seed", s.to_string())?),
    };
    take("angle_convention")?;

    let n_bins = c.dims[1] as usize;
    if n_bins != detector.n_bins {
        return Err(corrupt(format!(
            "dimension header says {n_bins} bins, geometry header says {}",
            detector.n_bins
        )));
    }
    let total_angles: usize = c.counts.iter().map(|x| *x as usize).sum();
    let (angles, values) = c.payload.split_at(total_angles);
    let mut steps = Vec::with_capacity(c.counts.len());
    let (mut ai, mut vi) = (0, 0);
    for k in &c.counts {
        let k = *k as usize;
        steps.push(SinogramStep {
            angles: angles[ai..ai + k].to_vec(),
            values: values[vi..vi + k * n_bins].to_vec(),
        });
        ai += k;
        vi += k * n_bins;
    }
    Ok(SinogramFile {
        grid,
        detector,
        protocol,
        schedule_seed: seed,
        extra: meta,
        stack: SinogramStack {
            n_bins,
            steps,
            noise_level,
            seed: noise_seed,
        },
    })
}

pub fn write_sinogram(path: &Path, f: &SinogramFile) -> Result<()> {
    write_atomic(path, &encode_sinogram(f)?)
}

pub fn read_sinogram(path: &Path) -> Result<SinogramFile> {
    decode_sinogram(path, &read_bytes(path)?)
}

/// Text form of an [`AngleSchedule`]: generating parameters plus the
/// explicit angles in radians with 12 significant digits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDoc {
    pub label: String,
    pub n_t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub protocol: Protocol,
    pub angles: Vec<Vec<f64>>,
}

fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits - 1, x).parse().unwrap()
}

pub fn schedule_to_toml(s: &AngleSchedule) -> Result<String> {
    let doc = ScheduleDoc {
        label: s.label.clone(),
        n_t: s.n_t(),
        seed: s.seed,
        protocol: s.protocol.clone(),
        angles: s
            .per_step
            .iter()
            .map(|a| a.iter().map(|x| round_sig(*x, 12)).collect())
            .collect(),
    };
    toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))
}

/// Parses a schedule. Generated protocols are regenerated from their
/// parameters (so the result is bit-identical to what was written) and the
/// listed angles are checked against them.
pub fn schedule_from_toml(text: &str) -> Result<AngleSchedule> {
    let doc: ScheduleDoc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if doc.angles.len() != doc.n_t {
        return Err(Error::Config(format!(
            "schedule lists {} steps but n_t = {}",
            doc.angles.len(),
            doc.n_t
        )));
    }
    if doc.protocol == Protocol::Custom {
        let mut s = AngleSchedule::custom(doc.angles)?;
        s.label = doc.label;
        return Ok(s);
    }
    let s = AngleSchedule::generate(&doc.protocol, doc.n_t, doc.seed)?;
    let consistent = s.per_step.len() == doc.angles.len()
        && s.per_step.iter().zip(&doc.angles).all(|(a, b)| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-10 * x.abs().max(1.0))
        });
    if !consistent {
        return Err(Error::Config(
            "listed angles do not match the schedule's generating parameters".into(),
        ));
    }
    Ok(s)
}

pub fn write_schedule(path: &Path, s: &AngleSchedule) -> Result<()> {
    write_atomic(path, schedule_to_toml(s)?.as_bytes())
}

pub fn read_schedule(path: &Path) -> Result<AngleSchedule> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    schedule_from_toml(&text)
}

pub const REPORT_COLUMNS: &str = "label,rel_l1,rel_l2,ssim";

/// CSV rows `label,rel_l1,rel_l2,ssim` with round-trip float formatting.
pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(REPORT_COLUMNS);
    s.push('\n');
    for r in reports {
        writeln!(
            s,
            "{},{},{},{}",
            r.label,
            float_str(r.rel_l1),
            float_str(r.rel_l2),
            float_str(r.ssim)
        )
        .unwrap();
    }
    s
}

/// `(label, rel_l1, rel_l2, ssim)` rows of a report CSV.
pub fn reports_from_csv(text: &str) -> Result<Vec<(String, f64, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_COLUMNS) {
        return Err(Error::Config(format!("report CSV must start with {REPORT_COLUMNS}")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Config(format!("bad report row {l:?}")));
            }
            let p = |x: &str| x.parse::<f64>().map_err(|_| Error::Config(format!("bad number {x:?}")));
            Ok((f[0].to_string(), p(f[1])?, p(f[2])?, p(f[3])?))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ReportDoc {
    ssim_statistics: String,
    reports: Vec<MetricReport>,
}

pub fn report_to_toml(reports: &[MetricReport]) -> Result<String> {
    toml::to_string(&ReportDoc {
        ssim_statistics: "global per-frame mean/variance/covariance, population (1/N) normalisation".into(),
        reports: reports.to_vec(),
    })
    .map_err(|e| Error::Config(e.to_string()))
}

pub fn report_from_toml(text: &str) -> Result<Vec<MetricReport>> {
    let doc: ReportDoc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    Ok(doc.reports)
}

pub const TRACE_COLUMNS: &str = "iteration,joint_energy,r_main,wall_seconds";

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("# r_main = ||u - u_old||_2 + ||v - v_old||_2\n");
    s.push_str(TRACE_COLUMNS);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.6}",
            r.iteration,
            float_str(r.joint_energy),
            float_str(r.r_main),
            r.wall_seconds
        )
        .unwrap();
    }
    s
}
