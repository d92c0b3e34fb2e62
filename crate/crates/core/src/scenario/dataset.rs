//! `FPDS` dataset files.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      4 bytes  "FPDS"
//! version    u32      2
//! records    u64
//! stats      x_mean, x_std, y_scale f64; u32 step count S; S × (4 means,
//!            4 standard deviations) f64 for (x, y, cos, sin); S is 0 or L
//! entries    u32      number of shape-table entries (10)
//! entry      u16 name length, UTF-8 name, u32 rank, rank × u32 extents
//! records    records × (Σ product(extents)) × f32, entry order per record
//! ```
//!
//! Entries, in order: `ego [5]` (x, y, heading, speed, accel),
//! `neighbors [N, T, 11]`, `neighbor_valid [N, T]`, `lanes [M, P, 12]`,
//! `lane_valid [M]`, `navigation [V, P, 12]`, `navigation_valid [V]`,
//! `statics [S, 8]`, `static_valid [S]`, `future [L, 3]` (x, y, heading).
//! Masks are stored as 0.0 / 1.0. Geometry is metric in the ego frame.

use std::path::Path;

use super::{
    gen_scenario, pick_suite, sample_seed, EgoState, EgoTrajectory, LanePolyline, NeighborHistory, NormStats, Pose,
    ScenarioFrame, StaticObject, StepStats, Suite, SuiteSpec, LANE_DIM, STATE_DIM,
    NEIGHBOR_DIM, STATIC_DIM,
};
use crate::config::Config;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FPDS";
pub const VERSION: u32 = 2;
const ENTRY_NAMES: [&str; 10] = [
    "ego",
    "neighbors",
    "neighbor_valid",
    "lanes",
    "lane_valid",
    "navigation",
    "navigation_valid",
    "statics",
    "static_valid",
    "future",
];
const MAX_NAME: usize = 64;
const MAX_RANK: usize = 4;

/// Per-record counts, as recorded in the shape table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shapes {
    pub neighbors: usize,
    pub past_steps: usize,
    pub lanes: usize,
    pub points: usize,
    pub navigation: usize,
    pub statics: usize,
    pub traj_len: usize,
}

impl Shapes {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            neighbors: cfg.num_neighbors,
            past_steps: cfg.num_past_steps,
            lanes: cfg.num_lanes,
            points: cfg.points_per_polyline,
            navigation: cfg.num_nav_lanes,
            statics: cfg.num_statics,
            traj_len: cfg.traj_len,
        }
    }

    fn table(&self) -> [Vec<usize>; 10] {
        [
            vec![5],
            vec![self.neighbors, self.past_steps, NEIGHBOR_DIM],
            vec![self.neighbors, self.past_steps],
            vec![self.lanes, self.points, LANE_DIM],
            vec![self.lanes],
            vec![self.navigation, self.points, LANE_DIM],
            vec![self.navigation],
            vec![self.statics, STATIC_DIM],
            vec![self.statics],
            vec![self.traj_len, 3],
        ]
    }

    /// Floats per record.
    pub fn record_len(&self) -> usize {
        self.table().iter().map(|d| d.iter().product::<usize>()).sum()
    }

    fn from_table(t: &[Vec<usize>]) -> Result<Self> {
        let bad = |m: String| Error::format("dataset", m);
        let want_rank = [1, 3, 2, 3, 1, 3, 1, 2, 1, 2];
        for (i, d) in t.iter().enumerate() {
            if d.len() != want_rank[i] {
                return Err(bad(format!("entry {} has rank {}, expected {}", ENTRY_NAMES[i], d.len(), want_rank[i])));
            }
        }
        let s = Shapes {
            neighbors: t[1][0],
            past_steps: t[1][1],
            lanes: t[3][0],
            points: t[3][1],
            navigation: t[5][0],
            statics: t[7][0],
            traj_len: t[9][0],
        };
        if s.table().as_slice() != t {
            return Err(bad(format!("inconsistent shape table {t:?}")));
        }
        Ok(s)
    }
}

/// Frames plus the normalization statistics fitted on them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stats: NormStats,
    pub shapes: Shapes,
    pub frames: Vec<ScenarioFrame>,
}

/// Appends the statistics block shared by FPDS and FPCK.
pub(crate) fn put_stats(out: &mut Vec<u8>, s: &NormStats) -> Result<()> {
    for v in [s.x_mean, s.x_std, s.y_scale] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let n = u32::try_from(s.steps.len()).map_err(|_| Error::Invalid("too many step statistics".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for st in &s.steps {
        for v in st.mean.iter().chain(&st.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

/// Reads and validates a block written by [`put_stats`].
pub(crate) fn read_stats(r: &mut Reader<'_>) -> Result<NormStats> {
    let (x_mean, x_std, y_scale) = (r.f64()?, r.f64()?, r.f64()?);
    let n = r.u32()? as usize;
    let need = n.saturating_mul(2 * STATE_DIM * 8);
    if need > r.remaining() {
        return Err(Error::format(r.what, format!("truncated: {n} step statistics need {need} bytes, {} left", r.remaining())));
    }
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let mut st = StepStats { mean: [0.0; STATE_DIM], std: [0.0; STATE_DIM] };
        for v in st.mean.iter_mut().chain(st.std.iter_mut()) {
            *v = r.f64()?;
        }
        steps.push(st);
    }
    let s = NormStats { x_mean, x_std, y_scale, steps };
    s.validate().map_err(|e| Error::format(r.what, e.to_string()))?;
    Ok(s)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn flag(&mut self, b: bool) {
        self.f32(if b { 1.0 } else { 0.0 });
    }
}

/// Bounds-checked little-endian reader.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.what,
                format!("truncated: needed {n} bytes at offset {}, {} left", self.pos, self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(self.array()?)))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.f32()? {
            v if v == 0.0 => Ok(false),
            v if v == 1.0 => Ok(true),
            v => Err(Error::format(self.what, format!("mask value {v} at offset {}", self.pos - 4))),
        }
    }

    pub(crate) fn string(&mut self, max: usize) -> Result<String> {
        let n = self.u16()? as usize;
        if n > max {
            return Err(Error::format(self.what, format!("string of {n} bytes exceeds {max}")));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.what, "invalid UTF-8"))
    }
}

impl Dataset {
    /// Fits statistics on the frames' futures.
    pub fn new(frames: Vec<ScenarioFrame>, shapes: Shapes) -> Result<Self> {
        let mut futures = Vec::with_capacity(frames.len());
        for f in &frames {
            futures.push(f.future.as_ref().ok_or_else(|| Error::Invalid("dataset frames need a future".into()))?);
        }
        let stats = NormStats::fit(futures)?;
        Ok(Self { stats, shapes, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Errors unless the record shapes match `cfg`.
    pub fn check_config(&self, cfg: &Config) -> Result<()> {
        let want = Shapes::from_config(cfg);
        if want != self.shapes {
            return Err(Error::Invalid(format!("dataset shapes {:?} do not match the config {want:?}", self.shapes)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let sh = &self.shapes;
        let mut w = Writer(Vec::with_capacity(64 + self.frames.len() * sh.record_len() * 4));
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.frames.len() as u64);
        put_stats(&mut w.0, &self.stats)?;
        let table = sh.table();
        w.u32(table.len() as u32);
        for (name, dims) in ENTRY_NAMES.iter().zip(&table) {
            w.u16(name.len() as u16);
            w.0.extend_from_slice(name.as_bytes());
            w.u32(dims.len() as u32);
            for &d in dims {
                w.u32(d as u32);
            }
        }
        for (i, f) in self.frames.iter().enumerate() {
            let bad = |m: &str| Error::Invalid(format!("frame {i}: {m}"));
            if f.norm.is_some() {
                return Err(bad("frames are stored metric, not normalized"));
            }
            if f.neighbors.len() != sh.neighbors
                || f.lanes.len() != sh.lanes
                || f.navigation.len() != sh.navigation
                || f.statics.len() != sh.statics
            {
                return Err(bad("entity counts differ from the shape table"));
            }
            let e = f.ego;
            for v in [e.pose.x, e.pose.y, e.pose.heading, e.speed, e.accel] {
                w.f32(v);
            }
            for n in &f.neighbors {
                if n.states.len() != sh.past_steps {
                    return Err(bad("history length differs from the shape table"));
                }
                n.states.iter().flatten().for_each(|&v| w.f32(v));
            }
            f.neighbors.iter().flat_map(|n| n.valid.iter()).for_each(|&b| w.flag(b));
            for group in [&f.lanes, &f.navigation] {
                for l in group.iter() {
                    if l.points.len() != sh.points {
                        return Err(bad("polyline length differs from the shape table"));
                    }
                    l.points.iter().flatten().for_each(|&v| w.f32(v));
                }
                group.iter().for_each(|l| w.flag(l.valid));
            }
            f.statics.iter().flat_map(|s| s.features.iter()).for_each(|&v| w.f32(v));
            f.statics.iter().for_each(|s| w.flag(s.valid));
            let fut = f.future.as_ref().ok_or_else(|| bad("missing future"))?;
            if fut.len() != sh.traj_len {
                return Err(bad("future length differs from the shape table"));
            }
            for p in &fut.points {
                w.f32(p.x);
                w.f32(p.y);
                w.f32(p.heading);
            }
        }
        Ok(w.0)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(4)? != MAGIC {
            return Err(Error::format("dataset", "bad magic, not an FPDS file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let stats = read_stats(&mut r)?;
        let entries = r.u32()? as usize;
        if entries != ENTRY_NAMES.len() {
            return Err(Error::format("dataset", format!("expected {} shape entries, found {entries}", ENTRY_NAMES.len())));
        }
        let mut table = Vec::with_capacity(entries);
        for want in ENTRY_NAMES {
            let name = r.string(MAX_NAME)?;
            if name != want {
                return Err(Error::format("dataset", format!("expected entry {want:?}, found {name:?}")));
            }
            let rank = r.u32()? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::format("dataset", format!("entry {name} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            table.push(dims);
        }
        let shapes = Shapes::from_table(&table)?;
        if shapes.traj_len == 0 || shapes.past_steps == 0 || shapes.points == 0 {
            return Err(Error::format("dataset", "zero-length trajectory, history or polyline"));
        }
        if !stats.steps.is_empty() && stats.steps.len() != shapes.traj_len {
            return Err(Error::format("dataset", format!("{} step statistics for trajectories of {}", stats.steps.len(), shapes.traj_len)));
        }
        // Guard every allocation against the bytes actually present.
        let rec_bytes = shapes
            .table()
            .iter()
            .try_fold(0usize, |acc, d| d.iter().try_fold(4usize, |p, &x| p.checked_mul(x)).and_then(|b| acc.checked_add(b)))
            .ok_or_else(|| Error::format("dataset", "record size overflows"))?;
        let total = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(rec_bytes))
            .ok_or_else(|| Error::format("dataset", "record count overflows"))?;
        if total != r.remaining() {
            return Err(Error::format(
                "dataset",
                format!("{count} records of {rec_bytes} bytes need {total} bytes, found {}", r.remaining()),
            ));
        }

        let mut frames = Vec::with_capacity(count as usize);
        for _ in 0..count {
            frames.push(Self::decode_record(&mut r, &shapes)?);
        }
        Ok(Self { stats, shapes, frames })
    }

    fn decode_record(r: &mut Reader<'_>, sh: &Shapes) -> Result<ScenarioFrame> {
        let e: Vec<f64> = (0..5).map(|_| r.f32()).collect::<Result<_>>()?;
        let ego = EgoState { pose: Pose::new(e[0], e[1], e[2]), speed: e[3], accel: e[4] };
        let mut neighbors = vec![NeighborHistory::empty(sh.past_steps); sh.neighbors];
        for n in &mut neighbors {
            for row in &mut n.states {
                for v in row.iter_mut() {
                    *v = r.f32()?;
                }
            }
        }
        for n in &mut neighbors {
            for v in &mut n.valid {
                *v = r.flag()?;
            }
        }
        let mut polys = |count: usize| -> Result<Vec<LanePolyline>> {
            let mut out = vec![LanePolyline::empty(sh.points); count];
            for l in &mut out {
                for p in &mut l.points {
                    for v in p.iter_mut() {
                        *v = r.f32()?;
                    }
                }
            }
            for l in &mut out {
                l.valid = r.flag()?;
            }
            Ok(out)
        };
        let lanes = polys(sh.lanes)?;
        let navigation = polys(sh.navigation)?;
        let mut statics = vec![StaticObject::EMPTY; sh.statics];
        for s in &mut statics {
            for v in s.features.iter_mut() {
                *v = r.f32()?;
            }
        }
        for s in &mut statics {
            s.valid = r.flag()?;
        }
        let mut points = Vec::with_capacity(sh.traj_len);
        for _ in 0..sh.traj_len {
            let (x, y, h) = (r.f32()?, r.f32()?, r.f32()?);
            points.push(Pose::new(x, y, h));
        }
        let frame = ScenarioFrame {
            ego,
            neighbors,
            lanes,
            navigation,
            statics,
            future: Some(EgoTrajectory { points }),
            norm: None,
        };
        if !frame_is_finite(&frame) {
            return Err(Error::format("dataset", "non-finite value in record"));
        }
        Ok(frame)
    }

    /// `num` scenarios, suite `i` drawn from `suites` and laid out from
    /// [`sample_seed`]`(seed, i)`. Frames are quantized up front so the
    /// in-memory dataset equals its file round trip.
    pub fn generate(suites: &[Suite], num: usize, seed: u64, cfg: &Config) -> Result<Self> {
        if suites.is_empty() || num == 0 {
            return Err(Error::Invalid("gen-data needs at least one suite and one sample".into()));
        }
        let mut frames = Vec::with_capacity(num);
        for i in 0..num as u64 {
            let spec = SuiteSpec::new(pick_suite(suites, seed, i));
            frames.push(quantize(&gen_scenario(&spec, sample_seed(seed, i), cfg)?));
        }
        Self::new(frames, Shapes::from_config(cfg))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn frame_is_finite(f: &ScenarioFrame) -> bool {
    let e = &f.ego;
    [e.pose.x, e.pose.y, e.pose.heading, e.speed, e.accel].iter().all(|v| v.is_finite())
        && f.neighbors.iter().all(|n| n.states.iter().flatten().all(|v| v.is_finite()))
        && f.lanes.iter().chain(&f.navigation).all(|l| l.points.iter().flatten().all(|v| v.is_finite()))
        && f.statics.iter().all(|s| s.features.iter().all(|v| v.is_finite()))
        && f.future.as_ref().map_or(true, EgoTrajectory::is_finite)
}

/// Rounds every stored value through `f32`, matching what a dataset
/// round trip yields.
pub fn quantize(frame: &ScenarioFrame) -> ScenarioFrame {
    let q = |v: f64| f64::from(v as f32);
    let mut f = frame.clone();
    f.ego.pose = Pose::new(q(f.ego.pose.x), q(f.ego.pose.y), q(f.ego.pose.heading));
    f.ego.speed = q(f.ego.speed);
    f.ego.accel = q(f.ego.accel);
    f.neighbors.iter_mut().flat_map(|n| n.states.iter_mut()).flatten().for_each(|v| *v = q(*v));
    f.lanes.iter_mut().chain(f.navigation.iter_mut()).flat_map(|l| l.points.iter_mut()).flatten().for_each(|v| *v = q(*v));
    f.statics.iter_mut().flat_map(|s| s.features.iter_mut()).for_each(|v| *v = q(*v));
    if let Some(fut) = &mut f.future {
        for p in &mut fut.points {
            *p = Pose::new(q(p.x), q(p.y), q(p.heading));
        }
    }
    f
}
