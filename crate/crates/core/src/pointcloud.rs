//! Point-cloud data model, rigid warping, synthetic scenes with known flow,
//! and the `SFSC` scene file format.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

/// Number of frames in a scene sequence (t-3 ..= t+1).
pub const SEQUENCE_LEN: usize = 5;
/// Position of frame `t` inside a [`SceneSequence`].
pub const FRAME_T: usize = 3;
/// Position of frame `t+1` (the warp target) inside a [`SceneSequence`].
pub const FRAME_T_PLUS_1: usize = 4;

pub const SCENE_MAGIC: &[u8; 4] = b"SFSC";
pub const SCENE_VERSION: u16 = 1;

/// Displacement per frame pair above which a foreground point is dynamic (m).
pub const DEFAULT_DYNAMIC_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        norm3([self.x - other.x, self.y - other.y, self.z - other.z])
    }
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Frame index relative to `t` (so -3 ..= 1).
    pub frame_index: i32,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_index: i32) -> Self {
        Self { points, frame_index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rigid transform stored as a row-major homogeneous 4x4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    m: [[f64; 4]; 4],
}

impl Pose {
    const ORTHO_TOL: f64 = 1e-9;

    pub fn new(m: [[f64; 4]; 4]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("pose has non-finite entries".into()));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidInput(format!("pose last row must be (0,0,0,1), got {:?}", m[3])));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > Self::ORTHO_TOL {
                    return Err(Error::InvalidInput(format!(
                        "pose rotation block is not orthonormal (row {i}·row {j} = {dot})"
                    )));
                }
            }
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self::from_parts([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3])
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::from_parts([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t)
    }

    /// Rotation by `yaw` radians about +z followed by translation `t`.
    pub fn yaw_translation(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self::from_parts([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], t)
    }

    fn from_parts(r: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Self { m }
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn inverse(&self) -> Self {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.m[j][i];
            }
        }
        let t = [self.m[0][3], self.m[1][3], self.m[2][3]];
        let mut ti = [0.0; 3];
        for i in 0..3 {
            ti[i] = -(r[i][0] * t[0] + r[i][1] * t[1] + r[i][2] * t[2]);
        }
        Self::from_parts(r, ti)
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = (0..4).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self { m }
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        Point::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z + m[0][3],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z + m[1][3],
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z + m[2][3],
        )
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

/// Per-point motion vectors in meters, aligned with a [`PointCloud`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowField {
    pub vectors: Vec<[f64; 3]>,
}

impl FlowField {
    pub fn new(vectors: Vec<[f64; 3]>) -> Self {
        Self { vectors }
    }

    pub fn zeros(n: usize) -> Self {
        Self { vectors: vec![[0.0; 3]; n] }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.vectors.iter().map(|v| norm3(*v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ClassLabel {
    ForegroundDynamic = 0,
    BackgroundStatic = 1,
    ForegroundStatic = 2,
}

impl ClassLabel {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::ForegroundDynamic),
            1 => Some(Self::BackgroundStatic),
            2 => Some(Self::ForegroundStatic),
            _ => None,
        }
    }

    pub fn is_foreground(self) -> bool {
        !matches!(self, Self::BackgroundStatic)
    }
}

/// Five frames warped into frame `t+1` coordinates, plus ground truth for frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<PointCloud>,
    /// Transform used to warp each frame into frame `t+1`. Empty when the
    /// scene was loaded from a file written without the pose block.
    pub poses: Vec<Pose>,
    pub gt_flow: FlowField,
    pub mask: Vec<ClassLabel>,
    pub seed: u64,
}

impl SceneSequence {
    pub fn frame_t(&self) -> &PointCloud {
        &self.frames[FRAME_T]
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != SEQUENCE_LEN {
            return Err(Error::InvalidInput(format!(
                "scene must have {SEQUENCE_LEN} frames, got {}",
                self.frames.len()
            )));
        }
        let n_t = self.frame_t().len();
        if self.gt_flow.len() != n_t || self.mask.len() != n_t {
            return Err(Error::InvalidInput(format!(
                "frame t has {n_t} points but gt flow has {} and mask has {}",
                self.gt_flow.len(),
                self.mask.len()
            )));
        }
        if !self.poses.is_empty() && self.poses.len() != SEQUENCE_LEN {
            return Err(Error::InvalidInput(format!("expected 0 or {SEQUENCE_LEN} poses, got {}", self.poses.len())));
        }
        Ok(())
    }
}

/// Applies `pose` to every point; order is preserved.
pub fn warp_to_frame(cloud: &PointCloud, pose: &Pose) -> Result<PointCloud> {
    let mut out = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        out.push(pose.apply(*p));
    }
    Ok(PointCloud::new(out, cloud.frame_index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoverConfig {
    /// Box center at frame `t`, in frame `t+1` coordinates.
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    /// Constant velocity, m/s.
    pub velocity: [f64; 3],
    pub points: usize,
}

impl Default for MoverConfig {
    fn default() -> Self {
        Self { center: [0.0, 0.0, 0.0], half_extents: [2.0, 1.0, 0.8], velocity: [0.0; 3], points: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub background_points: usize,
    /// Background is sampled uniformly in `[-hx, hx] x [-hy, hy] x [z_min, z_max]`.
    pub background_half_extent: [f64; 2],
    pub background_z: [f64; 2],
    pub movers: Vec<MoverConfig>,
    pub dt: f64,
    /// Ego velocity (m/s) and yaw rate (rad/s), constant over the sequence.
    pub ego_velocity: [f64; 3],
    pub ego_yaw_rate: f64,
    /// Standard deviation of Gaussian sensor jitter in meters; 0 disables it.
    pub jitter_std: f64,
    pub dynamic_threshold: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: SEQUENCE_LEN,
            background_points: 3000,
            background_half_extent: [9.5, 9.5],
            background_z: [-1.8, 2.0],
            movers: vec![
                MoverConfig { center: [-4.0, 2.0, 0.0], velocity: [8.0, 0.0, 0.0], ..Default::default() },
                MoverConfig {
                    center: [3.0, -3.0, 0.0],
                    half_extents: [0.3, 0.3, 0.9],
                    velocity: [1.0, 0.5, 0.0],
                    points: 80,
                },
                MoverConfig { center: [5.0, 5.0, 0.0], velocity: [0.0; 3], ..Default::default() },
            ],
            dt: 0.1,
            ego_velocity: [5.0, 0.0, 0.0],
            ego_yaw_rate: 0.05,
            jitter_std: 0.0,
            dynamic_threshold: DEFAULT_DYNAMIC_THRESHOLD,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames != SEQUENCE_LEN {
            return Err(Error::InvalidConfig(format!("frames must be {SEQUENCE_LEN}, got {}", self.frames)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.jitter_std.is_finite() && self.jitter_std >= 0.0) {
            return Err(Error::InvalidConfig(format!("jitter_std must be >= 0, got {}", self.jitter_std)));
        }
        if !(self.dynamic_threshold.is_finite() && self.dynamic_threshold >= 0.0) {
            return Err(Error::InvalidConfig("dynamic_threshold must be >= 0".into()));
        }
        let he = self.background_half_extent;
        let bz = self.background_z;
        if he.iter().any(|v| !v.is_finite() || *v < 0.0) || !bz.iter().all(|v| v.is_finite()) || bz[0] > bz[1] {
            return Err(Error::InvalidConfig("bad background extent".into()));
        }
        if !self.ego_yaw_rate.is_finite() || self.ego_velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("ego motion must be finite".into()));
        }
        for (i, m) in self.movers.iter().enumerate() {
            let finite = m.center.iter().chain(&m.half_extents).chain(&m.velocity).all(|v| v.is_finite());
            if !finite || m.half_extents.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidConfig(format!("mover {i} has invalid geometry")));
            }
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_point(p: Point) -> Point {
    Point::new(quantize(p.x), quantize(p.y), quantize(p.z))
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates a deterministic synthetic scene with rigid movers.
///
/// World coordinates coincide with the sensor frame at `t+1`. Each frame is
/// observed in its own sensor frame and warped back with the ego pose, so the
/// warp path is exercised end to end. Outputs are rounded to f32 precision so
/// the scene survives a file round trip bit-exactly.
pub fn synth_scene(config: &SceneConfig, seed: u64) -> Result<SceneSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = if config.jitter_std > 0.0 {
        Some(Normal::new(0.0, config.jitter_std).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };

    let mut frames = Vec::with_capacity(SEQUENCE_LEN);
    let mut poses = Vec::with_capacity(SEQUENCE_LEN);
    let mut gt = Vec::new();
    let mut mask = Vec::new();

    for k in 0..SEQUENCE_LEN {
        let rel_t = (k as f64 - FRAME_T_PLUS_1 as f64) * config.dt;
        let ego = Pose::yaw_translation(
            config.ego_yaw_rate * rel_t,
            [config.ego_velocity[0] * rel_t, config.ego_velocity[1] * rel_t, config.ego_velocity[2] * rel_t],
        );
        let ego_inv = ego.inverse();

        let mut world = Vec::with_capacity(config.background_points);
        let [hx, hy] = config.background_half_extent;
        for _ in 0..config.background_points {
            world.push(Point::new(
                uniform_in(&mut rng, -hx, hx),
                uniform_in(&mut rng, -hy, hy),
                uniform_in(&mut rng, config.background_z[0], config.background_z[1]),
            ));
        }
        let n_background = world.len();
        let mut mover_of_point = Vec::new();
        let frame_offset = (k as f64 - FRAME_T as f64) * config.dt;
        for (mi, m) in config.movers.iter().enumerate() {
            let c = [
                m.center[0] + m.velocity[0] * frame_offset,
                m.center[1] + m.velocity[1] * frame_offset,
                m.center[2] + m.velocity[2] * frame_offset,
            ];
            for _ in 0..m.points {
                world.push(Point::new(
                    c[0] + uniform_in(&mut rng, -m.half_extents[0], m.half_extents[0]),
                    c[1] + uniform_in(&mut rng, -m.half_extents[1], m.half_extents[1]),
                    c[2] + uniform_in(&mut rng, -m.half_extents[2], m.half_extents[2]),
                ));
                mover_of_point.push(mi);
            }
        }

        let mut sensor: Vec<Point> = world.iter().map(|p| ego_inv.apply(*p)).collect();
        if let Some(noise) = &jitter {
            for p in &mut sensor {
                p.x += noise.sample(&mut rng);
                p.y += noise.sample(&mut rng);
                p.z += noise.sample(&mut rng);
            }
        }
        let observed = PointCloud::new(sensor, k as i32 - FRAME_T as i32);
        let warped = warp_to_frame(&observed, &ego)?;
        let points = warped.points.into_iter().map(quantize_point).collect();
        frames.push(PointCloud::new(points, observed.frame_index));
        poses.push(ego);

        if k == FRAME_T {
            gt.extend(std::iter::repeat_n([0.0; 3], n_background));
            mask.extend(std::iter::repeat_n(ClassLabel::BackgroundStatic, n_background));
            for &mi in &mover_of_point {
                let v = config.movers[mi].velocity;
                let d = [quantize(v[0] * config.dt), quantize(v[1] * config.dt), quantize(v[2] * config.dt)];
                gt.push(d);
                mask.push(if norm3(d) > config.dynamic_threshold {
                    ClassLabel::ForegroundDynamic
                } else {
                    ClassLabel::ForegroundStatic
                });
            }
        }
    }

    Ok(SceneSequence { frames, poses, gt_flow: FlowField::new(gt), mask, seed })
}

fn write_triplets(w: &mut ByteWriter, items: impl ExactSizeIterator<Item = [f64; 3]>) {
    w.u64(items.len() as u64);
    for v in items {
        for c in v {
            w.f32(c as f32);
        }
    }
}

fn read_triplets(r: &mut ByteReader<'_>, what: &str) -> Result<Vec<[f64; 3]>> {
    let n = r.count(12, what)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let v = [r.f32(what)? as f64, r.f32(what)? as f64, r.f32(what)? as f64];
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::format(at, format!("non-finite value in {what}")));
        }
        out.push(v);
    }
    Ok(out)
}

/// Serializes a scene to the `SFSC` layout.
///
/// After the seed an optional pose block follows (`u64` count, then 16 `f64`
/// row-major values per pose). Readers accept files with or without it.
pub fn encode_scene(seq: &SceneSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let mut w = ByteWriter::new();
    w.bytes(SCENE_MAGIC);
    w.u16(SCENE_VERSION);
    w.u16(seq.frames.len() as u16);
    for f in &seq.frames {
        write_triplets(&mut w, f.points.iter().map(|p| p.to_array()));
    }
    write_triplets(&mut w, seq.gt_flow.vectors.iter().copied());
    w.u64(seq.mask.len() as u64);
    for m in &seq.mask {
        w.u8(m.code());
    }
    w.u64(seq.seed);
    if !seq.poses.is_empty() {
        w.u64(seq.poses.len() as u64);
        for p in &seq.poses {
            for v in p.matrix().iter().flatten() {
                w.f64(*v);
            }
        }
    }
    Ok(w.buf)
}

pub fn decode_scene(bytes: &[u8]) -> Result<SceneSequence> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(SCENE_MAGIC)?;
    let at = r.offset();
    let version = r.u16("version")?;
    if version != SCENE_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}, expected {SCENE_VERSION}")));
    }
    let at = r.offset();
    let n_frames = r.u16("frame count")? as usize;
    if n_frames != SEQUENCE_LEN {
        return Err(Error::format(at, format!("frame count must be {SEQUENCE_LEN}, got {n_frames}")));
    }
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let pts = read_triplets(&mut r, "frame points")?;
        frames.push(PointCloud::new(
            pts.into_iter().map(Point::from_array).collect(),
            i as i32 - FRAME_T as i32,
        ));
    }
    let n_t = frames[FRAME_T].len();
    let at = r.offset();
    let gt = read_triplets(&mut r, "gt flow")?;
    if gt.len() != n_t {
        return Err(Error::format(at, format!("gt flow has {} vectors, frame t has {n_t} points", gt.len())));
    }
    let at = r.offset();
    let n_mask = r.count(1, "mask")?;
    if n_mask != n_t {
        return Err(Error::format(at, format!("mask has {n_mask} entries, frame t has {n_t} points")));
    }
    let mut mask = Vec::with_capacity(n_mask);
    for _ in 0..n_mask {
        let at = r.offset();
        let code = r.u8("mask")?;
        mask.push(ClassLabel::from_code(code).ok_or_else(|| Error::format(at, format!("bad mask code {code}")))?);
    }
    let seed = r.u64("seed")?;
    let mut poses = Vec::new();
    if !r.is_empty() {
        let at = r.offset();
        let n = r.count(128, "poses")?;
        if n != SEQUENCE_LEN {
            return Err(Error::format(at, format!("pose block must hold {SEQUENCE_LEN} poses, got {n}")));
        }
        for _ in 0..n {
            let at = r.offset();
            let mut m = [[0.0; 4]; 4];
            for row in &mut m {
                for v in row.iter_mut() {
                    *v = r.f64("pose")?;
                }
            }
            poses.push(Pose::new(m).map_err(|e| Error::format(at, e.to_string()))?);
        }
    }
    if !r.is_empty() {
        return Err(Error::format(r.offset(), format!("{} trailing byte(s)", r.remaining())));
    }
    Ok(SceneSequence { frames, poses, gt_flow: FlowField::new(gt), mask, seed })
}

pub fn save_scene(seq: &SceneSequence, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_scene(seq)?)?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneSequence> {
    decode_scene(&std::fs::read(path)?)
}

/// Writes one frame as an ASCII PLY file.
pub fn write_ply<W: Write>(cloud: &PointCloud, mut out: W) -> Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "comment frame_index {}", cloud.frame_index)?;
    writeln!(out, "element vertex {}", cloud.len())?;
    writeln!(out, "property float x")?;
    writeln!(out, "property float y")?;
    writeln!(out, "property float z")?;
    writeln!(out, "end_header")?;
    for p in &cloud.points {
        writeln!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
    }
    Ok(())
}
