//! Voxel assignment with offset preservation, point/voxel feature encoding,
//! coarse devoxelization and temporal stacking into a sparse 4D tensor.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::nn::FeatureMatrix;
use crate::nn::Mlp;
use crate::pointcloud::PointCloud;

/// Largest per-axis extent representable in a 63-bit Morton key.
pub const MAX_AXIS_EXTENT: u32 = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGrid {
    pub origin: [f64; 3],
    pub cell_size: f64,
    pub extents: [u32; 3],
}

impl Default for VoxelGrid {
    fn default() -> Self {
        Self { origin: [-10.2, -10.2, -2.0], cell_size: 0.2, extents: [102, 102, 32] }
    }
}

impl VoxelGrid {
    pub fn new(origin: [f64; 3], cell_size: f64, extents: [u32; 3]) -> Result<Self> {
        let g = Self { origin, cell_size, extents };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(Error::InvalidConfig(format!("cell_size must be positive, got {}", self.cell_size)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("grid origin must be finite".into()));
        }
        if self.extents.iter().any(|&e| e == 0 || e > MAX_AXIS_EXTENT) {
            return Err(Error::InvalidConfig(format!(
                "grid extents must lie in 1..={MAX_AXIS_EXTENT}, got {:?}",
                self.extents
            )));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> u64 {
        self.extents.iter().map(|&e| e as u64).product()
    }

    pub fn center(&self, c: VoxelCoord) -> [f64; 3] {
        let idx = [c.ix, c.iy, c.iz];
        std::array::from_fn(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.cell_size)
    }

    /// Cell containing `p` plus the normalized offset from the cell center,
    /// or `None` outside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<(VoxelCoord, [f64; 3])> {
        let mut idx = [0u32; 3];
        let mut offset = [0.0; 3];
        for a in 0..3 {
            let rel = (p[a] - self.origin[a]) / self.cell_size;
            let cell = rel.floor();
            if !(cell >= 0.0 && cell < self.extents[a] as f64) {
                return None;
            }
            idx[a] = cell as u32;
            offset[a] = 2.0 * (rel - cell) - 1.0;
        }
        Some((VoxelCoord::new(idx[0], idx[1], idx[2]), offset))
    }

    fn linear_index(&self, c: VoxelCoord) -> u64 {
        (c.ix as u64 * self.extents[1] as u64 + c.iy as u64) * self.extents[2] as u64 + c.iz as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VoxelCoord {
    pub ix: u32,
    pub iy: u32,
    pub iz: u32,
}

impl VoxelCoord {
    pub const fn new(ix: u32, iy: u32, iz: u32) -> Self {
        Self { ix, iy, iz }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupiedVoxel {
    pub coord: VoxelCoord,
    /// Point indices in ascending order.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelizationResult {
    pub grid: VoxelGrid,
    /// Index into `voxels` per point; `None` marks an out-of-bounds point.
    pub assignment: Vec<Option<usize>>,
    /// Offset from the voxel center scaled by half the cell size, in `[-1, 1]`.
    /// Zero for out-of-bounds points.
    pub offsets: Vec<[f64; 3]>,
    /// Occupied voxels ordered by `(ix, iy, iz)`.
    pub voxels: Vec<OccupiedVoxel>,
}

impl VoxelizationResult {
    pub fn n_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn point_coord(&self, i: usize) -> Option<VoxelCoord> {
        self.assignment[i].map(|v| self.voxels[v].coord)
    }

    pub fn out_of_bounds(&self) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i).collect()
    }

    pub fn offsets_matrix(&self) -> FeatureMatrix {
        let data = self.offsets.iter().flatten().copied().collect();
        FeatureMatrix::from_vec(self.offsets.len(), 3, data).expect("offsets are 3-wide")
    }
}

pub fn voxelize(cloud: &PointCloud, grid: &VoxelGrid) -> Result<VoxelizationResult> {
    grid.validate()?;
    let mut located = Vec::with_capacity(cloud.len());
    let mut groups: BTreeMap<u64, (VoxelCoord, Vec<usize>)> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let hit = if p.is_finite() { grid.locate(p.to_array()) } else { None };
        if let Some((coord, _)) = hit {
            groups.entry(grid.linear_index(coord)).or_insert_with(|| (coord, Vec::new())).1.push(i);
        }
        located.push(hit);
    }
    let mut voxel_of_key = HashMap::with_capacity(groups.len());
    let voxels: Vec<OccupiedVoxel> = groups
        .into_iter()
        .enumerate()
        .map(|(vi, (key, (coord, members)))| {
            voxel_of_key.insert(key, vi);
            OccupiedVoxel { coord, members }
        })
        .collect();
    let mut assignment = Vec::with_capacity(located.len());
    let mut offsets = Vec::with_capacity(located.len());
    for hit in located {
        match hit {
            Some((coord, off)) => {
                assignment.push(Some(voxel_of_key[&grid.linear_index(coord)]));
                offsets.push(off);
            }
            None => {
                assignment.push(None);
                offsets.push([0.0; 3]);
            }
        }
    }
    Ok(VoxelizationResult { grid: *grid, assignment, offsets, voxels })
}

/// Per-point features from the point encoder perceptron (3 -> C -> C) applied
/// to raw coordinates.
pub fn encode_point_features(cloud: &PointCloud, weights: &Mlp) -> Result<FeatureMatrix> {
    weights.check()?;
    if weights.in_dim() != 3 {
        return Err(Error::shape(format!("point encoder must take 3 inputs, takes {}", weights.in_dim())));
    }
    let data = cloud.points.iter().flat_map(|p| p.to_array()).collect();
    let coords = FeatureMatrix::from_vec(cloud.len(), 3, data)?;
    weights.forward_matrix(&coords)
}

/// Mean of member point features per occupied voxel.
pub fn pool_to_voxels(point_features: &FeatureMatrix, vox: &VoxelizationResult) -> Result<FeatureMatrix> {
    if point_features.rows() != vox.n_points() {
        return Err(Error::shape(format!(
            "{} feature rows for {} voxelized points",
            point_features.rows(),
            vox.n_points()
        )));
    }
    let c = point_features.cols();
    let mut out = FeatureMatrix::zeros(vox.voxels.len(), c);
    for (vi, v) in vox.voxels.iter().enumerate() {
        let row = out.row_mut(vi);
        for &p in &v.members {
            for (acc, f) in row.iter_mut().zip(point_features.row(p)) {
                *acc += f;
            }
        }
        let inv = 1.0 / v.members.len() as f64;
        for acc in row.iter_mut() {
            *acc *= inv;
        }
    }
    Ok(out)
}

/// Copies each voxel's feature onto its member points. Out-of-bounds points
/// receive zeros (see [`VoxelizationResult::out_of_bounds`]).
pub fn devoxelize_coarse(voxel_features: &FeatureMatrix, vox: &VoxelizationResult) -> Result<FeatureMatrix> {
    if voxel_features.rows() != vox.voxels.len() {
        return Err(Error::shape(format!(
            "{} voxel feature rows for {} occupied voxels",
            voxel_features.rows(),
            vox.voxels.len()
        )));
    }
    let mut out = FeatureMatrix::zeros(vox.n_points(), voxel_features.cols());
    for (i, a) in vox.assignment.iter().enumerate() {
        if let Some(v) = a {
            out.row_mut(i).copy_from_slice(voxel_features.row(*v));
        }
    }
    Ok(out)
}

/// Voxel features for one frame, keyed by voxel coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureMap {
    pub grid: VoxelGrid,
    pub coords: Vec<VoxelCoord>,
    pub features: FeatureMatrix,
}

impl VoxelFeatureMap {
    pub fn new(vox: &VoxelizationResult, features: FeatureMatrix) -> Result<Self> {
        if features.rows() != vox.voxels.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} voxels",
                features.rows(),
                vox.voxels.len()
            )));
        }
        Ok(Self { grid: vox.grid, coords: vox.voxels.iter().map(|v| v.coord).collect(), features })
    }
}

/// Sparse-tensor key `[t, x, y, z]`.
pub type Key4 = [i32; 4];

/// Map from `(t, x, y, z)` to a `C`-channel feature vector. Keys are kept
/// sorted so iteration order is deterministic.
#[derive(Debug, Clone)]
pub struct SparseTensor4D {
    channels: usize,
    time_len: usize,
    keys: Vec<Key4>,
    data: Vec<f64>,
    index: HashMap<Key4, usize>,
}

impl PartialEq for SparseTensor4D {
    fn eq(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.time_len == other.time_len
            && self.keys == other.keys
            && self.data == other.data
    }
}

impl SparseTensor4D {
    pub fn empty(channels: usize, time_len: usize) -> Self {
        Self { channels, time_len, keys: Vec::new(), data: Vec::new(), index: HashMap::new() }
    }

    pub fn from_entries(channels: usize, time_len: usize, mut entries: Vec<(Key4, Vec<f64>)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut keys = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * channels);
        for (k, v) in entries {
            if keys.last() == Some(&k) {
                return Err(Error::InvalidInput(format!("duplicate sparse key {k:?}")));
            }
            Self::check_entry(channels, time_len, &k, &v)?;
            keys.push(k);
            data.extend_from_slice(&v);
        }
        Ok(Self::assemble(channels, time_len, keys, data))
    }

    fn check_entry(channels: usize, time_len: usize, k: &Key4, v: &[f64]) -> Result<()> {
        if v.len() != channels {
            return Err(Error::shape(format!("value at {k:?} has {} channels, expected {channels}", v.len())));
        }
        if k[0] < 0 || k[0] as usize >= time_len {
            return Err(Error::InvalidInput(format!("time index {} outside 0..{time_len}", k[0])));
        }
        if let Some(j) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at {k:?} channel {j}")));
        }
        Ok(())
    }

    fn assemble(channels: usize, time_len: usize, keys: Vec<Key4>, data: Vec<f64>) -> Self {
        let index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Self { channels, time_len, keys, data, index }
    }

    /// Inserts or replaces a single entry.
    pub fn insert(&mut self, key: Key4, value: &[f64]) -> Result<()> {
        Self::check_entry(self.channels, self.time_len, &key, value)?;
        match self.keys.binary_search(&key) {
            Ok(i) => self.data[i * self.channels..(i + 1) * self.channels].copy_from_slice(value),
            Err(i) => {
                self.keys.insert(i, key);
                let at = i * self.channels;
                self.data.splice(at..at, value.iter().copied());
                self.index = self.keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
            }
        }
        Ok(())
    }

    /// Same active set with new values (`keys().len() * channels` reals).
    pub fn with_values(&self, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.keys.len() * channels {
            return Err(Error::shape(format!(
                "{} values for {} sites x {channels} channels",
                data.len(),
                self.keys.len()
            )));
        }
        if let Some(j) = data.iter().position(|x| !x.is_finite()) {
            let c = channels.max(1);
            return Err(Error::Numeric {
                index: j / c,
                message: format!("non-finite sparse value at site {:?}", self.keys[j / c]),
            });
        }
        Ok(Self {
            channels,
            time_len: self.time_len,
            keys: self.keys.clone(),
            data,
            index: self.index.clone(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn time_len(&self) -> usize {
        self.time_len
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[Key4] {
        &self.keys
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn index_of(&self, key: &Key4) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn get(&self, key: &Key4) -> Option<&[f64]> {
        self.index_of(key).map(|i| self.value(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Key4, &[f64])> + '_ {
        self.keys.iter().enumerate().map(move |(i, k)| (k, self.value(i)))
    }

    pub fn same_sites(&self, other: &SparseTensor4D) -> bool {
        self.keys == other.keys
    }

    /// Debug dump: `t,ix,iy,iz,c0..c{C-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::from("t,ix,iy,iz");
        for c in 0..self.channels {
            header.push_str(&format!(",c{c}"));
        }
        writeln!(out, "{header}")?;
        for (k, v) in self.iter() {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            writeln!(out, "{},{},{},{},{}", k[0], k[1], k[2], k[3], vals.join(","))?;
        }
        Ok(())
    }
}

/// Stacks per-frame voxel maps along time; frame `i` becomes `t = i`.
pub fn stack_temporal(frames: &[VoxelFeatureMap]) -> Result<SparseTensor4D> {
    let Some(first) = frames.first() else {
        return Err(Error::shape("no frames to stack"));
    };
    let channels = first.features.cols();
    let mut entries = Vec::with_capacity(frames.iter().map(|f| f.coords.len()).sum());
    for (t, f) in frames.iter().enumerate() {
        if f.grid != first.grid {
            return Err(Error::shape(format!("frame {t} uses a different voxel grid")));
        }
        if f.features.cols() != channels {
            return Err(Error::shape(format!(
                "frame {t} has {} channels, frame 0 has {channels}",
                f.features.cols()
            )));
        }
        if f.features.rows() != f.coords.len() {
            return Err(Error::shape(format!("frame {t} has mismatched coords and features")));
        }
        for (c, row) in f.coords.iter().zip(f.features.iter_rows()) {
            entries.push(([t as i32, c.ix as i32, c.iy as i32, c.iz as i32], row.to_vec()));
        }
    }
    SparseTensor4D::from_entries(channels, frames.len(), entries)
}
