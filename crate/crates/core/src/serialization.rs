//! Z-order (Morton) serialization of per-point rows and its exact inverse.
//!
//! Rows are stably sorted by the Morton code of their voxel coordinate, with
//! ties (co-voxel points) kept in original index order.

use crate::error::{Error, Result};
use crate::nn::FeatureMatrix;
use crate::voxelizer::{VoxelCoord, MAX_AXIS_EXTENT};

/// 63-bit key: bit `k` of axis `a` sits at bit `3k + a` (x = 0, y = 1, z = 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MortonCode(pub u64);

/// Sort key for rows without a voxel (out-of-bounds points): after every
/// valid Morton code.
pub const UNPLACED_KEY: u64 = u64::MAX;

fn spread(v: u32) -> u64 {
    let mut x = v as u64 & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x1f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

fn compact(code: u64) -> u32 {
    let mut x = code & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x1f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x1f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

pub fn morton_encode(c: VoxelCoord) -> Result<MortonCode> {
    if c.ix >= MAX_AXIS_EXTENT || c.iy >= MAX_AXIS_EXTENT || c.iz >= MAX_AXIS_EXTENT {
        return Err(Error::Range(format!("coordinate {c:?} exceeds 21 bits per axis")));
    }
    Ok(MortonCode(spread(c.ix) | (spread(c.iy) << 1) | (spread(c.iz) << 2)))
}

pub fn morton_decode(code: MortonCode) -> VoxelCoord {
    VoxelCoord::new(compact(code.0), compact(code.0 >> 1), compact(code.0 >> 2))
}

/// A permutation and its inverse.
///
/// `forward[i]` is the sequence position of original row `i`; `inverse[p]`
/// is the original row stored at position `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self { forward: (0..n).collect(), inverse: (0..n).collect() }
    }

    /// Builds from the sequence order (`order[p]` = original index at position `p`).
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut forward = vec![usize::MAX; n];
        for (pos, &orig) in order.iter().enumerate() {
            if orig >= n || forward[orig] != usize::MAX {
                return Err(Error::InvalidPermutation(format!("index {orig} repeated or out of range at position {pos}")));
            }
            forward[orig] = pos;
        }
        Ok(Self { forward, inverse: order })
    }

    /// Accepts an arbitrary pair; use [`Permutation::validate`] before trusting it.
    pub fn from_parts(forward: Vec<usize>, inverse: Vec<usize>) -> Self {
        Self { forward, inverse }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.forward.len();
        if self.inverse.len() != n {
            return Err(Error::InvalidPermutation(format!(
                "forward has {n} entries, inverse has {}",
                self.inverse.len()
            )));
        }
        for (i, &p) in self.forward.iter().enumerate() {
            if p >= n || self.inverse[p] != i {
                return Err(Error::InvalidPermutation(format!("forward/inverse disagree at index {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// Reorders rows into sequence order.
    pub fn apply(&self, rows: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check_rows(rows)?;
        let mut out = FeatureMatrix::zeros(rows.rows(), rows.cols());
        for (pos, &orig) in self.inverse.iter().enumerate() {
            out.row_mut(pos).copy_from_slice(rows.row(orig));
        }
        Ok(out)
    }

    /// Restores original row order.
    pub fn invert(&self, rows: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.validate()?;
        self.check_rows(rows)?;
        let mut out = FeatureMatrix::zeros(rows.rows(), rows.cols());
        for (orig, &pos) in self.forward.iter().enumerate() {
            out.row_mut(orig).copy_from_slice(rows.row(pos));
        }
        Ok(out)
    }

    fn check_rows(&self, rows: &FeatureMatrix) -> Result<()> {
        if rows.rows() != self.len() {
            return Err(Error::shape(format!("{} rows for a permutation of {}", rows.rows(), self.len())));
        }
        Ok(())
    }
}

/// Stable Morton ordering; `None` coordinates sort last.
pub fn morton_order(coords: &[Option<VoxelCoord>]) -> Result<Permutation> {
    let mut keyed = Vec::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        let key = match c {
            Some(c) => morton_encode(*c)?.0,
            None => UNPLACED_KEY,
        };
        keyed.push((key, i));
    }
    keyed.sort_unstable();
    Permutation::from_order(keyed.into_iter().map(|(_, i)| i).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerializedSequence {
    pub permutation: Permutation,
    /// Payload rows in sequence order.
    pub rows: FeatureMatrix,
}

/// Orders `rows` along the Z-order curve of their voxel coordinates.
pub fn serialize(rows: &FeatureMatrix, coords: &[VoxelCoord]) -> Result<SerializedSequence> {
    if rows.rows() != coords.len() {
        return Err(Error::shape(format!("{} rows but {} coordinates", rows.rows(), coords.len())));
    }
    let placed: Vec<Option<VoxelCoord>> = coords.iter().copied().map(Some).collect();
    let permutation = morton_order(&placed)?;
    let rows = permutation.apply(rows)?;
    Ok(SerializedSequence { permutation, rows })
}

pub fn deserialize(seq: &SerializedSequence) -> Result<FeatureMatrix> {
    seq.permutation.invert(&seq.rows)
}
