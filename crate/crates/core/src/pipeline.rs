//! End-to-end inference: voxelize and encode each frame, stack in time, run
//! the backbone, then decode flow for the points of frame `t`.

use rayon::prelude::*;

use crate::decoder::decode;
use crate::error::{Error, Result};
use crate::nn::FeatureMatrix;
use crate::pointcloud::{FlowField, SceneSequence, FRAME_T};
use crate::stdcb::backbone_forward;
use crate::voxelizer::{
    encode_point_features, pool_to_voxels, stack_temporal, voxelize, SparseTensor4D, VoxelFeatureMap, VoxelGrid,
    VoxelizationResult,
};
use crate::weights::{ModelShape, ModelWeights};

/// Per-frame encoder products.
#[derive(Debug, Clone)]
pub struct EncodedFrame {
    pub vox: VoxelizationResult,
    pub point_features: FeatureMatrix,
    pub voxel_features: FeatureMatrix,
}

pub fn encode_frames(scene: &SceneSequence, grid: &VoxelGrid, w: &ModelWeights) -> Result<Vec<EncodedFrame>> {
    scene
        .frames
        .par_iter()
        .map(|frame| {
            let vox = voxelize(frame, grid)?;
            let point_features = encode_point_features(frame, &w.point_encoder)?;
            let voxel_features = pool_to_voxels(&point_features, &vox)?;
            Ok(EncodedFrame { vox, point_features, voxel_features })
        })
        .collect()
}

/// Features of `tensor` at time `tau` for each occupied voxel of `vox`; voxels
/// inactive at `tau` get zeros.
pub fn extract_slice(tensor: &SparseTensor4D, vox: &VoxelizationResult, tau: usize) -> Result<FeatureMatrix> {
    let c = tensor.channels();
    let mut out = FeatureMatrix::zeros(vox.voxels.len(), c);
    for (i, v) in vox.voxels.iter().enumerate() {
        let key = [tau as i32, v.coord.ix as i32, v.coord.iy as i32, v.coord.iz as i32];
        if let Some(f) = tensor.get(&key) {
            out.row_mut(i).copy_from_slice(f);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub flow: FlowField,
    /// Backbone output, kept for the tensor dump.
    pub features: SparseTensor4D,
}

pub fn infer(scene: &SceneSequence, grid: &VoxelGrid, shape: &ModelShape, w: &ModelWeights) -> Result<InferenceOutput> {
    scene.validate()?;
    shape.validate()?;
    let frames = encode_frames(scene, grid, w)?;
    let maps = frames
        .iter()
        .map(|f| VoxelFeatureMap::new(&f.vox, f.voxel_features.clone()))
        .collect::<Result<Vec<_>>>()?;
    let f_4d = stack_temporal(&maps)?;
    let features = backbone_forward(&f_4d, &shape.backbone, &w.backbone)?;
    if let Some(i) = features.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric { index: i / features.channels().max(1), message: "non-finite backbone feature".into() });
    }
    let target = &frames[FRAME_T];
    let slice = extract_slice(&features, &target.vox, shape.decoder.frame.time_index())?;
    let flow = decode(&slice, &target.point_features, &target.vox, &w.decoder, &shape.decoder)?;
    Ok(InferenceOutput { flow, features })
}
