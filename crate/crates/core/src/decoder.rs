//! Point-wise flow decoder: offset encoding, coarse feature assembly,
//! Morton-ordered FlowSSM refinement and the flow head.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::nn::{FeatureMatrix, Initializer, Mlp};
use crate::pointcloud::FlowField;
use crate::serialization::morton_order;
use crate::ssm::{FlowSsmLayer, HiddenState, SsmParams, TokenSequence, ZohMode};
use crate::voxelizer::{devoxelize_coarse, VoxelizationResult};

pub const FLOW_MAGIC: &[u8; 4] = b"SFFL";
pub const FLOW_VERSION: u16 = 1;
pub const MAX_DECODER_LAYERS: usize = 5;

/// Which backbone time slice feeds the decoder. Output points are always
/// those of frame `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeFrame {
    #[default]
    T,
    TPlus1,
}

impl DecodeFrame {
    pub fn time_index(self) -> usize {
        match self {
            DecodeFrame::T => crate::pointcloud::FRAME_T,
            DecodeFrame::TPlus1 => crate::pointcloud::FRAME_T_PLUS_1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// FlowSSM cascade length.
    pub n_layers: usize,
    pub channels: usize,
    /// SSM state size per channel.
    pub state: usize,
    pub head_hidden: usize,
    pub zoh: ZohMode,
    pub frame: DecodeFrame,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n_layers: 1, channels: 16, state: 16, head_hidden: 16, zoh: ZohMode::Simplified, frame: DecodeFrame::T }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_DECODER_LAYERS).contains(&self.n_layers) {
            return Err(Error::InvalidConfig(format!(
                "decoder layers must be in 1..={MAX_DECODER_LAYERS}, got {}",
                self.n_layers
            )));
        }
        if self.channels == 0 || self.state == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidConfig("decoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Width of the refined sequence (`2C`).
    pub fn d_inner(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// `3 -> C -> C`.
    pub offset_encoder: Mlp,
    pub layers: Vec<SsmParams>,
    /// `3C -> hidden -> 3`.
    pub head: Mlp,
}

impl DecoderWeights {
    pub fn zeros(cfg: &DecoderConfig) -> Self {
        let c = cfg.channels;
        Self {
            offset_encoder: Mlp::zeros(3, c, c),
            layers: (0..cfg.n_layers).map(|_| SsmParams::zeros(cfg.d_inner(), cfg.state, c)).collect(),
            head: Mlp::zeros(3 * c, cfg.head_hidden, 3),
        }
    }

    pub fn seeded(init: &mut Initializer, cfg: &DecoderConfig) -> Self {
        let c = cfg.channels;
        let offset_encoder = Mlp::seeded(init, 3, c, c);
        let layers = (0..cfg.n_layers).map(|_| SsmParams::seeded(init, cfg.d_inner(), cfg.state, c)).collect();
        let head = Mlp::seeded(init, 3 * c, cfg.head_hidden, 3);
        Self { offset_encoder, layers, head }
    }

    pub fn param_count(&self) -> usize {
        self.offset_encoder.param_count()
            + self.layers.iter().map(SsmParams::param_count).sum::<usize>()
            + self.head.param_count()
    }

    pub fn check(&self, cfg: &DecoderConfig) -> Result<()> {
        self.offset_encoder.check()?;
        self.head.check()?;
        let c = cfg.channels;
        if self.offset_encoder.in_dim() != 3 || self.offset_encoder.out_dim() != c {
            return Err(Error::shape(format!("offset encoder must map 3 -> {c}")));
        }
        if self.head.in_dim() != 3 * c || self.head.out_dim() != 3 {
            return Err(Error::shape(format!("flow head must map {} -> 3", 3 * c)));
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::shape(format!("{} FlowSSM layers for n_layers = {}", self.layers.len(), cfg.n_layers)));
        }
        for p in &self.layers {
            p.check()?;
            if p.d_inner != cfg.d_inner() || p.offset_channels != c || p.state != cfg.state {
                return Err(Error::shape("FlowSSM layer widths do not match decoder config"));
            }
        }
        Ok(())
    }
}

/// `F_offset`: the offset encoder applied to each point's voxel offset.
pub fn encode_offsets(offsets: &FeatureMatrix, w: &Mlp) -> Result<FeatureMatrix> {
    if offsets.cols() != 3 {
        return Err(Error::shape(format!("offsets must have 3 columns, got {}", offsets.cols())));
    }
    w.forward_matrix(offsets)
}

/// Per point `[voxel feature | point feature]`, voxel lanes first.
pub fn assemble_coarse(
    voxel_features: &FeatureMatrix,
    point_features: &FeatureMatrix,
    vox: &VoxelizationResult,
) -> Result<FeatureMatrix> {
    if point_features.rows() != vox.n_points() {
        return Err(Error::shape(format!(
            "{} point feature rows for {} points",
            point_features.rows(),
            vox.n_points()
        )));
    }
    if voxel_features.cols() != point_features.cols() {
        return Err(Error::shape(format!(
            "voxel width {} differs from point width {}",
            voxel_features.cols(),
            point_features.cols()
        )));
    }
    devoxelize_coarse(voxel_features, vox)?.hconcat(point_features)
}

fn to_tokens(m: FeatureMatrix) -> Result<TokenSequence> {
    let (rows, cols) = (m.rows(), m.cols());
    TokenSequence::new(1, rows, cols, m.into_vec())
}

fn to_matrix(t: TokenSequence) -> Result<FeatureMatrix> {
    FeatureMatrix::from_vec(t.len, t.channels, t.data)
}

/// Refines coarse point features with the FlowSSM cascade and regresses
/// one flow vector per point, in input point order.
pub fn decode(
    voxel_features: &FeatureMatrix,
    point_features: &FeatureMatrix,
    vox: &VoxelizationResult,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
) -> Result<FlowField> {
    cfg.validate()?;
    w.check(cfg)?;
    if point_features.cols() != cfg.channels {
        return Err(Error::shape(format!(
            "decoder width {} but point features have {} channels",
            cfg.channels,
            point_features.cols()
        )));
    }
    let coarse = assemble_coarse(voxel_features, point_features, vox)?;
    let f_offset = encode_offsets(&vox.offsets_matrix(), &w.offset_encoder)?;

    let coords: Vec<_> = (0..vox.n_points()).map(|i| vox.point_coord(i)).collect();
    let perm = morton_order(&coords)?;
    let mut x = to_tokens(perm.apply(&coarse)?)?;
    let offset_seq = to_tokens(perm.apply(&f_offset)?)?;

    let mut h = HiddenState::zeros(1, cfg.d_inner(), cfg.state);
    for params in &w.layers {
        let layer = FlowSsmLayer::new(params.clone(), cfg.zoh);
        let (y, h_next) = layer.forward(&x, &offset_seq, &h)?;
        x = y;
        h = h_next;
    }

    let refined = perm.invert(&to_matrix(x)?)?;
    let offsets_back = perm.invert(&to_matrix(offset_seq)?)?;
    let head_in = refined.hconcat(&offsets_back)?;
    let flow = w.head.forward_matrix(&head_in)?;
    let mut vectors = Vec::with_capacity(flow.rows());
    for (i, r) in flow.iter_rows().enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { index: i, message: "flow head produced a non-finite value".into() });
        }
        vectors.push([r[0], r[1], r[2]]);
    }
    Ok(FlowField::new(vectors))
}

/// Binary flow file; components are stored as `f32`.
pub fn encode_flow(flow: &FlowField) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(FLOW_MAGIC);
    w.u16(FLOW_VERSION);
    w.u64(flow.len() as u64);
    for (i, v) in flow.vectors.iter().enumerate() {
        for c in v {
            let f = *c as f32;
            if !f.is_finite() {
                return Err(Error::Numeric { index: i, message: "flow component not representable as f32".into() });
            }
            w.f32(f);
        }
    }
    Ok(w.buf)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(FLOW_MAGIC)?;
    let at = r.offset();
    let version = r.u16("version")?;
    if version != FLOW_VERSION {
        return Err(Error::format(at, format!("unsupported flow version {version}")));
    }
    let n = r.count(12, "point count")?;
    let mut vectors = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let v = [r.f32("flow x")? as f64, r.f32("flow y")? as f64, r.f32("flow z")? as f64];
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::format(at, "non-finite flow component"));
        }
        vectors.push(v);
    }
    if !r.is_empty() {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(FlowField::new(vectors))
}

pub fn save_flow(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_flow(flow)?)?;
    Ok(())
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flow(&std::fs::read(path)?)
}

/// `index,dx,dy,dz` per point.
pub fn write_flow_csv<W: Write>(flow: &FlowField, mut out: W) -> Result<()> {
    writeln!(out, "index,dx,dy,dz")?;
    for (i, v) in flow.vectors.iter().enumerate() {
        writeln!(out, "{i},{},{},{}", v[0], v[1], v[2])?;
    }
    Ok(())
}
