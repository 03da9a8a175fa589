//! Spatio-temporal deep coupling blocks over sparse 4D tensors and the
//! U-shaped backbone that stacks them.
//!
//! All block convolutions are submanifold: outputs exist exactly on the
//! input's active sites and absent neighbors contribute zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sigmoid, Initializer, Linear};
use crate::voxelizer::{Key4, SparseTensor4D};

/// How the cross-timestep branch samples time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DilationMode {
    /// Taps at `t-2, t, t+2`.
    #[default]
    Gap1,
    /// Taps at `t-1, t, t+1`, identical to the local temporal branch.
    Literal,
}

impl DilationMode {
    pub fn time_step(self) -> i32 {
        match self {
            DilationMode::Gap1 => 2,
            DilationMode::Literal => 1,
        }
    }
}

/// Dense kernel over `(kx, ky, kz, kt)` with per-axis tap spacing.
///
/// Weights are laid out `[tap][cin][cout]`, taps enumerated with `t`
/// outermost, then `x`, `y`, `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel4D {
    pub extent: [usize; 4],
    pub time_dilation: i32,
    pub cin: usize,
    pub cout: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel4D {
    pub fn zeros(extent: [usize; 4], time_dilation: i32, cin: usize, cout: usize) -> Self {
        let vol: usize = extent.iter().product();
        Self { extent, time_dilation, cin, cout, weights: vec![0.0; vol * cin * cout], bias: vec![0.0; cout] }
    }

    pub fn seeded(init: &mut Initializer, extent: [usize; 4], time_dilation: i32, cin: usize, cout: usize) -> Self {
        let vol: usize = extent.iter().product();
        Self { extent, time_dilation, cin, cout, weights: init.uniform_vec(vol * cin * cout), bias: init.uniform_vec(cout) }
    }

    /// `1x1x1x1` kernel whose weight is the identity matrix.
    pub fn identity(channels: usize) -> Self {
        let mut k = Self::zeros([1, 1, 1, 1], 1, channels, channels);
        for c in 0..channels {
            k.weights[c * channels + c] = 1.0;
        }
        k
    }

    pub fn volume(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.extent.iter().any(|&e| e == 0 || e % 2 == 0) {
            return Err(Error::shape(format!("kernel extents must be odd, got {:?}", self.extent)));
        }
        if self.time_dilation < 1 {
            return Err(Error::shape("time dilation must be >= 1"));
        }
        if self.weights.len() != self.volume() * self.cin * self.cout || self.bias.len() != self.cout {
            return Err(Error::shape(format!(
                "kernel {:?} {}->{} has {} weights and {} biases",
                self.extent,
                self.cin,
                self.cout,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("kernel weights must be finite".into()));
        }
        Ok(())
    }

    /// Key offsets `[dt, dx, dy, dz]` in weight order.
    pub fn taps(&self) -> Vec<Key4> {
        let [kx, ky, kz, kt] = self.extent;
        let half = |k: usize| (k as i32 - 1) / 2;
        let mut out = Vec::with_capacity(self.volume());
        for t in -half(kt)..=half(kt) {
            for x in -half(kx)..=half(kx) {
                for y in -half(ky)..=half(ky) {
                    for z in -half(kz)..=half(kz) {
                        out.push([t * self.time_dilation, x, y, z]);
                    }
                }
            }
        }
        out
    }
}

/// Submanifold sparse convolution.
pub fn sparse_conv(input: &SparseTensor4D, kernel: &ConvKernel4D) -> Result<SparseTensor4D> {
    kernel.check()?;
    if kernel.cin != input.channels() {
        return Err(Error::shape(format!(
            "kernel expects {} input channels, tensor has {}",
            kernel.cin,
            input.channels()
        )));
    }
    let taps = kernel.taps();
    let (cin, cout) = (kernel.cin, kernel.cout);
    let mut data = vec![0.0; input.len() * cout];
    if cout > 0 {
        data.par_chunks_mut(cout).enumerate().for_each(|(i, out)| {
            out.copy_from_slice(&kernel.bias);
            let k = input.keys()[i];
            for (ti, tap) in taps.iter().enumerate() {
                let nk = [k[0] + tap[0], k[1] + tap[1], k[2] + tap[2], k[3] + tap[3]];
                let Some(j) = input.index_of(&nk) else { continue };
                let f = input.value(j);
                let w = &kernel.weights[ti * cin * cout..(ti + 1) * cin * cout];
                for (ci, fv) in f.iter().enumerate() {
                    for (o, wv) in out.iter_mut().zip(&w[ci * cout..(ci + 1) * cout]) {
                        *o += fv * wv;
                    }
                }
            }
        });
    }
    input.with_values(cout, data)
}

/// Per-site linear map (point-wise convolution).
pub fn pointwise(input: &SparseTensor4D, layer: &Linear) -> Result<SparseTensor4D> {
    layer.check()?;
    if layer.in_dim != input.channels() {
        return Err(Error::shape(format!(
            "point-wise conv expects {} channels, tensor has {}",
            layer.in_dim,
            input.channels()
        )));
    }
    let mut data = vec![0.0; input.len() * layer.out_dim];
    if layer.out_dim > 0 {
        data.par_chunks_mut(layer.out_dim)
            .enumerate()
            .for_each(|(i, out)| layer.forward_into(input.value(i), out));
    }
    input.with_values(layer.out_dim, data)
}

fn check_aligned(a: &SparseTensor4D, b: &SparseTensor4D) -> Result<()> {
    if a.same_sites(b) {
        return Ok(());
    }
    let mut keys: Vec<Key4> = a.keys().iter().filter(|k| b.index_of(k).is_none()).copied().collect();
    keys.extend(b.keys().iter().filter(|k| a.index_of(k).is_none()).copied());
    keys.sort();
    Err(Error::Alignment { keys })
}

/// Channel-wise concatenation of two tensors on identical sites.
pub fn concat_channels(a: &SparseTensor4D, b: &SparseTensor4D) -> Result<SparseTensor4D> {
    check_aligned(a, b)?;
    let c = a.channels() + b.channels();
    let mut data = Vec::with_capacity(a.len() * c);
    for i in 0..a.len() {
        data.extend_from_slice(a.value(i));
        data.extend_from_slice(b.value(i));
    }
    a.with_values(c, data)
}

fn zip_values(a: &SparseTensor4D, b: &SparseTensor4D, f: impl Fn(f64, f64) -> f64) -> Result<SparseTensor4D> {
    check_aligned(a, b)?;
    if a.channels() != b.channels() {
        return Err(Error::shape(format!("channel mismatch: {} vs {}", a.channels(), b.channels())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    a.with_values(a.channels(), data)
}

/// Soft feature selection: point-wise conv, inference batch norm, LeakyReLU
/// and sigmoid produce the per-channel blend weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SfsmWeights {
    pub pointwise: Linear,
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    pub eps: f64,
    pub leaky_slope: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

impl SfsmWeights {
    pub fn zeros(channels: usize) -> Self {
        Self {
            pointwise: Linear::zeros(2 * channels, channels),
            bn_scale: vec![0.0; channels],
            bn_shift: vec![0.0; channels],
            bn_mean: vec![0.0; channels],
            bn_var: vec![0.0; channels],
            eps: BN_EPS,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    /// Neutral normalization (scale 1, shift 0, mean 0, variance 1).
    pub fn with_linear(pointwise: Linear) -> Self {
        let c = pointwise.out_dim;
        Self {
            pointwise,
            bn_scale: vec![1.0; c],
            bn_shift: vec![0.0; c],
            bn_mean: vec![0.0; c],
            bn_var: vec![1.0; c],
            eps: BN_EPS,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    /// Scale and variance are drawn as `1 + u` so they stay positive.
    pub fn seeded(init: &mut Initializer, channels: usize) -> Self {
        let pointwise = Linear::seeded(init, 2 * channels, channels);
        Self {
            pointwise,
            bn_scale: (0..channels).map(|_| 1.0 + init.uniform()).collect(),
            bn_shift: init.uniform_vec(channels),
            bn_mean: init.uniform_vec(channels),
            bn_var: (0..channels).map(|_| 1.0 + init.uniform()).collect(),
            eps: BN_EPS,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    pub fn channels(&self) -> usize {
        self.pointwise.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.pointwise.param_count() + 4 * self.channels()
    }

    pub fn check(&self) -> Result<()> {
        self.pointwise.check()?;
        let c = self.channels();
        if self.pointwise.in_dim != 2 * c {
            return Err(Error::shape(format!("SFSM conv must map {} -> {c}", 2 * c)));
        }
        let stats = [&self.bn_scale, &self.bn_shift, &self.bn_mean, &self.bn_var];
        if stats.iter().any(|v| v.len() != c) {
            return Err(Error::shape("batch-norm vectors must have one entry per channel"));
        }
        if stats.iter().any(|v| v.iter().any(|x| !x.is_finite())) || !self.leaky_slope.is_finite() {
            return Err(Error::InvalidInput("SFSM weights must be finite".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) || self.bn_var.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidInput("batch-norm eps must be > 0 and variances >= 0".into()));
        }
        Ok(())
    }

    /// Blend weight for one site given concatenated `[main | aux]` features.
    fn alpha_into(&self, concat: &[f64], out: &mut [f64]) {
        self.pointwise.forward_into(concat, out);
        for (c, v) in out.iter_mut().enumerate() {
            let bn = (*v - self.bn_mean[c]) / (self.bn_var[c] + self.eps).sqrt() * self.bn_scale[c] + self.bn_shift[c];
            *v = sigmoid(leaky_relu(bn, self.leaky_slope));
        }
    }
}

/// Blend weights `alpha` of the soft feature selection for each site.
pub fn sfsm_alpha(main: &SparseTensor4D, aux: &SparseTensor4D, w: &SfsmWeights) -> Result<SparseTensor4D> {
    w.check()?;
    check_aligned(main, aux)?;
    let c = w.channels();
    if main.channels() != c || aux.channels() != c {
        return Err(Error::shape(format!(
            "SFSM expects {c} channels per branch, got {} and {}",
            main.channels(),
            aux.channels()
        )));
    }
    let mut data = vec![0.0; main.len() * c];
    if c > 0 {
        data.par_chunks_mut(c).enumerate().for_each(|(i, out)| {
            let mut cat = Vec::with_capacity(2 * c);
            cat.extend_from_slice(main.value(i));
            cat.extend_from_slice(aux.value(i));
            w.alpha_into(&cat, out);
        });
    }
    main.with_values(c, data)
}

/// `alpha * main + (1 - alpha) * aux`.
pub fn sfsm(main: &SparseTensor4D, aux: &SparseTensor4D, w: &SfsmWeights) -> Result<SparseTensor4D> {
    let alpha = sfsm_alpha(main, aux, w)?;
    let data = alpha
        .data()
        .iter()
        .zip(main.data().iter().zip(aux.data()))
        .map(|(a, (m, x))| a * m + (1.0 - a) * x)
        .collect();
    main.with_values(main.channels(), data)
}

/// Two point-wise layers `C -> C -> C` producing the temporal attention.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub first: Linear,
    pub second: Linear,
}

impl GateWeights {
    pub fn zeros(channels: usize) -> Self {
        Self { first: Linear::zeros(channels, channels), second: Linear::zeros(channels, channels) }
    }

    pub fn seeded(init: &mut Initializer, channels: usize) -> Self {
        Self { first: Linear::seeded(init, channels, channels), second: Linear::seeded(init, channels, channels) }
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }
}

/// `beta = sigmoid(W2 relu(W1 f))` per site.
pub fn temporal_attention(f_temporal: &SparseTensor4D, gate: &GateWeights) -> Result<SparseTensor4D> {
    let hidden = pointwise(f_temporal, &gate.first)?;
    let relu: Vec<f64> = hidden.data().iter().map(|v| v.max(0.0)).collect();
    let hidden = hidden.with_values(hidden.channels(), relu)?;
    let pre = pointwise(&hidden, &gate.second)?;
    let beta = pre.data().iter().map(|v| sigmoid(*v)).collect();
    pre.with_values(pre.channels(), beta)
}

/// Fuses the temporal branches and gates the spatial branch.
///
/// Returns `(F_spatial', F_temporal')` with
/// `F_temporal' = sfsm(F_temporal, F_temporal_ct)` and
/// `F_spatial' = F_spatial * (1 + beta(F_temporal'))`.
pub fn temporal_gated_block(
    f_spatial: &SparseTensor4D,
    f_temporal: &SparseTensor4D,
    f_temporal_ct: &SparseTensor4D,
    sfsm_w: &SfsmWeights,
    gate: &GateWeights,
) -> Result<(SparseTensor4D, SparseTensor4D)> {
    check_aligned(f_spatial, f_temporal)?;
    let f_temporal2 = sfsm(f_temporal, f_temporal_ct, sfsm_w)?;
    let beta = temporal_attention(&f_temporal2, gate)?;
    let f_spatial2 = zip_values(f_spatial, &beta, |s, b| s * (1.0 + b))?;
    Ok((f_spatial2, f_temporal2))
}

/// Weights of one coupling block at channel width `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct StdcbWeights {
    /// `3x3x3x1` spatial branch.
    pub spatial: ConvKernel4D,
    /// `1x1x1x3` local temporal branch.
    pub temporal: ConvKernel4D,
    /// `1x1x1x3` cross-timestep branch with time dilation.
    pub temporal_ct: ConvKernel4D,
    pub sfsm_temporal: SfsmWeights,
    pub gate: GateWeights,
    pub sfsm_fuse: SfsmWeights,
    /// `2C -> C` fusion of `[fused | input]`.
    pub fusion: Linear,
}

pub const SPATIAL_EXTENT: [usize; 4] = [3, 3, 3, 1];
pub const TEMPORAL_EXTENT: [usize; 4] = [1, 1, 1, 3];

impl StdcbWeights {
    pub fn zeros(channels: usize, dilation: DilationMode) -> Self {
        Self {
            spatial: ConvKernel4D::zeros(SPATIAL_EXTENT, 1, channels, channels),
            temporal: ConvKernel4D::zeros(TEMPORAL_EXTENT, 1, channels, channels),
            temporal_ct: ConvKernel4D::zeros(TEMPORAL_EXTENT, dilation.time_step(), channels, channels),
            sfsm_temporal: SfsmWeights::zeros(channels),
            gate: GateWeights::zeros(channels),
            sfsm_fuse: SfsmWeights::zeros(channels),
            fusion: Linear::zeros(2 * channels, channels),
        }
    }

    pub fn seeded(init: &mut Initializer, channels: usize, dilation: DilationMode) -> Self {
        Self {
            spatial: ConvKernel4D::seeded(init, SPATIAL_EXTENT, 1, channels, channels),
            temporal: ConvKernel4D::seeded(init, TEMPORAL_EXTENT, 1, channels, channels),
            temporal_ct: ConvKernel4D::seeded(init, TEMPORAL_EXTENT, dilation.time_step(), channels, channels),
            sfsm_temporal: SfsmWeights::seeded(init, channels),
            gate: GateWeights::seeded(init, channels),
            sfsm_fuse: SfsmWeights::seeded(init, channels),
            fusion: Linear::seeded(init, 2 * channels, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.fusion.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.spatial.param_count()
            + self.temporal.param_count()
            + self.temporal_ct.param_count()
            + self.sfsm_temporal.param_count()
            + self.gate.param_count()
            + self.sfsm_fuse.param_count()
            + self.fusion.param_count()
    }
}

/// One coupling block: three branch convolutions, temporal fusion and
/// gating, spatial/temporal selection, then `fusion([fused | input])`.
pub fn stdcb_forward(f_sparse: &SparseTensor4D, w: &StdcbWeights) -> Result<SparseTensor4D> {
    let f_spatial = sparse_conv(f_sparse, &w.spatial)?;
    let f_temporal = sparse_conv(f_sparse, &w.temporal)?;
    let f_ct = sparse_conv(f_sparse, &w.temporal_ct)?;
    let (f_spatial2, f_temporal2) = temporal_gated_block(&f_spatial, &f_temporal, &f_ct, &w.sfsm_temporal, &w.gate)?;
    let fused = sfsm(&f_temporal2, &f_spatial2, &w.sfsm_fuse)?;
    pointwise(&concat_channels(&fused, f_sparse)?, &w.fusion)
}

/// Stride-2 `2x2x2` spatial downsampling; time is untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct DownConv {
    pub channels: usize,
    /// `[child][cin][cout]`, child index `(x&1)*4 + (y&1)*2 + (z&1)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Transposed counterpart of [`DownConv`] restricted to a target active set.
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv {
    pub channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn child_index(k: &Key4) -> usize {
    (((k[1] & 1) << 2) | ((k[2] & 1) << 1) | (k[3] & 1)) as usize
}

fn parent(k: &Key4) -> Key4 {
    [k[0], k[1] >> 1, k[2] >> 1, k[3] >> 1]
}

macro_rules! resample_ctor {
    ($t:ty) => {
        impl $t {
            pub fn zeros(channels: usize) -> Self {
                Self { channels, weights: vec![0.0; 8 * channels * channels], bias: vec![0.0; channels] }
            }

            pub fn seeded(init: &mut Initializer, channels: usize) -> Self {
                Self { channels, weights: init.uniform_vec(8 * channels * channels), bias: init.uniform_vec(channels) }
            }

            pub fn param_count(&self) -> usize {
                self.weights.len() + self.bias.len()
            }

            fn check(&self, input_channels: usize) -> Result<()> {
                let c = self.channels;
                if input_channels != c || self.weights.len() != 8 * c * c || self.bias.len() != c {
                    return Err(Error::shape(format!("resampling conv of width {c} applied to {input_channels} channels")));
                }
                Ok(())
            }
        }
    };
}

resample_ctor!(DownConv);
resample_ctor!(UpConv);

impl DownConv {
    pub fn forward(&self, input: &SparseTensor4D) -> Result<SparseTensor4D> {
        self.check(input.channels())?;
        let c = self.channels;
        let mut parents: Vec<Key4> = input.keys().iter().map(parent).collect();
        parents.sort();
        parents.dedup();
        let mut entries: Vec<(Key4, Vec<f64>)> = parents.into_iter().map(|p| (p, self.bias.clone())).collect();
        let mut slot = std::collections::HashMap::with_capacity(entries.len());
        for (i, (k, _)) in entries.iter().enumerate() {
            slot.insert(*k, i);
        }
        // children are visited in sorted key order, so sums are deterministic
        for (k, f) in input.iter() {
            let out = &mut entries[slot[&parent(k)]].1;
            let w = &self.weights[child_index(k) * c * c..(child_index(k) + 1) * c * c];
            for (ci, fv) in f.iter().enumerate() {
                for (o, wv) in out.iter_mut().zip(&w[ci * c..(ci + 1) * c]) {
                    *o += fv * wv;
                }
            }
        }
        SparseTensor4D::from_entries(c, input.time_len(), entries)
    }
}

impl UpConv {
    /// Evaluates on every site of `target`, reading each site's parent in `coarse`.
    pub fn forward(&self, coarse: &SparseTensor4D, target: &SparseTensor4D) -> Result<SparseTensor4D> {
        self.check(coarse.channels())?;
        let c = self.channels;
        let mut data = vec![0.0; target.len() * c];
        for (i, k) in target.keys().iter().enumerate() {
            let out = &mut data[i * c..(i + 1) * c];
            out.copy_from_slice(&self.bias);
            let Some(j) = coarse.index_of(&parent(k)) else { continue };
            let f = coarse.value(j);
            let w = &self.weights[child_index(k) * c * c..(child_index(k) + 1) * c * c];
            for (ci, fv) in f.iter().enumerate() {
                for (o, wv) in out.iter_mut().zip(&w[ci * c..(ci + 1) * c]) {
                    *o += fv * wv;
                }
            }
        }
        target.with_values(c, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StdcbConfig {
    pub channels: usize,
    /// Blocks per encoder level; its length is the number of levels.
    pub encoder_depths: Vec<usize>,
    /// Blocks per decoder level, one fewer entry than the encoder.
    pub decoder_depths: Vec<usize>,
    pub dilation: DilationMode,
}

impl Default for StdcbConfig {
    /// Desk-scale: two levels with one block each.
    fn default() -> Self {
        Self { channels: 16, encoder_depths: vec![1, 1], decoder_depths: vec![1], dilation: DilationMode::Gap1 }
    }
}

impl StdcbConfig {
    /// Five encoder levels `[2,2,2,2,2]` and four decoder levels `[1,1,1,1]`.
    pub fn full_scale(channels: usize) -> Self {
        Self { channels, encoder_depths: vec![2; 5], decoder_depths: vec![1; 4], dilation: DilationMode::Gap1 }
    }

    pub fn levels(&self) -> usize {
        self.encoder_depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channel width must be positive".into()));
        }
        if self.encoder_depths.is_empty() || self.encoder_depths.iter().chain(&self.decoder_depths).any(|&d| d == 0) {
            return Err(Error::InvalidConfig("stage depths must be non-empty and positive".into()));
        }
        if self.decoder_depths.len() + 1 != self.encoder_depths.len() {
            return Err(Error::InvalidConfig(format!(
                "{} encoder levels need {} decoder levels, got {}",
                self.encoder_depths.len(),
                self.encoder_depths.len() - 1,
                self.decoder_depths.len()
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count (weights, biases and batch-norm vectors).
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let conv = |vol: usize| vol * c * c + c;
        let sfsm = 2 * c * c + c + 4 * c;
        let block = conv(27) + 2 * conv(3) + 2 * sfsm + 2 * (c * c + c) + (2 * c * c + c);
        let blocks: usize = self.encoder_depths.iter().chain(&self.decoder_depths).sum();
        let transitions = self.levels() - 1;
        blocks * block + transitions * (2 * conv(8) + (2 * c * c + c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub encoder: Vec<Vec<StdcbWeights>>,
    /// `down[l]` maps level `l` to level `l + 1`.
    pub down: Vec<DownConv>,
    /// `up[l]` maps level `l + 1` back to level `l`.
    pub up: Vec<UpConv>,
    /// `skip_merge[l]`: `[skip | upsampled]` (2C) -> C at level `l`.
    pub skip_merge: Vec<Linear>,
    pub decoder: Vec<Vec<StdcbWeights>>,
}

impl BackboneWeights {
    fn build(
        cfg: &StdcbConfig,
        mut block: impl FnMut() -> StdcbWeights,
        mut down: impl FnMut() -> DownConv,
        mut up: impl FnMut() -> UpConv,
        mut merge: impl FnMut() -> Linear,
    ) -> Self {
        let encoder = cfg.encoder_depths.iter().map(|&d| (0..d).map(|_| block()).collect()).collect();
        let t = cfg.levels() - 1;
        let down = (0..t).map(|_| down()).collect();
        let up = (0..t).map(|_| up()).collect();
        let skip_merge = (0..t).map(|_| merge()).collect();
        let decoder = cfg.decoder_depths.iter().map(|&d| (0..d).map(|_| block()).collect()).collect();
        Self { encoder, down, up, skip_merge, decoder }
    }

    pub fn zeros(cfg: &StdcbConfig) -> Self {
        let c = cfg.channels;
        Self::build(
            cfg,
            || StdcbWeights::zeros(c, cfg.dilation),
            || DownConv::zeros(c),
            || UpConv::zeros(c),
            || Linear::zeros(2 * c, c),
        )
    }

    pub fn seeded(init: &mut Initializer, cfg: &StdcbConfig) -> Self {
        let c = cfg.channels;
        // one initializer threaded through every closure in construction order
        let init = std::cell::RefCell::new(init);
        Self::build(
            cfg,
            || StdcbWeights::seeded(&mut init.borrow_mut(), c, cfg.dilation),
            || DownConv::seeded(&mut init.borrow_mut(), c),
            || UpConv::seeded(&mut init.borrow_mut(), c),
            || Linear::seeded(&mut init.borrow_mut(), 2 * c, c),
        )
    }

    pub fn param_count(&self) -> usize {
        let blocks: usize = self.encoder.iter().chain(&self.decoder).flatten().map(StdcbWeights::param_count).sum();
        blocks
            + self.down.iter().map(DownConv::param_count).sum::<usize>()
            + self.up.iter().map(UpConv::param_count).sum::<usize>()
            + self.skip_merge.iter().map(Linear::param_count).sum::<usize>()
    }

    pub fn check(&self, cfg: &StdcbConfig) -> Result<()> {
        cfg.validate()?;
        let depths_ok = self.encoder.iter().map(Vec::len).eq(cfg.encoder_depths.iter().copied())
            && self.decoder.iter().map(Vec::len).eq(cfg.decoder_depths.iter().copied())
            && self.down.len() == cfg.levels() - 1
            && self.up.len() == cfg.levels() - 1
            && self.skip_merge.len() == cfg.levels() - 1;
        if !depths_ok {
            return Err(Error::shape("backbone weights do not match configured depths"));
        }
        let c = cfg.channels;
        let widths_ok = self.encoder.iter().chain(&self.decoder).flatten().all(|b| b.channels() == c)
            && self.down.iter().all(|d| d.channels == c)
            && self.up.iter().all(|u| u.channels == c)
            && self.skip_merge.iter().all(|m| m.in_dim == 2 * c && m.out_dim == c);
        if !widths_ok {
            return Err(Error::shape(format!("backbone weights are not all of width {c}")));
        }
        Ok(())
    }
}

/// U-shaped encoder/decoder over coupling blocks.
///
/// With more than one level the output is residually added to the input;
/// a single level is exactly its stack of blocks.
pub fn backbone_forward(f_4d: &SparseTensor4D, cfg: &StdcbConfig, w: &BackboneWeights) -> Result<SparseTensor4D> {
    w.check(cfg)?;
    if f_4d.channels() != cfg.channels {
        return Err(Error::shape(format!(
            "backbone width {} applied to {} channels",
            cfg.channels,
            f_4d.channels()
        )));
    }
    let levels = cfg.levels();
    let mut skips: Vec<SparseTensor4D> = Vec::with_capacity(levels);
    let mut x = f_4d.clone();
    for l in 0..levels {
        if l > 0 {
            x = w.down[l - 1].forward(&x)?;
        }
        for block in &w.encoder[l] {
            x = stdcb_forward(&x, block)?;
        }
        skips.push(x.clone());
    }
    for l in (0..levels - 1).rev() {
        let up = w.up[l].forward(&x, &skips[l])?;
        x = pointwise(&concat_channels(&skips[l], &up)?, &w.skip_merge[l])?;
        for block in &w.decoder[l] {
            x = stdcb_forward(&x, block)?;
        }
    }
    if levels > 1 {
        x = zip_values(&x, f_4d, |a, b| a + b)?;
    }
    Ok(x)
}
