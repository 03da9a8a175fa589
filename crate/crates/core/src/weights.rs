//! Named-tensor weight files ("SFWT") and the full model weight set.
//!
//! Layout: magic, version u16, then sections until end of file. Each section
//! is `name_len u16, name (UTF-8), rank u8, dims u32[rank], f64 payload`.

use std::collections::HashMap;
use std::path::Path;

use crate::decoder::{DecoderConfig, DecoderWeights};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::nn::{Initializer, Linear, Mlp};
use crate::ssm::SsmParams;
use crate::stdcb::{
    BackboneWeights, ConvKernel4D, DownConv, GateWeights, SfsmWeights, StdcbConfig, StdcbWeights, UpConv,
};

pub const WEIGHT_MAGIC: &[u8; 4] = b"SFWT";
pub const WEIGHT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    names: Vec<String>,
    tensors: HashMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::InvalidInput(format!("bad section name length {}", name.len())));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidInput(format!("section {name} has unrepresentable dims {dims:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("section {name}: dims {dims:?} hold {} values", data.len())));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate section {name}")));
        }
        self.names.push(name.clone());
        self.tensors.insert(name, Tensor { dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of stored scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(WEIGHT_MAGIC);
        w.u16(WEIGHT_VERSION);
        for name in &self.names {
            let t = &self.tensors[name];
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(t.dims.len() as u8);
            for d in &t.dims {
                w.u32(*d as u32);
            }
            for v in &t.data {
                w.f64(*v);
            }
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(WEIGHT_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != WEIGHT_VERSION {
            return Err(Error::format(at, format!("unsupported weight file version {version}")));
        }
        let mut store = Self::new();
        while !r.is_empty() {
            let section_at = r.offset();
            let len = r.u16("section name length")? as usize;
            if len == 0 {
                return Err(Error::format(section_at, "empty section name"));
            }
            let name = std::str::from_utf8(r.take(len, "section name")?)
                .map_err(|_| Error::format(section_at + 2, "section name is not UTF-8"))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dim")? as usize);
            }
            let payload_at = r.offset();
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::format(payload_at, format!("section {name}: dims {dims:?} exceed payload")))?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let at = r.offset();
                let v = r.f64("weight")?;
                if !v.is_finite() {
                    return Err(Error::format(at, format!("non-finite value in section {name}")));
                }
                data.push(v);
            }
            if store.tensors.contains_key(&name) {
                return Err(Error::format(section_at, format!("duplicate section {name}")));
            }
            store.insert(name, dims, data).map_err(|e| Error::format(section_at, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Walks every parameter tensor of a weight structure under a stable name.
pub trait Visitor {
    fn tensor(&mut self, name: &str, dims: &[usize], data: &mut Vec<f64>);
    fn scalar(&mut self, name: &str, value: &mut f64);
}

pub trait Params {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor);
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl Params for Linear {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.tensor(&join(prefix, "weight"), &[self.out_dim, self.in_dim], &mut self.weight);
        v.tensor(&join(prefix, "bias"), &[self.out_dim], &mut self.bias);
    }
}

impl Params for Mlp {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.first.visit(&join(prefix, "first"), v);
        self.second.visit(&join(prefix, "second"), v);
    }
}

impl Params for ConvKernel4D {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        let [kx, ky, kz, kt] = self.extent;
        v.tensor(&join(prefix, "weight"), &[kt, kx, ky, kz, self.cin, self.cout], &mut self.weights);
        v.tensor(&join(prefix, "bias"), &[self.cout], &mut self.bias);
    }
}

impl Params for SfsmWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        let c = self.channels();
        self.pointwise.visit(&join(prefix, "pointwise"), v);
        v.tensor(&join(prefix, "bn_scale"), &[c], &mut self.bn_scale);
        v.tensor(&join(prefix, "bn_shift"), &[c], &mut self.bn_shift);
        v.tensor(&join(prefix, "bn_mean"), &[c], &mut self.bn_mean);
        v.tensor(&join(prefix, "bn_var"), &[c], &mut self.bn_var);
        v.scalar(&join(prefix, "bn_eps"), &mut self.eps);
        v.scalar(&join(prefix, "leaky_slope"), &mut self.leaky_slope);
    }
}

impl Params for GateWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.first.visit(&join(prefix, "first"), v);
        self.second.visit(&join(prefix, "second"), v);
    }
}

impl Params for StdcbWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.spatial.visit(&join(prefix, "spatial"), v);
        self.temporal.visit(&join(prefix, "temporal"), v);
        self.temporal_ct.visit(&join(prefix, "temporal_ct"), v);
        self.sfsm_temporal.visit(&join(prefix, "sfsm_temporal"), v);
        self.gate.visit(&join(prefix, "gate"), v);
        self.sfsm_fuse.visit(&join(prefix, "sfsm_fuse"), v);
        self.fusion.visit(&join(prefix, "fusion"), v);
    }
}

impl Params for DownConv {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        let c = self.channels;
        v.tensor(&join(prefix, "weight"), &[8, c, c], &mut self.weights);
        v.tensor(&join(prefix, "bias"), &[c], &mut self.bias);
    }
}

impl Params for UpConv {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        let c = self.channels;
        v.tensor(&join(prefix, "weight"), &[8, c, c], &mut self.weights);
        v.tensor(&join(prefix, "bias"), &[c], &mut self.bias);
    }
}

impl Params for BackboneWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        for (l, stage) in self.encoder.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit(&join(prefix, &format!("encoder.{l}.{b}")), v);
            }
        }
        for (l, d) in self.down.iter_mut().enumerate() {
            d.visit(&join(prefix, &format!("down.{l}")), v);
        }
        for (l, u) in self.up.iter_mut().enumerate() {
            u.visit(&join(prefix, &format!("up.{l}")), v);
        }
        for (l, m) in self.skip_merge.iter_mut().enumerate() {
            m.visit(&join(prefix, &format!("skip_merge.{l}")), v);
        }
        for (l, stage) in self.decoder.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit(&join(prefix, &format!("decoder.{l}.{b}")), v);
            }
        }
    }
}

impl Params for SsmParams {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        let (d, s, c) = (self.d_inner, self.state, self.offset_channels);
        v.tensor(&join(prefix, "a_log"), &[d, s], &mut self.a_log);
        v.tensor(&join(prefix, "d_skip"), &[d], &mut self.d_skip);
        v.tensor(&join(prefix, "w_delta"), &[d, c], &mut self.w_delta);
        v.tensor(&join(prefix, "delta_bias"), &[d], &mut self.delta_bias);
        v.tensor(&join(prefix, "w_b"), &[s, c], &mut self.w_b);
        v.tensor(&join(prefix, "w_c"), &[s, c], &mut self.w_c);
    }
}

impl Params for DecoderWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.offset_encoder.visit(&join(prefix, "offset_encoder"), v);
        for (i, p) in self.layers.iter_mut().enumerate() {
            p.visit(&join(prefix, &format!("flow_ssm.{i}")), v);
        }
        self.head.visit(&join(prefix, "head"), v);
    }
}

struct Exporter<'a> {
    store: &'a mut WeightStore,
    error: Option<Error>,
}

impl Visitor for Exporter<'_> {
    fn tensor(&mut self, name: &str, dims: &[usize], data: &mut Vec<f64>) {
        if self.error.is_none() {
            self.error = self.store.insert(name, dims.to_vec(), data.clone()).err();
        }
    }

    fn scalar(&mut self, name: &str, value: &mut f64) {
        if self.error.is_none() {
            self.error = self.store.insert(name, vec![], vec![*value]).err();
        }
    }
}

struct Importer<'a> {
    store: &'a WeightStore,
    seen: usize,
    error: Option<Error>,
}

impl Importer<'_> {
    fn fetch(&mut self, name: &str, dims: &[usize]) -> Option<&Tensor> {
        if self.error.is_some() {
            return None;
        }
        match self.store.get(name) {
            None => {
                self.error = Some(Error::InvalidInput(format!("weight file lacks section {name}")));
                None
            }
            Some(t) if t.dims != dims => {
                self.error = Some(Error::shape(format!("section {name} has dims {:?}, expected {dims:?}", t.dims)));
                None
            }
            Some(t) => {
                self.seen += 1;
                Some(t)
            }
        }
    }
}

impl Visitor for Importer<'_> {
    fn tensor(&mut self, name: &str, dims: &[usize], data: &mut Vec<f64>) {
        if let Some(t) = self.fetch(name, dims) {
            data.clone_from(&t.data);
        }
    }

    fn scalar(&mut self, name: &str, value: &mut f64) {
        if let Some(t) = self.fetch(name, &[]) {
            *value = t.data[0];
        }
    }
}

/// Appends every tensor of `params` to `store` under `prefix`.
pub fn export_params<P: Params + Clone>(params: &P, prefix: &str, store: &mut WeightStore) -> Result<()> {
    let mut copy = params.clone();
    let mut ex = Exporter { store, error: None };
    copy.visit(prefix, &mut ex);
    ex.error.map_or(Ok(()), Err)
}

/// Fills `template` from `store`; every expected section must be present
/// with matching dims. Returns how many sections were consumed.
pub fn import_params<P: Params>(template: &mut P, prefix: &str, store: &WeightStore) -> Result<usize> {
    let mut im = Importer { store, seen: 0, error: None };
    template.visit(prefix, &mut im);
    im.error.map_or(Ok(im.seen), Err)
}

/// Architecture of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub backbone: StdcbConfig,
    pub decoder: DecoderConfig,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        if self.backbone.channels != self.decoder.channels {
            return Err(Error::InvalidConfig(format!(
                "backbone width {} differs from decoder width {}",
                self.backbone.channels, self.decoder.channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `3 -> C -> C` point feature encoder.
    pub point_encoder: Mlp,
    pub backbone: BackboneWeights,
    pub decoder: DecoderWeights,
}

impl Params for ModelWeights {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.point_encoder.visit(&join(prefix, "point_encoder"), v);
        self.backbone.visit(&join(prefix, "backbone"), v);
        self.decoder.visit(&join(prefix, "decoder"), v);
    }
}

impl ModelWeights {
    pub fn zeros(shape: &ModelShape) -> Self {
        let c = shape.backbone.channels;
        Self {
            point_encoder: Mlp::zeros(3, c, c),
            backbone: BackboneWeights::zeros(&shape.backbone),
            decoder: DecoderWeights::zeros(&shape.decoder),
        }
    }

    /// Uniform `[-0.1, 0.1]` draws from a ChaCha stream seeded by `seed`.
    pub fn seeded(shape: &ModelShape, seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let c = shape.backbone.channels;
        let point_encoder = Mlp::seeded(&mut init, 3, c, c);
        let backbone = BackboneWeights::seeded(&mut init, &shape.backbone);
        let decoder = DecoderWeights::seeded(&mut init, &shape.decoder);
        Self { point_encoder, backbone, decoder }
    }

    pub fn param_count(&self) -> usize {
        self.point_encoder.param_count() + self.backbone.param_count() + self.decoder.param_count()
    }

    pub fn to_store(&self) -> Result<WeightStore> {
        let mut store = WeightStore::new();
        export_params(self, "", &mut store)?;
        Ok(store)
    }

    /// Reads weights for `shape`; the file must hold exactly the expected sections.
    pub fn from_store(shape: &ModelShape, store: &WeightStore) -> Result<Self> {
        shape.validate()?;
        let mut w = Self::zeros(shape);
        let seen = import_params(&mut w, "", store)?;
        if seen != store.len() {
            let mut expected = WeightStore::new();
            export_params(&w, "", &mut expected)?;
            let extra = store.names().iter().find(|n| expected.get(n).is_none()).cloned().unwrap_or_default();
            return Err(Error::InvalidInput(format!("unexpected weight section {extra}")));
        }
        w.backbone.check(&shape.backbone)?;
        w.decoder.check(&shape.decoder)?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store()?.save(path)
    }

    pub fn load(shape: &ModelShape, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(shape, &WeightStore::load(path)?)
    }
}
