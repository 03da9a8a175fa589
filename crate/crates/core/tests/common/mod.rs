//! Independent reference implementations shared by the integration tests.
//! Each one is written from the definitions with plain loops and dense
//! storage; none calls the library routine it checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfkit::pointcloud::{ClassLabel, FlowField};
use sfkit::ssm::{SsmParams, ZohMode};
use sfkit::stdcb::{ConvKernel4D, GateWeights, SfsmWeights, StdcbWeights};
use sfkit::voxelizer::{Key4, SparseTensor4D};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bit-by-bit interleave: bit k of x/y/z to 3k/3k+1/3k+2.
pub fn naive_interleave(x: u32, y: u32, z: u32) -> u64 {
    let mut code = 0u64;
    for k in 0..21 {
        code |= (((x >> k) & 1) as u64) << (3 * k);
        code |= (((y >> k) & 1) as u64) << (3 * k + 1);
        code |= (((z >> k) & 1) as u64) << (3 * k + 2);
    }
    code
}

/// Dense `T x X x Y x Z` grid of optional `C`-vectors.
#[derive(Clone, Debug)]
pub struct Dense {
    pub dims: [usize; 4],
    pub c: usize,
    pub cells: Vec<Option<Vec<f64>>>,
}

impl Dense {
    pub fn idx(&self, t: usize, x: usize, y: usize, z: usize) -> usize {
        ((t * self.dims[1] + x) * self.dims[2] + y) * self.dims[3] + z
    }

    pub fn at(&self, k: [i64; 4]) -> Option<&Vec<f64>> {
        if (0..4).any(|a| k[a] < 0 || k[a] >= self.dims[a] as i64) {
            return None;
        }
        self.cells[self.idx(k[0] as usize, k[1] as usize, k[2] as usize, k[3] as usize)].as_ref()
    }

    pub fn random(seed: u64, dims: [usize; 4], c: usize, density: f64) -> Self {
        let mut r = rng(seed);
        let n: usize = dims.iter().product();
        let cells = (0..n)
            .map(|_| r.random_bool(density).then(|| (0..c).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect();
        Self { dims, c, cells }
    }

    pub fn to_sparse(&self) -> SparseTensor4D {
        let mut entries = Vec::new();
        for t in 0..self.dims[0] {
            for x in 0..self.dims[1] {
                for y in 0..self.dims[2] {
                    for z in 0..self.dims[3] {
                        if let Some(v) = &self.cells[self.idx(t, x, y, z)] {
                            entries.push(([t as i32, x as i32, y as i32, z as i32], v.clone()));
                        }
                    }
                }
            }
        }
        SparseTensor4D::from_entries(self.c, self.dims[0], entries).unwrap()
    }

    /// Same active set, new values per site.
    pub fn map(&self, c: usize, mut f: impl FnMut([i64; 4], &Vec<f64>) -> Vec<f64>) -> Dense {
        let mut out = Dense { dims: self.dims, c, cells: vec![None; self.cells.len()] };
        for t in 0..self.dims[0] {
            for x in 0..self.dims[1] {
                for y in 0..self.dims[2] {
                    for z in 0..self.dims[3] {
                        let i = self.idx(t, x, y, z);
                        if let Some(v) = &self.cells[i] {
                            out.cells[i] = Some(f([t as i64, x as i64, y as i64, z as i64], v));
                        }
                    }
                }
            }
        }
        out
    }

    /// Largest absolute difference against a sparse tensor with the same sites.
    pub fn max_diff(&self, s: &SparseTensor4D) -> f64 {
        let mut worst = 0.0f64;
        let mut active = 0;
        for (k, v) in s.iter() {
            let d = self.at([k[0] as i64, k[1] as i64, k[2] as i64, k[3] as i64]).expect("site active in oracle");
            active += 1;
            for (a, b) in v.iter().zip(d) {
                worst = worst.max((a - b).abs());
            }
        }
        assert_eq!(active, self.cells.iter().filter(|c| c.is_some()).count(), "active sets differ");
        worst
    }
}

/// Dense convolution restricted to active sites; absent or out-of-grid
/// neighbors read as zero.
pub fn dense_conv(input: &Dense, k: &ConvKernel4D) -> Dense {
    let [kx, ky, kz, kt] = k.extent;
    let (cin, cout) = (k.cin, k.cout);
    input.map(cout, |s, _| {
        let mut out = k.bias.clone();
        for it in 0..kt {
            for ix in 0..kx {
                for iy in 0..ky {
                    for iz in 0..kz {
                        let tap = ((it * kx + ix) * ky + iy) * kz + iz;
                        let off = [
                            (it as i64 - (kt as i64 - 1) / 2) * k.time_dilation as i64,
                            ix as i64 - (kx as i64 - 1) / 2,
                            iy as i64 - (ky as i64 - 1) / 2,
                            iz as i64 - (kz as i64 - 1) / 2,
                        ];
                        let nb = [s[0] + off[0], s[1] + off[1], s[2] + off[2], s[3] + off[3]];
                        if let Some(f) = input.at(nb) {
                            for ci in 0..cin {
                                for co in 0..cout {
                                    out[co] += k.weights[(tap * cin + ci) * cout + co] * f[ci];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    })
}

fn linear(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    (0..b.len()).map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>()).collect()
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn dense_alpha(main: &[f64], aux: &[f64], w: &SfsmWeights) -> Vec<f64> {
    let cat: Vec<f64> = main.iter().chain(aux).copied().collect();
    let pre = linear(&w.pointwise.weight, &w.pointwise.bias, &cat);
    pre.iter()
        .enumerate()
        .map(|(c, v)| {
            let bn = (v - w.bn_mean[c]) / (w.bn_var[c] + w.eps).sqrt() * w.bn_scale[c] + w.bn_shift[c];
            let lr = if bn >= 0.0 { bn } else { w.leaky_slope * bn };
            sig(lr)
        })
        .collect()
}

pub fn dense_sfsm(main: &Dense, aux: &Dense, w: &SfsmWeights) -> Dense {
    main.map(main.c, |s, m| {
        let a = aux.at(s).unwrap();
        let alpha = dense_alpha(m, a, w);
        (0..m.len()).map(|c| alpha[c] * m[c] + (1.0 - alpha[c]) * a[c]).collect()
    })
}

pub fn dense_beta(f: &[f64], g: &GateWeights) -> Vec<f64> {
    let h: Vec<f64> = linear(&g.first.weight, &g.first.bias, f).into_iter().map(|v| v.max(0.0)).collect();
    linear(&g.second.weight, &g.second.bias, &h).into_iter().map(sig).collect()
}

/// `(F_spatial', F_temporal')`.
pub fn dense_gated(sp: &Dense, tm: &Dense, ct: &Dense, sfsm: &SfsmWeights, gate: &GateWeights) -> (Dense, Dense) {
    let t2 = dense_sfsm(tm, ct, sfsm);
    let s2 = sp.map(sp.c, |s, v| {
        let beta = dense_beta(t2.at(s).unwrap(), gate);
        v.iter().zip(&beta).map(|(a, b)| a * (1.0 + b)).collect()
    });
    (s2, t2)
}

pub fn dense_stdcb(input: &Dense, w: &StdcbWeights) -> Dense {
    let sp = dense_conv(input, &w.spatial);
    let tm = dense_conv(input, &w.temporal);
    let ct = dense_conv(input, &w.temporal_ct);
    let (sp2, tm2) = dense_gated(&sp, &tm, &ct, &w.sfsm_temporal, &w.gate);
    let fused = dense_sfsm(&tm2, &sp2, &w.sfsm_fuse);
    fused.map(w.fusion.out_dim, |s, f| {
        let cat: Vec<f64> = f.iter().chain(input.at(s).unwrap()).copied().collect();
        linear(&w.fusion.weight, &w.fusion.bias, &cat)
    })
}

/// Per-token inputs of one scan: `A` (`d x s`), step sizes (`len x d`),
/// `B` and `C` (`len x s`), batch 1.
#[derive(Clone, Debug)]
pub struct ScanInputs {
    pub a: Vec<f64>,
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d_skip: Vec<f64>,
    pub x: Vec<f64>,
    pub h0: Vec<f64>,
}

/// Scalar-loop recurrence straight from the definitions; returns `y`.
pub fn naive_scan(inp: &ScanInputs, d_n: usize, s_n: usize, mode: ZohMode) -> Vec<f64> {
    let len = inp.x.len() / d_n;
    let mut h = inp.h0.clone();
    let mut out = Vec::with_capacity(len * d_n);
    for l in 0..len {
        for d in 0..d_n {
            let delta = inp.delta[l * d_n + d];
            let xt = inp.x[l * d_n + d];
            let mut y = inp.d_skip[d] * xt;
            for s in 0..s_n {
                let a = inp.a[d * s_n + s];
                let bt = inp.b[l * s_n + s];
                let abar = (delta * a).exp();
                let bbar = match mode {
                    ZohMode::Exact => (abar - 1.0) / a * bt,
                    ZohMode::Simplified => delta * bt,
                };
                let hv = &mut h[d * s_n + s];
                *hv = abar * *hv + bbar * xt;
                y += inp.c[l * s_n + s] * *hv;
            }
            out.push(y);
        }
    }
    out
}

/// Projects offset features into scan inputs the way a FlowSSM layer is
/// defined: `delta = softplus(W_delta f + b)`, `B = W_B f`, `C = W_C f`,
/// `A = -exp(a_log)`.
pub fn naive_project(p: &SsmParams, x: &[f64], f: &[f64], h0: &[f64]) -> ScanInputs {
    let (d_n, s_n, c_n) = (p.d_inner, p.state, p.offset_channels);
    let len = x.len() / d_n;
    let mut inp = ScanInputs {
        a: p.a_log.iter().map(|v| -v.exp()).collect(),
        delta: Vec::new(),
        b: Vec::new(),
        c: Vec::new(),
        d_skip: p.d_skip.clone(),
        x: x.to_vec(),
        h0: h0.to_vec(),
    };
    for l in 0..len {
        let ft = &f[l * c_n..(l + 1) * c_n];
        let proj = |w: &[f64], row: usize| (0..c_n).map(|k| w[row * c_n + k] * ft[k]).sum::<f64>();
        for d in 0..d_n {
            inp.delta.push((1.0 + (proj(&p.w_delta, d) + p.delta_bias[d]).exp()).ln());
        }
        for s in 0..s_n {
            inp.b.push(proj(&p.w_b, s));
            inp.c.push(proj(&p.w_c, s));
        }
    }
    inp
}

pub fn naive_flow_ssm(p: &SsmParams, x: &[f64], f: &[f64], h0: &[f64], mode: ZohMode) -> Vec<f64> {
    naive_scan(&naive_project(p, x, f, h0), p.d_inner, p.state, mode)
}

/// Per-point binning by explicit edge comparison.
pub struct BinOracle {
    pub counts: Vec<u64>,
    pub alpha: usize,
    pub r_alpha: f64,
    pub fallback: bool,
    pub statics: Vec<usize>,
    pub dynamics: Vec<usize>,
}

pub fn bin_oracle(gt: &FlowField, k: usize) -> BinOracle {
    let r: Vec<f64> = gt.vectors.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).collect();
    let r_max = r.iter().cloned().fold(0.0, f64::max);
    let width = r_max / k as f64;
    let mut counts = vec![0u64; k];
    for &v in &r {
        let mut placed = false;
        for j in 0..k {
            let lo = j as f64 * width;
            let hi = (j + 1) as f64 * width;
            if r_max > 0.0 && v >= lo && (v < hi || j == k - 1) {
                counts[j] += 1;
                placed = true;
                break;
            }
        }
        if !placed {
            counts[0] += 1;
        }
    }
    let n = r.len() as f64;
    let mut alpha = k;
    if r_max > 0.0 {
        for j in 0..k {
            if (counts[j] as f64 / n) < 1.0 / k as f64 {
                alpha = j;
                break;
            }
        }
    }
    let fallback = alpha == k;
    let r_alpha = if fallback { r_max } else { alpha as f64 * width };
    let statics = (0..r.len()).filter(|&i| r[i] <= r_alpha).collect();
    let dynamics = (0..r.len()).filter(|&i| r[i] > r_alpha).collect();
    BinOracle { counts, alpha, r_alpha, fallback, statics, dynamics }
}

pub fn naive_epe(p: [f64; 3], g: [f64; 3]) -> f64 {
    ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
}

/// `(avg, fd, bs, fs)` by nested loops over subsets.
pub fn threeway_oracle(pred: &FlowField, gt: &FlowField, mask: &[ClassLabel]) -> (f64, [Option<f64>; 3]) {
    let subsets = [ClassLabel::ForegroundDynamic, ClassLabel::BackgroundStatic, ClassLabel::ForegroundStatic];
    let mut means = [None; 3];
    for (si, s) in subsets.iter().enumerate() {
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..gt.len() {
            if mask[i] == *s {
                sum += naive_epe(pred.vectors[i], gt.vectors[i]);
                n += 1;
            }
        }
        if n > 0 {
            means[si] = Some(sum / n as f64);
        }
    }
    let present: Vec<f64> = means.iter().flatten().copied().collect();
    (present.iter().sum::<f64>() / present.len() as f64, means)
}

pub fn random_flow(seed: u64, n: usize, scale: f64) -> FlowField {
    let mut r = rng(seed);
    FlowField::new((0..n).map(|_| std::array::from_fn(|_| r.random_range(-scale..scale))).collect())
}

pub fn key(t: i32, x: i32, y: i32, z: i32) -> Key4 {
    [t, x, y, z]
}
