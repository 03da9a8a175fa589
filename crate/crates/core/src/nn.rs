//! Dense building blocks: row-major feature matrices, linear layers,
//! two-layer perceptrons and the seeded weight initializer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Half-width of the seeded uniform weight initializer.
pub const INIT_SCALE: f64 = 0.1;

/// Row-major `rows x cols` matrix of reals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, so zero-width matrices get an explicit path
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column-wise concatenation `[self | other]`.
    pub fn hconcat(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.rows != other.rows {
            return Err(Error::shape(format!("cannot concat {} rows with {} rows", self.rows, other.rows)));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(FeatureMatrix { rows: self.rows, cols, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
    }
}

#[inline]
pub fn leaky_relu(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let l = Self { in_dim, out_dim, weight, bias };
        l.check()?;
        Ok(l)
    }

    pub fn seeded(init: &mut Initializer, in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: init.uniform_vec(in_dim * out_dim), bias: init.uniform_vec(out_dim) }
    }

    pub fn check(&self) -> Result<()> {
        if self.weight.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::shape(format!(
                "linear {}->{} has {} weights and {} biases",
                self.in_dim,
                self.out_dim,
                self.weight.len(),
                self.bias.len()
            )));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("linear layer has non-finite weights".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, (w_row, b)) in out.iter_mut().zip(self.weight.chunks_exact(self.in_dim.max(1)).zip(&self.bias)) {
            let mut acc = *b;
            for (w, v) in w_row.iter().zip(x) {
                acc += w * v;
            }
            *o = acc;
        }
        if self.in_dim == 0 {
            out.copy_from_slice(&self.bias);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        out
    }

    pub fn forward_matrix(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.cols() != self.in_dim {
            return Err(Error::shape(format!("linear expects {} input channels, got {}", self.in_dim, x.cols())));
        }
        let mut out = FeatureMatrix::zeros(x.rows(), self.out_dim);
        for i in 0..x.rows() {
            self.forward_into(x.row(i), out.row_mut(i));
        }
        Ok(out)
    }
}

/// Two-layer perceptron `in -> hidden -> out` with an activation after the
/// first layer and an identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self { first: Linear::zeros(in_dim, hidden), second: Linear::zeros(hidden, out_dim), activation: Activation::Relu }
    }

    pub fn seeded(init: &mut Initializer, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            first: Linear::seeded(init, in_dim, hidden),
            second: Linear::seeded(init, hidden, out_dim),
            activation: Activation::Relu,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.first.check()?;
        self.second.check()?;
        if self.first.out_dim != self.second.in_dim {
            return Err(Error::shape(format!(
                "perceptron hidden width mismatch: {} vs {}",
                self.first.out_dim, self.second.in_dim
            )));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = self.first.forward(x);
        for v in &mut hidden {
            *v = self.activation.apply(*v);
        }
        self.second.forward(&hidden)
    }

    pub fn forward_matrix(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check()?;
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!("perceptron expects {} inputs, got {}", self.in_dim(), x.cols())));
        }
        let mut out = FeatureMatrix::zeros(x.rows(), self.out_dim());
        let mut hidden = vec![0.0; self.first.out_dim];
        for i in 0..x.rows() {
            self.first.forward_into(x.row(i), &mut hidden);
            for v in &mut hidden {
                *v = self.activation.apply(*v);
            }
            self.second.forward_into(&hidden, out.row_mut(i));
        }
        Ok(out)
    }
}

/// Deterministic uniform `[-INIT_SCALE, INIT_SCALE]` weight source.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random_range(-INIT_SCALE..INIT_SCALE)
    }

    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }
}
