//! Selective state-space machinery.
//!
//! Shapes follow a fixed layout: token sequences are `batch x len x channels`,
//! hidden states are `batch x d_inner x state`, and discretized transition
//! tensors are `batch x len x d_inner x state`. The state matrix `A` is
//! diagonal per channel, stored as `d_inner x state`.
//!
//! The recurrence per `(batch, channel, state)` lane is
//!
//! ```text
//! h_t = abar_t * h_{t-1} + bbar_t * x_t
//! y_t = sum_s C_t[s] * h_t[s] + D * x_t
//! ```

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Initializer};

/// Token block length used by [`scan_blocked`] when none is given.
pub const DEFAULT_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZohMode {
    /// `Abar = exp(dt A)`, `Bbar = (exp(dt A) - 1) / A * B`.
    Exact,
    /// `Abar = exp(dt A)`, `Bbar = dt * B`.
    #[default]
    Simplified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl TokenSequence {
    pub fn zeros(batch: usize, len: usize, channels: usize) -> Self {
        Self { batch, len, channels, data: vec![0.0; batch * len * channels] }
    }

    pub fn new(batch: usize, len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * len * channels {
            return Err(Error::shape(format!(
                "{} values for a {batch}x{len}x{channels} token sequence",
                data.len()
            )));
        }
        Ok(Self { batch, len, channels, data })
    }

    #[inline]
    pub fn token(&self, b: usize, l: usize) -> &[f64] {
        let at = (b * self.len + l) * self.channels;
        &self.data[at..at + self.channels]
    }

    #[inline]
    pub fn token_mut(&mut self, b: usize, l: usize) -> &mut [f64] {
        let at = (b * self.len + l) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    fn same_shape(&self, other: &TokenSequence) -> bool {
        self.batch == other.batch && self.len == other.len && self.channels == other.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub batch: usize,
    pub channels: usize,
    pub state: usize,
    pub data: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(batch: usize, channels: usize, state: usize) -> Self {
        Self { batch, channels, state, data: vec![0.0; batch * channels * state] }
    }

    pub fn new(batch: usize, channels: usize, state: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * state {
            return Err(Error::shape(format!(
                "{} values for a {batch}x{channels}x{state} hidden state",
                data.len()
            )));
        }
        Ok(Self { batch, channels, state, data })
    }

    fn lane_block(&self, b: usize) -> &[f64] {
        let n = self.channels * self.state;
        &self.data[b * n..(b + 1) * n]
    }
}

/// Per-token discretized transition (`abar`) and input (`bbar`) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

impl Discretized {
    #[inline]
    fn offset(&self, b: usize, l: usize) -> usize {
        (b * self.len + l) * self.channels * self.state
    }
}

/// `(e^x - 1) / x`, equal to 1 at 0.
#[inline]
fn phi1(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.exp_m1() / x
    }
}

/// `(x e^x - e^x + 1) / x^2`, the derivative helper for the exact input gain.
#[inline]
fn psi(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0 + x / 144.0)))
    } else {
        (x * x.exp() - x.exp_m1()) / (x * x)
    }
}

/// Input gain `g` with `bbar = g * B`.
#[inline]
fn input_gain(mode: ZohMode, delta: f64, a: f64) -> f64 {
    match mode {
        ZohMode::Simplified => delta,
        ZohMode::Exact => delta * phi1(delta * a),
    }
}

/// Zero-order-hold discretization.
///
/// `a` is the `channels x state` diagonal state matrix, `b` holds per-token
/// input matrices (`batch x len x state`) and `delta` per-token step sizes
/// (`batch x len x channels`). In exact mode an `A` entry of 0 takes the
/// series limit `bbar = delta * B`.
pub fn zoh_discretize(a: &[f64], b: &TokenSequence, delta: &TokenSequence, mode: ZohMode) -> Result<Discretized> {
    let channels = delta.channels;
    let state = b.channels;
    if a.len() != channels * state {
        return Err(Error::shape(format!("A has {} entries, expected {channels}x{state}", a.len())));
    }
    if b.batch != delta.batch || b.len != delta.len {
        return Err(Error::shape("B and delta disagree on batch or length"));
    }
    if let Some(i) = delta.data.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::InvalidInput(format!("delta must be positive and finite (entry {i})")));
    }
    if a.iter().chain(&b.data).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("A and B must be finite".into()));
    }
    let (batch, len) = (delta.batch, delta.len);
    let n = batch * len * channels * state;
    let mut a_bar = vec![0.0; n];
    let mut b_bar = vec![0.0; n];
    for bi in 0..batch {
        for l in 0..len {
            let dt = delta.token(bi, l);
            let bt = b.token(bi, l);
            let base = (bi * len + l) * channels * state;
            for d in 0..channels {
                for s in 0..state {
                    let i = base + d * state + s;
                    let ad = a[d * state + s];
                    a_bar[i] = (dt[d] * ad).exp();
                    b_bar[i] = input_gain(mode, dt[d], ad) * bt[s];
                }
            }
        }
    }
    Ok(Discretized { batch, len, channels, state, a_bar, b_bar })
}

fn check_scan_shapes(disc: &Discretized, c: &TokenSequence, d_skip: &[f64], x: &TokenSequence, h0: &HiddenState) -> Result<()> {
    let ok = x.batch == disc.batch
        && x.len == disc.len
        && x.channels == disc.channels
        && c.batch == disc.batch
        && c.len == disc.len
        && c.channels == disc.state
        && d_skip.len() == disc.channels
        && h0.batch == disc.batch
        && h0.channels == disc.channels
        && h0.state == disc.state
        && disc.a_bar.len() == disc.batch * disc.len * disc.channels * disc.state
        && disc.b_bar.len() == disc.a_bar.len();
    if ok {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "scan shapes disagree: disc {}x{}x{}x{}, x {}x{}x{}, C {}x{}x{}, D {}, h0 {}x{}x{}",
            disc.batch,
            disc.len,
            disc.channels,
            disc.state,
            x.batch,
            x.len,
            x.channels,
            c.batch,
            c.len,
            c.channels,
            d_skip.len(),
            h0.batch,
            h0.channels,
            h0.state
        )))
    }
}

/// Runs the recurrence for one batch row over tokens `range`, starting from
/// `h` (`channels x state`, updated in place) and writing `y` rows for the range.
fn scan_range(
    disc: &Discretized,
    c: &TokenSequence,
    d_skip: &[f64],
    x: &TokenSequence,
    b: usize,
    range: std::ops::Range<usize>,
    h: &mut [f64],
    y: &mut [f64],
) -> Result<()> {
    let (ch, st) = (disc.channels, disc.state);
    for (row, l) in range.enumerate() {
        let base = disc.offset(b, l);
        let xt = x.token(b, l);
        let ct = c.token(b, l);
        let yt = &mut y[row * ch..(row + 1) * ch];
        for d in 0..ch {
            let lane = &mut h[d * st..(d + 1) * st];
            let ab = &disc.a_bar[base + d * st..base + (d + 1) * st];
            let bb = &disc.b_bar[base + d * st..base + (d + 1) * st];
            let mut acc = 0.0;
            for s in 0..st {
                lane[s] = ab[s] * lane[s] + bb[s] * xt[d];
                acc += ct[s] * lane[s];
            }
            yt[d] = acc + d_skip[d] * xt[d];
            if !yt[d].is_finite() || !lane.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric { index: l, message: format!("non-finite scan value (batch {b}, channel {d})") });
            }
        }
    }
    Ok(())
}

/// Left-to-right reference scan.
pub fn scan_sequential(
    disc: &Discretized,
    c: &TokenSequence,
    d_skip: &[f64],
    x: &TokenSequence,
    h0: &HiddenState,
) -> Result<(TokenSequence, HiddenState)> {
    check_scan_shapes(disc, c, d_skip, x, h0)?;
    let mut y = TokenSequence::zeros(x.batch, x.len, x.channels);
    let mut h = h0.clone();
    let lanes = disc.channels * disc.state;
    let row = x.len * x.channels;
    for b in 0..x.batch {
        scan_range(
            disc,
            c,
            d_skip,
            x,
            b,
            0..x.len,
            &mut h.data[b * lanes..(b + 1) * lanes],
            &mut y.data[b * row..(b + 1) * row],
        )?;
    }
    Ok((y, h))
}

/// Chunked scan built on the associative composition
/// `(a2, b2) . (a1, b1) = (a2 a1, a2 b1 + b2)`.
///
/// Each block first reduces to its composed transition from a zero state,
/// block carries are chained left to right, then every block replays its
/// tokens from the carried state. Blocks run in parallel; the result is
/// deterministic for a fixed `block`. With a single block this is exactly
/// [`scan_sequential`].
pub fn scan_blocked(
    disc: &Discretized,
    c: &TokenSequence,
    d_skip: &[f64],
    x: &TokenSequence,
    h0: &HiddenState,
    block: usize,
) -> Result<(TokenSequence, HiddenState)> {
    check_scan_shapes(disc, c, d_skip, x, h0)?;
    let block = block.max(1);
    let len = x.len;
    if len <= block {
        return scan_sequential(disc, c, d_skip, x, h0);
    }
    let n_blocks = len.div_ceil(block);
    let lanes = disc.channels * disc.state;
    let ch = x.channels;

    // (batch, block) pairs reduce independently
    let jobs: Vec<(usize, usize)> = (0..x.batch).flat_map(|b| (0..n_blocks).map(move |k| (b, k))).collect();
    let summaries: Vec<(Vec<f64>, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(b, k)| {
            let mut a_acc = vec![1.0; lanes];
            let mut b_acc = vec![0.0; lanes];
            for l in k * block..((k + 1) * block).min(len) {
                let base = disc.offset(b, l);
                let xt = x.token(b, l);
                for d in 0..disc.channels {
                    for s in 0..disc.state {
                        let i = d * disc.state + s;
                        let a = disc.a_bar[base + i];
                        a_acc[i] *= a;
                        b_acc[i] = a * b_acc[i] + disc.b_bar[base + i] * xt[d];
                    }
                }
            }
            (a_acc, b_acc)
        })
        .collect();

    let mut carries = vec![Vec::new(); jobs.len()];
    for b in 0..x.batch {
        let mut carry = h0.lane_block(b).to_vec();
        for k in 0..n_blocks {
            let j = b * n_blocks + k;
            carries[j] = carry.clone();
            let (a_acc, b_acc) = &summaries[j];
            for i in 0..lanes {
                carry[i] = a_acc[i] * carry[i] + b_acc[i];
            }
        }
    }

    let replayed: Vec<Result<(Vec<f64>, Vec<f64>)>> = jobs
        .par_iter()
        .zip(carries.into_par_iter())
        .map(|(&(b, k), mut h)| {
            let range = k * block..((k + 1) * block).min(len);
            let mut y = vec![0.0; range.len() * ch];
            scan_range(disc, c, d_skip, x, b, range, &mut h, &mut y)?;
            Ok((y, h))
        })
        .collect();

    let mut y = TokenSequence::zeros(x.batch, len, ch);
    let mut h_out = h0.clone();
    for (j, r) in replayed.into_iter().enumerate() {
        let (yk, hk) = r?;
        let (b, k) = jobs[j];
        let at = (b * len + k * block) * ch;
        y.data[at..at + yk.len()].copy_from_slice(&yk);
        if k + 1 == n_blocks {
            h_out.data[b * lanes..(b + 1) * lanes].copy_from_slice(&hk);
        }
    }
    Ok((y, h_out))
}

/// Parameters of one offset-conditioned selective-scan layer.
///
/// Per token, `delta = softplus(W_delta f + delta_bias)`, `B = W_B f` and
/// `C = W_C f` are projected from the offset feature `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub d_inner: usize,
    pub state: usize,
    pub offset_channels: usize,
    /// `A = -exp(a_log)`, `d_inner x state`.
    pub a_log: Vec<f64>,
    pub d_skip: Vec<f64>,
    /// `d_inner x offset_channels`.
    pub w_delta: Vec<f64>,
    pub delta_bias: Vec<f64>,
    /// `state x offset_channels`.
    pub w_b: Vec<f64>,
    /// `state x offset_channels`.
    pub w_c: Vec<f64>,
}

impl SsmParams {
    pub fn zeros(d_inner: usize, state: usize, offset_channels: usize) -> Self {
        Self {
            d_inner,
            state,
            offset_channels,
            a_log: vec![0.0; d_inner * state],
            d_skip: vec![0.0; d_inner],
            w_delta: vec![0.0; d_inner * offset_channels],
            delta_bias: vec![0.0; d_inner],
            w_b: vec![0.0; state * offset_channels],
            w_c: vec![0.0; state * offset_channels],
        }
    }

    pub fn seeded(init: &mut Initializer, d_inner: usize, state: usize, offset_channels: usize) -> Self {
        Self {
            d_inner,
            state,
            offset_channels,
            a_log: init.uniform_vec(d_inner * state),
            d_skip: init.uniform_vec(d_inner),
            w_delta: init.uniform_vec(d_inner * offset_channels),
            delta_bias: init.uniform_vec(d_inner),
            w_b: init.uniform_vec(state * offset_channels),
            w_c: init.uniform_vec(state * offset_channels),
        }
    }

    pub fn check(&self) -> Result<()> {
        let (d, s, c) = (self.d_inner, self.state, self.offset_channels);
        let ok = self.a_log.len() == d * s
            && self.d_skip.len() == d
            && self.w_delta.len() == d * c
            && self.delta_bias.len() == d
            && self.w_b.len() == s * c
            && self.w_c.len() == s * c;
        if !ok {
            return Err(Error::shape(format!("SSM parameters inconsistent with d_inner {d}, state {s}, offset channels {c}")));
        }
        let all = [&self.a_log, &self.d_skip, &self.w_delta, &self.delta_bias, &self.w_b, &self.w_c];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("SSM parameters must be finite".into()));
        }
        Ok(())
    }

    /// Diagonal state matrix, strictly negative.
    pub fn a_matrix(&self) -> Vec<f64> {
        self.a_log.iter().map(|v| -v.exp()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.a_log.len() + self.d_skip.len() + self.w_delta.len() + self.delta_bias.len() + self.w_b.len() + self.w_c.len()
    }
}

fn project(f: &TokenSequence, w: &[f64], bias: Option<&[f64]>, out_dim: usize) -> TokenSequence {
    let c = f.channels;
    let mut out = TokenSequence::zeros(f.batch, f.len, out_dim);
    for b in 0..f.batch {
        for l in 0..f.len {
            let ft = f.token(b, l);
            let ot = out.token_mut(b, l);
            for (o, row) in ot.iter_mut().enumerate() {
                let w_row = &w[o * c..(o + 1) * c];
                let mut acc = bias.map_or(0.0, |bb| bb[o]);
                for (wv, fv) in w_row.iter().zip(ft) {
                    acc += wv * fv;
                }
                *row = acc;
            }
        }
    }
    out
}

/// Intermediate values of a recorded forward pass.
#[derive(Debug, Clone)]
pub struct FlowSsmTape {
    x: TokenSequence,
    f_offset: TokenSequence,
    delta_pre: TokenSequence,
    delta: TokenSequence,
    b: TokenSequence,
    c: TokenSequence,
    disc: Discretized,
    a: Vec<f64>,
    /// States `h_0 ..= h_L`, `batch x (len + 1) x d_inner x state`.
    states: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every input and parameter of a
/// [`FlowSsmLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSsmGrads {
    pub x: TokenSequence,
    pub h0: HiddenState,
    pub f_offset: TokenSequence,
    /// With respect to the raw per-token projections.
    pub delta: TokenSequence,
    pub b: TokenSequence,
    pub c: TokenSequence,
    /// With respect to `A` itself and to its log parameterization.
    pub a: Vec<f64>,
    pub a_log: Vec<f64>,
    pub d_skip: Vec<f64>,
    pub w_delta: Vec<f64>,
    pub delta_bias: Vec<f64>,
    pub w_b: Vec<f64>,
    pub w_c: Vec<f64>,
}

/// Offset-conditioned selective-scan layer with an optional recorded pass
/// for adjoint gradients.
#[derive(Debug, Clone)]
pub struct FlowSsmLayer {
    pub params: SsmParams,
    pub mode: ZohMode,
    tape: Option<FlowSsmTape>,
}

struct Projected {
    delta_pre: TokenSequence,
    delta: TokenSequence,
    b: TokenSequence,
    c: TokenSequence,
    disc: Discretized,
    a: Vec<f64>,
}

impl FlowSsmLayer {
    pub fn new(params: SsmParams, mode: ZohMode) -> Self {
        Self { params, mode, tape: None }
    }

    fn check_inputs(&self, x: &TokenSequence, f_offset: &TokenSequence, h: &HiddenState) -> Result<()> {
        self.params.check()?;
        let p = &self.params;
        if f_offset.channels != p.offset_channels {
            return Err(Error::shape(format!(
                "offset features have {} channels, projections expect {}",
                f_offset.channels, p.offset_channels
            )));
        }
        if x.channels != p.d_inner {
            return Err(Error::shape(format!("input has {} channels, layer width is {}", x.channels, p.d_inner)));
        }
        if x.batch != f_offset.batch || x.len != f_offset.len {
            return Err(Error::shape("input and offset sequences disagree on batch or length"));
        }
        if h.batch != x.batch || h.channels != p.d_inner || h.state != p.state {
            return Err(Error::shape("hidden state shape does not match layer"));
        }
        Ok(())
    }

    fn project(&self, f_offset: &TokenSequence) -> Result<Projected> {
        let p = &self.params;
        let delta_pre = project(f_offset, &p.w_delta, Some(&p.delta_bias), p.d_inner);
        let mut delta = delta_pre.clone();
        for v in &mut delta.data {
            *v = softplus(*v);
        }
        // softplus underflows to 0 for very negative inputs
        if let Some(i) = delta.data.iter().position(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::Numeric { index: (i / p.d_inner.max(1)) % f_offset.len.max(1), message: "step size underflow".into() });
        }
        let b = project(f_offset, &p.w_b, None, p.state);
        let c = project(f_offset, &p.w_c, None, p.state);
        let a = p.a_matrix();
        let disc = zoh_discretize(&a, &b, &delta, self.mode)?;
        Ok(Projected { delta_pre, delta, b, c, disc, a })
    }

    /// Refines `x` (the coarse features, width `d_inner`) conditioned on
    /// `f_offset`, starting from `h_prev`.
    pub fn forward(&self, x: &TokenSequence, f_offset: &TokenSequence, h_prev: &HiddenState) -> Result<(TokenSequence, HiddenState)> {
        self.check_inputs(x, f_offset, h_prev)?;
        let pr = self.project(f_offset)?;
        scan_sequential(&pr.disc, &pr.c, &self.params.d_skip, x, h_prev)
    }

    /// Like [`FlowSsmLayer::forward`] but keeps the intermediates needed by
    /// [`FlowSsmLayer::backward`].
    pub fn forward_recorded(
        &mut self,
        x: &TokenSequence,
        f_offset: &TokenSequence,
        h_prev: &HiddenState,
    ) -> Result<(TokenSequence, HiddenState)> {
        self.check_inputs(x, f_offset, h_prev)?;
        let pr = self.project(f_offset)?;
        let (out, h_last) = scan_sequential(&pr.disc, &pr.c, &self.params.d_skip, x, h_prev)?;

        let lanes = self.params.d_inner * self.params.state;
        let mut states = vec![0.0; x.batch * (x.len + 1) * lanes];
        for b in 0..x.batch {
            let mut h = h_prev.lane_block(b).to_vec();
            let at = b * (x.len + 1) * lanes;
            states[at..at + lanes].copy_from_slice(&h);
            for l in 0..x.len {
                let base = pr.disc.offset(b, l);
                let xt = x.token(b, l);
                for (i, hv) in h.iter_mut().enumerate() {
                    *hv = pr.disc.a_bar[base + i] * *hv + pr.disc.b_bar[base + i] * xt[i / self.params.state];
                }
                let at = (b * (x.len + 1) + l + 1) * lanes;
                states[at..at + lanes].copy_from_slice(&h);
            }
        }
        self.tape = Some(FlowSsmTape {
            x: x.clone(),
            f_offset: f_offset.clone(),
            delta_pre: pr.delta_pre,
            delta: pr.delta,
            b: pr.b,
            c: pr.c,
            disc: pr.disc,
            a: pr.a,
            states,
        });
        Ok((out, h_last))
    }

    pub fn clear_record(&mut self) {
        self.tape = None;
    }

    /// Adjoint pass for the most recent recorded forward.
    ///
    /// `dy` is the upstream gradient of the output sequence; `dh_last`
    /// optionally carries a gradient for the final hidden state.
    pub fn backward(&self, dy: &TokenSequence, dh_last: Option<&HiddenState>) -> Result<FlowSsmGrads> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let p = &self.params;
        let (batch, len, dn, sn, cn) = (tape.x.batch, tape.x.len, p.d_inner, p.state, p.offset_channels);
        if !dy.same_shape(&tape.x) {
            return Err(Error::shape("upstream gradient does not match recorded output"));
        }
        if let Some(g) = dh_last {
            if g.batch != batch || g.channels != dn || g.state != sn {
                return Err(Error::shape("final-state gradient does not match hidden state"));
            }
        }
        let lanes = dn * sn;
        let mut gx = TokenSequence::zeros(batch, len, dn);
        let mut g_delta = TokenSequence::zeros(batch, len, dn);
        let mut g_b = TokenSequence::zeros(batch, len, sn);
        let mut g_c = TokenSequence::zeros(batch, len, sn);
        let mut g_a = vec![0.0; lanes];
        let mut g_d = vec![0.0; dn];
        let mut g_h0 = HiddenState::zeros(batch, dn, sn);

        for b in 0..batch {
            // adjoint of h_l, running right to left
            let mut lambda = match dh_last {
                Some(g) => g.lane_block(b).to_vec(),
                None => vec![0.0; lanes],
            };
            for l in (0..len).rev() {
                let base = tape.disc.offset(b, l);
                let xt = tape.x.token(b, l);
                let ct = tape.c.token(b, l);
                let bt = tape.b.token(b, l);
                let dt = tape.delta.token(b, l);
                let gy = dy.token(b, l);
                let h_cur = &tape.states[(b * (len + 1) + l + 1) * lanes..][..lanes];
                let h_prev = &tape.states[(b * (len + 1) + l) * lanes..][..lanes];
                let gxt = gx.token_mut(b, l);
                for d in 0..dn {
                    g_d[d] += gy[d] * xt[d];
                    gxt[d] = p.d_skip[d] * gy[d];
                }
                let gct = g_c.token_mut(b, l);
                for d in 0..dn {
                    for s in 0..sn {
                        let i = d * sn + s;
                        gct[s] += gy[d] * h_cur[i];
                        lambda[i] += ct[s] * gy[d];
                    }
                }
                let mut gdt = vec![0.0; dn];
                let mut gbt = vec![0.0; sn];
                for d in 0..dn {
                    for s in 0..sn {
                        let i = d * sn + s;
                        let a_bar = tape.disc.a_bar[base + i];
                        let b_bar = tape.disc.b_bar[base + i];
                        let lam = lambda[i];
                        let a = tape.a[i];
                        gxt[d] += lam * b_bar;
                        let g_abar = lam * h_prev[i];
                        let g_bbar = lam * xt[d];
                        gdt[d] += g_abar * a_bar * a;
                        g_a[i] += g_abar * a_bar * dt[d];
                        match self.mode {
                            ZohMode::Simplified => {
                                gdt[d] += g_bbar * bt[s];
                                gbt[s] += g_bbar * dt[d];
                            }
                            ZohMode::Exact => {
                                let x = dt[d] * a;
                                gdt[d] += g_bbar * a_bar * bt[s];
                                g_a[i] += g_bbar * dt[d] * dt[d] * psi(x) * bt[s];
                                gbt[s] += g_bbar * dt[d] * phi1(x);
                            }
                        }
                        lambda[i] = lam * a_bar;
                    }
                }
                g_delta.token_mut(b, l).copy_from_slice(&gdt);
                g_b.token_mut(b, l).copy_from_slice(&gbt);
            }
            g_h0.data[b * lanes..(b + 1) * lanes].copy_from_slice(&lambda);
        }

        // through the projections
        let mut g_w_delta = vec![0.0; dn * cn];
        let mut g_delta_bias = vec![0.0; dn];
        let mut g_w_b = vec![0.0; sn * cn];
        let mut g_w_c = vec![0.0; sn * cn];
        let mut g_f = TokenSequence::zeros(batch, len, cn);
        for b in 0..batch {
            for l in 0..len {
                let f = tape.f_offset.token(b, l);
                let zt = tape.delta_pre.token(b, l);
                let gdt = g_delta.token(b, l);
                let gbt = g_b.token(b, l);
                let gct = g_c.token(b, l);
                let gft = g_f.token_mut(b, l);
                for d in 0..dn {
                    let gz = gdt[d] * sigmoid(zt[d]);
                    g_delta_bias[d] += gz;
                    for k in 0..cn {
                        g_w_delta[d * cn + k] += gz * f[k];
                        gft[k] += p.w_delta[d * cn + k] * gz;
                    }
                }
                for s in 0..sn {
                    for k in 0..cn {
                        g_w_b[s * cn + k] += gbt[s] * f[k];
                        g_w_c[s * cn + k] += gct[s] * f[k];
                        gft[k] += p.w_b[s * cn + k] * gbt[s] + p.w_c[s * cn + k] * gct[s];
                    }
                }
            }
        }
        let g_a_log = g_a.iter().zip(&tape.a).map(|(g, a)| g * a).collect();

        Ok(FlowSsmGrads {
            x: gx,
            h0: g_h0,
            f_offset: g_f,
            delta: g_delta,
            b: g_b,
            c: g_c,
            a: g_a,
            a_log: g_a_log,
            d_skip: g_d,
            w_delta: g_w_delta,
            delta_bias: g_delta_bias,
            w_b: g_w_b,
            w_c: g_w_c,
        })
    }
}

/// One FlowSSM pass: `(F_refined, H_new) = layer(F_coarse_prev | F_offset, H_prev)`.
pub fn flow_ssm_layer(
    f_coarse_prev: &TokenSequence,
    f_offset: &TokenSequence,
    params: &SsmParams,
    h_prev: &HiddenState,
    mode: ZohMode,
) -> Result<(TokenSequence, HiddenState)> {
    FlowSsmLayer::new(params.clone(), mode).forward(f_coarse_prev, f_offset, h_prev)
}
