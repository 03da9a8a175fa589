//! Scene-adaptive loss with a histogram-derived static/dynamic split, and the
//! three-bucket speed loss used as a baseline.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pointcloud::{norm3, FlowField};

pub const DEFAULT_K: usize = 100;
/// Upper edges of the slow and medium speed buckets, m/s.
pub const SPEED_EDGES: [f64; 2] = [0.4, 1.0];

/// `K` equal-width bins over `[0, r_max]` of ground-truth displacement
/// magnitudes; the top edge belongs to the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementHistogram {
    pub k: usize,
    pub r_max: f64,
    pub counts: Vec<u64>,
    pub n: u64,
    /// Every magnitude is zero, so the range collapses.
    pub degenerate: bool,
}

impl DisplacementHistogram {
    pub fn bin_width(&self) -> f64 {
        self.r_max / self.k as f64
    }

    /// Lower edge of bin `j`.
    pub fn edge(&self, j: usize) -> f64 {
        j as f64 * self.bin_width()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.n as f64).collect()
    }

    /// Bin holding magnitude `r`, consistent with [`Self::edge`].
    pub fn bin_of(&self, r: f64) -> usize {
        if self.degenerate {
            return 0;
        }
        let last = self.k - 1;
        let mut j = ((r / self.r_max) * self.k as f64).floor().clamp(0.0, last as f64) as usize;
        // nudge across rounding at the edges so bin_of and edge agree exactly
        while j > 0 && r < self.edge(j) {
            j -= 1;
        }
        while j < last && r >= self.edge(j + 1) {
            j += 1;
        }
        j
    }
}

pub fn magnitudes(flow: &FlowField) -> Vec<f64> {
    flow.vectors.iter().map(|v| norm3(*v)).collect()
}

pub fn build_histogram(gt: &FlowField, k: usize) -> Result<DisplacementHistogram> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("histogram needs at least 2 bins, got {k}")));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("no ground-truth flow vectors".into()));
    }
    let r = magnitudes(gt);
    if let Some(i) = r.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite ground-truth flow at point {i}")));
    }
    let r_max = r.iter().copied().fold(0.0, f64::max);
    let mut hist =
        DisplacementHistogram { k, r_max, counts: vec![0; k], n: r.len() as u64, degenerate: r_max == 0.0 };
    for v in &r {
        let j = hist.bin_of(*v);
        hist.counts[j] += 1;
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptiveThreshold {
    pub alpha: usize,
    /// Lower edge of bin `alpha`, meters.
    pub r_alpha: f64,
    pub fallback: bool,
}

/// First bin whose share falls strictly below `1/K`; when none does (or the
/// histogram is degenerate) everything is treated as static.
pub fn select_threshold(hist: &DisplacementHistogram) -> AdaptiveThreshold {
    let k = hist.k as u64;
    let first = if hist.degenerate { None } else { hist.counts.iter().position(|&c| c * k < hist.n) };
    match first {
        Some(alpha) => AdaptiveThreshold { alpha, r_alpha: hist.edge(alpha), fallback: false },
        None => AdaptiveThreshold { alpha: hist.k, r_alpha: hist.r_max, fallback: true },
    }
}

/// `(static, dynamic)` point indices: static iff `|gt| <= r_alpha`.
pub fn partition(gt: &FlowField, thr: &AdaptiveThreshold) -> (Vec<usize>, Vec<usize>) {
    let mut stat = Vec::new();
    let mut dynamic = Vec::new();
    for (i, r) in magnitudes(gt).into_iter().enumerate() {
        if r <= thr.r_alpha {
            stat.push(i);
        } else {
            dynamic.push(i);
        }
    }
    (stat, dynamic)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub k: usize,
    pub threshold: AdaptiveThreshold,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub static_term: f64,
    pub dynamic_term: f64,
    pub total: f64,
}

fn check_aligned(pred: &FlowField, gt: &FlowField) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted vectors for {} ground-truth vectors", pred.len(), gt.len())));
    }
    Ok(())
}

fn endpoint(pred: &FlowField, gt: &FlowField, i: usize) -> f64 {
    let (p, g) = (pred.vectors[i], gt.vectors[i]);
    norm3([p[0] - g[0], p[1] - g[1], p[2] - g[2]])
}

/// Mean endpoint error over `idx`; zero when `idx` is empty.
fn mean_epe(pred: &FlowField, gt: &FlowField, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().map(|&i| endpoint(pred, gt, i)).sum::<f64>() / idx.len() as f64
}

pub fn scene_adaptive_loss(pred: &FlowField, gt: &FlowField, k: usize) -> Result<LossBreakdown> {
    check_aligned(pred, gt)?;
    let hist = build_histogram(gt, k)?;
    let threshold = select_threshold(&hist);
    let (stat, dynamic) = partition(gt, &threshold);
    let static_term = mean_epe(pred, gt, &stat);
    let dynamic_term = mean_epe(pred, gt, &dynamic);
    Ok(LossBreakdown {
        k,
        threshold,
        n_static: stat.len(),
        n_dynamic: dynamic.len(),
        static_term,
        dynamic_term,
        total: static_term + dynamic_term,
    })
}

/// Bucket of a speed in m/s: `[0, 0.4)`, `[0.4, 1.0)`, `[1.0, inf)`.
pub fn speed_bucket(speed: f64) -> usize {
    SPEED_EDGES.iter().take_while(|&&e| speed >= e).count()
}

/// Sum over non-empty speed buckets of the bucket's mean endpoint error.
pub fn three_bucket_loss(pred: &FlowField, gt: &FlowField, dt: f64) -> Result<f64> {
    check_aligned(pred, gt)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let mut buckets: [Vec<usize>; 3] = Default::default();
    for (i, r) in magnitudes(gt).into_iter().enumerate() {
        buckets[speed_bucket(r / dt)].push(i);
    }
    Ok(buckets.iter().map(|b| mean_epe(pred, gt, b)).sum())
}

pub const LOSS_CSV_HEADER: &str = "scene_id,K,alpha,r_alpha,n_static,n_dynamic,static_term,dynamic_term,total";

pub fn write_loss_csv<W: Write>(rows: &[(String, LossBreakdown)], mut out: W) -> Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for (id, l) in rows {
        writeln!(
            out,
            "{id},{},{},{},{},{},{},{},{}",
            l.k, l.threshold.alpha, l.threshold.r_alpha, l.n_static, l.n_dynamic, l.static_term, l.dynamic_term, l.total
        )?;
    }
    Ok(())
}
