//! Endpoint-error metrics: per-point EPE, average EPE, the 3-way split by
//! motion class, bucketed normalized EPE and dynamic IoU.
//!
//! The bucketed normalized EPE here is a desk-scale variant: dynamic points
//! are grouped by object class and 0.4 m/s speed buckets, and each error is
//! divided by `max(|gt|, 1e-6 m)`. It is not comparable to leaderboard values.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{norm3, ClassLabel, FlowField, DEFAULT_DYNAMIC_THRESHOLD};

pub const NORM_FLOOR: f64 = 1e-6;
pub const SPEED_BUCKET_WIDTH: f64 = 0.4;
pub const BNE_VARIANT_NOTE: &str =
    "bucketed normalized EPE: desk-scale variant, 0.4 m/s speed buckets, 1e-6 m normalization floor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    OtherVehicle,
    Pedestrian,
    WheeledVru,
    Background,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] =
        [Self::Car, Self::OtherVehicle, Self::Pedestrian, Self::WheeledVru, Self::Background];

    pub fn name(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::OtherVehicle => "other_vehicle",
            Self::Pedestrian => "pedestrian",
            Self::WheeledVru => "wheeled_vru",
            Self::Background => "background",
        }
    }
}

/// Speed edges `0.4, 0.8, ...` m/s up to 20 m/s; faster points share the
/// last bucket.
pub fn default_speed_edges() -> Vec<f64> {
    (1..=50).map(|k| k as f64 * SPEED_BUCKET_WIDTH).collect()
}

fn check_aligned(pred: &FlowField, gt: &FlowField) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted vectors for {} ground-truth vectors", pred.len(), gt.len())));
    }
    Ok(())
}

fn check_mask(n: usize, len: usize, what: &str) -> Result<()> {
    if n != len {
        return Err(Error::shape(format!("{what} has {len} entries for {n} points")));
    }
    Ok(())
}

pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<Vec<f64>> {
    check_aligned(pred, gt)?;
    Ok(pred
        .vectors
        .iter()
        .zip(&gt.vectors)
        .map(|(p, g)| norm3([p[0] - g[0], p[1] - g[1], p[2] - g[2]]))
        .collect())
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn average_epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    mean(epe(pred, gt)?).ok_or_else(|| Error::EmptyInput("no points to average".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThreeWayEpe {
    /// Unweighted mean of the present subset means.
    pub avg: f64,
    pub fd: Option<f64>,
    pub bs: Option<f64>,
    pub fs: Option<f64>,
    pub n_fd: usize,
    pub n_bs: usize,
    pub n_fs: usize,
}

pub fn threeway_epe(pred: &FlowField, gt: &FlowField, labels: &[ClassLabel]) -> Result<ThreeWayEpe> {
    let e = epe(pred, gt)?;
    check_mask(e.len(), labels.len(), "class mask")?;
    let subset = |want: ClassLabel| {
        let vals: Vec<f64> = e.iter().zip(labels).filter(|(_, l)| **l == want).map(|(v, _)| *v).collect();
        (mean(vals.iter().copied()), vals.len())
    };
    let (fd, n_fd) = subset(ClassLabel::ForegroundDynamic);
    let (bs, n_bs) = subset(ClassLabel::BackgroundStatic);
    let (fs, n_fs) = subset(ClassLabel::ForegroundStatic);
    let avg = mean([fd, bs, fs].into_iter().flatten()).ok_or_else(|| Error::EmptyInput("all subsets empty".into()))?;
    Ok(ThreeWayEpe { avg, fd, bs, fs, n_fd, n_bs, n_fs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketedEpe {
    /// One entry per [`ObjectClass::ALL`]; `None` when the class has no dynamic points.
    pub per_class: Vec<(ObjectClass, Option<f64>)>,
    pub dynamic_mean: Option<f64>,
    pub static_mean: Option<f64>,
}

impl BucketedEpe {
    pub fn class(&self, c: ObjectClass) -> Option<f64> {
        self.per_class.iter().find(|(k, _)| *k == c).and_then(|(_, v)| *v)
    }
}

/// Index of the speed bucket: the number of edges at or below `speed`.
pub fn speed_bucket_index(speed: f64, edges: &[f64]) -> usize {
    edges.partition_point(|&e| e <= speed)
}

pub fn bucketed_normalized_epe(
    pred: &FlowField,
    gt: &FlowField,
    labels: &[ClassLabel],
    classes: &[ObjectClass],
    dt: f64,
    edges: &[f64],
) -> Result<BucketedEpe> {
    let e = epe(pred, gt)?;
    check_mask(e.len(), labels.len(), "class mask")?;
    check_mask(e.len(), classes.len(), "object classes")?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("speed bucket edges must be finite and increasing".into()));
    }
    let n_buckets = edges.len() + 1;
    let mut sums = vec![vec![(0.0, 0usize); n_buckets]; ObjectClass::ALL.len()];
    let mut static_vals = Vec::new();
    for i in 0..e.len() {
        if labels[i] != ClassLabel::ForegroundDynamic {
            static_vals.push(e[i]);
            continue;
        }
        let g = norm3(gt.vectors[i]);
        let b = speed_bucket_index(g / dt, edges);
        let c = ObjectClass::ALL.iter().position(|k| *k == classes[i]).expect("class in ALL");
        let cell = &mut sums[c][b];
        cell.0 += e[i] / g.max(NORM_FLOOR);
        cell.1 += 1;
    }
    let per_class: Vec<(ObjectClass, Option<f64>)> = ObjectClass::ALL
        .iter()
        .zip(&sums)
        .map(|(k, buckets)| (*k, mean(buckets.iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / *n as f64))))
        .collect();
    let dynamic_mean = mean(per_class.iter().filter_map(|(_, v)| *v));
    Ok(BucketedEpe { per_class, dynamic_mean, static_mean: mean(static_vals) })
}

/// IoU of the predicted and true moving sets (`|v| > threshold`); 1 when both are empty.
pub fn dynamic_iou(pred: &FlowField, gt: &FlowField, threshold: f64) -> Result<f64> {
    check_aligned(pred, gt)?;
    if !(threshold > 0.0) {
        return Err(Error::InvalidInput(format!("motion threshold must be positive, got {threshold}")));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.vectors.iter().zip(&gt.vectors) {
        let (a, b) = (norm3(*p) > threshold, norm3(*g) > threshold);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_points: usize,
    pub avg_epe: f64,
    pub threeway: ThreeWayEpe,
    pub bucketed: BucketedEpe,
    pub dynamic_iou: f64,
}

pub fn evaluate(
    pred: &FlowField,
    gt: &FlowField,
    labels: &[ClassLabel],
    classes: &[ObjectClass],
    dt: f64,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        n_points: gt.len(),
        avg_epe: average_epe(pred, gt)?,
        threeway: threeway_epe(pred, gt, labels)?,
        bucketed: bucketed_normalized_epe(pred, gt, labels, classes, dt, &default_speed_edges())?,
        dynamic_iou: dynamic_iou(pred, gt, DEFAULT_DYNAMIC_THRESHOLD)?,
    })
}

impl MetricsReport {
    /// Named values in report order; absent subsets are `None`.
    pub fn rows(&self) -> Vec<(String, Option<f64>)> {
        let t = &self.threeway;
        let mut rows = vec![
            ("n_points".to_string(), Some(self.n_points as f64)),
            ("avg_epe".into(), Some(self.avg_epe)),
            ("threeway_avg".into(), Some(t.avg)),
            ("fd_epe".into(), t.fd),
            ("bs_epe".into(), t.bs),
            ("fs_epe".into(), t.fs),
            ("n_fd".into(), Some(t.n_fd as f64)),
            ("n_bs".into(), Some(t.n_bs as f64)),
            ("n_fs".into(), Some(t.n_fs as f64)),
        ];
        for (k, v) in &self.bucketed.per_class {
            rows.push((format!("bne_{}", k.name()), *v));
        }
        rows.push(("bne_dynamic_mean".into(), self.bucketed.dynamic_mean));
        rows.push(("bne_static_mean".into(), self.bucketed.static_mean));
        rows.push(("dynamic_iou".into(), Some(self.dynamic_iou)));
        rows
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# {BNE_VARIANT_NOTE}")?;
        writeln!(out, "metric,value")?;
        for (name, v) in self.rows() {
            writeln!(out, "{name},{}", fmt_opt(v))?;
        }
        Ok(())
    }

    /// Aligned columns: the 3-way table, then per-class normalized errors.
    pub fn to_text(&self) -> String {
        let t = &self.threeway;
        let mut s = String::new();
        let _ = writeln!(s, "{:<24}{:<24}{:<24}{:<24}", "Avg", "FD", "BS", "FS");
        let _ = writeln!(s, "{:<24}{:<24}{:<24}{:<24}", t.avg, fmt_opt(t.fd), fmt_opt(t.bs), fmt_opt(t.fs));
        let _ = writeln!(s, "{:<24}{:<24}{:<24}{:<24}", "points", t.n_fd, t.n_bs, t.n_fs);
        let _ = writeln!(s);
        let _ = writeln!(s, "{BNE_VARIANT_NOTE}");
        for (k, v) in &self.bucketed.per_class {
            let _ = writeln!(s, "  {:<22}{}", k.name(), fmt_opt(*v));
        }
        let _ = writeln!(s, "  {:<22}{}", "dynamic mean", fmt_opt(self.bucketed.dynamic_mean));
        let _ = writeln!(s, "  {:<22}{}", "static mean", fmt_opt(self.bucketed.static_mean));
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24}{}", "average EPE", self.avg_epe);
        let _ = writeln!(s, "{:<24}{}", "dynamic IoU", self.dynamic_iou);
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Parses a report written by [`MetricsReport::write_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, Option<f64>)>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (ln, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line != "metric,value" {
                return Err(Error::InvalidInput(format!("line {}: expected header 'metric,value'", ln + 1)));
            }
            header_seen = true;
            continue;
        }
        let (name, value) = line
            .split_once(',')
            .ok_or_else(|| Error::InvalidInput(format!("line {}: expected 'name,value'", ln + 1)))?;
        if name.is_empty() || value.contains(',') {
            return Err(Error::InvalidInput(format!("line {}: malformed row", ln + 1)));
        }
        let v = match value {
            "-" => None,
            s => Some(
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::InvalidInput(format!("line {}: bad value {s:?}", ln + 1)))?,
            ),
        };
        rows.push((name.to_string(), v));
    }
    if !header_seen {
        return Err(Error::InvalidInput("missing header".into()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::*;

    fn field(v: &[[f64; 3]]) -> FlowField {
        FlowField::new(v.to_vec())
    }

    #[test]
    fn three_four_five() {
        let e = epe(&field(&[[3.0, 4.0, 0.0]]), &field(&[[0.0; 3]])).unwrap();
        assert_eq!(e, vec![5.0]);
    }

    #[test]
    fn average() {
        let gt = field(&[[0.0; 3], [0.0; 3]]);
        assert_eq!(average_epe(&field(&[[0.0; 3], [2.0, 0.0, 0.0]]), &gt).unwrap(), 1.0);
        assert!(matches!(average_epe(&FlowField::zeros(0), &FlowField::zeros(0)), Err(Error::EmptyInput(_))));
        assert!(matches!(epe(&FlowField::zeros(1), &FlowField::zeros(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn threeway_subsets() {
        let gt = FlowField::zeros(3);
        let pred = field(&[[0.3, 0.0, 0.0], [0.0; 3], [0.0; 3]]);
        let t = threeway_epe(&pred, &gt, &[ForegroundDynamic, BackgroundStatic, ForegroundStatic]).unwrap();
        assert!((t.avg - 0.1).abs() < 1e-15);
        let t = threeway_epe(&gt, &gt, &[BackgroundStatic; 3]).unwrap();
        assert_eq!((t.bs, t.fd, t.fs, t.avg), (Some(0.0), None, None, 0.0));
        assert!(matches!(threeway_epe(&FlowField::zeros(0), &FlowField::zeros(0), &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn bucketed_single_car() {
        let gt = field(&[[1.0, 0.0, 0.0]]);
        let pred = field(&[[1.1, 0.0, 0.0]]);
        let b = bucketed_normalized_epe(&pred, &gt, &[ForegroundDynamic], &[ObjectClass::Car], 0.1, &default_speed_edges())
            .unwrap();
        assert!((b.class(ObjectClass::Car).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(b.class(ObjectClass::Pedestrian), None);
        assert_eq!(b.static_mean, None);
    }

    #[test]
    fn speed_buckets() {
        let edges = default_speed_edges();
        assert_eq!(speed_bucket_index(0.0, &edges), 0);
        assert_eq!(speed_bucket_index(0.4, &edges), 1);
        assert_eq!(speed_bucket_index(100.0, &edges), 50);
    }

    #[test]
    fn iou_cases() {
        let a = field(&[[1.0, 0.0, 0.0], [0.0; 3]]);
        let b = field(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert_eq!(dynamic_iou(&a, &a, 0.05).unwrap(), 1.0);
        assert_eq!(dynamic_iou(&a, &b, 0.05).unwrap(), 0.0);
        assert_eq!(dynamic_iou(&FlowField::zeros(3), &FlowField::zeros(3), 0.05).unwrap(), 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let gt = field(&[[1.0, 0.0, 0.0], [0.0; 3], [0.01, 0.0, 0.0]]);
        let pred = field(&[[0.9, 0.1, 0.0], [0.03, 0.0, 0.0], [0.0; 3]]);
        let labels = [ForegroundDynamic, BackgroundStatic, ForegroundStatic];
        let classes = [ObjectClass::Car, ObjectClass::Background, ObjectClass::Pedestrian];
        let r = evaluate(&pred, &gt, &labels, &classes, 0.1).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(parse_metrics_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), r.rows());
        assert!(parse_metrics_csv("metric,value\nx,nan\n").is_err());
        assert!(parse_metrics_csv("x,1\n").is_err());
    }
}
