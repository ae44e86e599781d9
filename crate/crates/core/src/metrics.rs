//! Overlap and boundary metrics for label volumes.
//!
//! Distances are in voxel units. Background (class 0) is excluded from
//! [`evaluate`].

use std::fmt;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::volio::LabelVolume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dims mismatch: truth {truth:?}, prediction {pred:?}")]
    Dims { truth: [usize; 3], pred: [usize; 3] },
    #[error("label {label} outside 0..{num_classes}")]
    Label { label: u32, num_classes: usize },
    #[error("paired samples differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFew(usize),
}

fn check(truth: &LabelVolume, pred: &LabelVolume) -> Result<(), MetricsError> {
    if truth.dims() != pred.dims() {
        return Err(MetricsError::Dims {
            truth: truth.dims(),
            pred: pred.dims(),
        });
    }
    Ok(())
}

/// Dice similarity coefficient in percent. Both sets empty gives 100.
pub fn dsc(truth: &LabelVolume, pred: &LabelVolume, class_id: u32) -> Result<f64, MetricsError> {
    check(truth, pred)?;
    let (mut g, mut p, mut both) = (0usize, 0usize, 0usize);
    for (&t, &q) in truth.data().iter().zip(pred.data()) {
        let (a, b) = (t == class_id, q == class_id);
        g += a as usize;
        p += b as usize;
        both += (a && b) as usize;
    }
    Ok(dsc_from_counts(g, p, both))
}

fn dsc_from_counts(g: usize, p: usize, both: usize) -> f64 {
    if g + p == 0 {
        100.0
    } else {
        200.0 * both as f64 / (g + p) as f64
    }
}

/// Voxel coordinates `(h, w, d)` of one class.
pub fn class_points(v: &LabelVolume, class_id: u32) -> Vec<[i64; 3]> {
    let [_, wn, dn] = v.dims();
    v.data()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class_id)
        .map(|(i, _)| [(i / (wn * dn)) as i64, ((i / dn) % wn) as i64, (i % dn) as i64])
        .collect()
}

fn dist2(a: [i64; 3], b: [i64; 3]) -> i64 {
    (0..3).map(|k| (a[k] - b[k]).pow(2)).sum()
}

/// `max_{a∈A} min_{b∈B} |a − b|²`. `B` must be non-empty.
fn directed2(a: &[[i64; 3]], b: &[[i64; 3]]) -> i64 {
    let mut worst = 0;
    for &pa in a {
        let mut best = i64::MAX;
        for &pb in b {
            let d = dist2(pa, pb);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance between two point sets. One empty set gives
/// infinity; both empty give 0.
pub fn hausdorff_points(g: &[[i64; 3]], p: &[[i64; 3]]) -> f64 {
    match (g.is_empty(), p.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => f64::INFINITY,
        _ => (directed2(g, p).max(directed2(p, g)) as f64).sqrt(),
    }
}

/// Hausdorff distance of one class, in voxels.
pub fn hausdorff(truth: &LabelVolume, pred: &LabelVolume, class_id: u32) -> Result<f64, MetricsError> {
    check(truth, pred)?;
    Ok(hausdorff_points(&class_points(truth, class_id), &class_points(pred, class_id)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetric {
    pub class_id: u32,
    pub dsc: f64,
    pub hd: f64,
    pub absent_in_truth: bool,
    pub absent_in_pred: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetric>,
    pub mean_dsc: f64,
    pub std_dsc: f64,
    /// Over classes with finite HD only.
    pub mean_hd: f64,
    pub std_hd: f64,
    /// Classes whose HD is infinite.
    pub missing_classes: usize,
}

/// Mean and population standard deviation; NaN for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-class DSC and HD for classes `1..num_classes`, with aggregates.
pub fn evaluate(truth: &LabelVolume, pred: &LabelVolume, num_classes: usize) -> Result<MetricReport, MetricsError> {
    check(truth, pred)?;
    if let Some(&label) = truth.data().iter().chain(pred.data()).find(|&&l| l as usize >= num_classes) {
        return Err(MetricsError::Label { label, num_classes });
    }
    let mut g_pts = vec![Vec::new(); num_classes];
    let mut p_pts = vec![Vec::new(); num_classes];
    let mut both = vec![0usize; num_classes];
    let [_, wn, dn] = truth.dims();
    for (i, (&t, &q)) in truth.data().iter().zip(pred.data()).enumerate() {
        let c = [(i / (wn * dn)) as i64, ((i / dn) % wn) as i64, (i % dn) as i64];
        g_pts[t as usize].push(c);
        p_pts[q as usize].push(c);
        if t == q {
            both[t as usize] += 1;
        }
    }
    let per_class: Vec<ClassMetric> = (1..num_classes)
        .map(|c| ClassMetric {
            class_id: c as u32,
            dsc: dsc_from_counts(g_pts[c].len(), p_pts[c].len(), both[c]),
            hd: hausdorff_points(&g_pts[c], &p_pts[c]),
            absent_in_truth: g_pts[c].is_empty(),
            absent_in_pred: p_pts[c].is_empty(),
        })
        .collect();
    let dscs: Vec<f64> = per_class.iter().map(|m| m.dsc).collect();
    let hds: Vec<f64> = per_class.iter().map(|m| m.hd).filter(|h| h.is_finite()).collect();
    let (mean_dsc, std_dsc) = mean_std(&dscs);
    let (mean_hd, std_hd) = mean_std(&hds);
    Ok(MetricReport {
        missing_classes: per_class.len() - hds.len(),
        per_class,
        mean_dsc,
        std_dsc,
        mean_hd,
        std_hd,
    })
}

impl fmt::Display for MetricReport {
    /// `class_id dsc hd` per class, then
    /// `mean_dsc std_dsc mean_hd std_hd missing_classes`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.per_class {
            writeln!(f, "{} {:.4} {:.4}", m.class_id, m.dsc, m.hd)?;
        }
        write!(
            f,
            "{:.4} {:.4} {:.4} {:.4} {}",
            self.mean_dsc, self.std_dsc, self.mean_hd, self.std_hd, self.missing_classes
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-tailed paired t-test on `a − b`. Identical samples give `t = 0, p = 1`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Length(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(MetricsError::TooFew(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}
