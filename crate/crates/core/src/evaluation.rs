//! Map distance, double-wall gap and classification metrics.

use rayon::prelude::*;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::dynamics::{Label, SpacetimePoint};
use crate::geom::{fit_plane, Vec3};
use crate::kdtree::KdTree;

const KD_LEAF: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("empty {0} cloud")]
    Empty(&'static str),
    #[error("fraction must lie in (0, 1], got {0}")]
    Fraction(f64),
    #[error("no self-overlapping surfaces between the first and last quarters")]
    NoOverlap,
    #[error("{predicted} predictions for {truth} ground-truth points")]
    LengthMismatch { predicted: usize, truth: usize },
}

/// Mean of the smallest `⌈fraction·n⌉` nearest-neighbour distances from `cloud` to `reference`.
pub fn mean_best_distance(cloud: &[Vec3], reference: &[Vec3], fraction: f64) -> Result<f64, EvaluationError> {
    if cloud.is_empty() {
        return Err(EvaluationError::Empty("evaluated"));
    }
    if reference.is_empty() {
        return Err(EvaluationError::Empty("reference"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvaluationError::Fraction(fraction));
    }
    let tree = KdTree::new(reference, KD_LEAF);
    let mut d: Vec<f64> = cloud.par_iter().map(|p| tree.nearest(p, 1)[0].dist2.sqrt()).collect();
    Ok(best_fraction_mean(&mut d, fraction))
}

fn best_fraction_mean(d: &mut [f64], fraction: f64) -> f64 {
    let keep = ((fraction * d.len() as f64).ceil() as usize).clamp(1, d.len());
    d.sort_by(f64::total_cmp);
    d[..keep].iter().sum::<f64>() / keep as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoubleWallParams {
    /// Early-neighbour radius (m).
    pub radius: f64,
    pub min_neighbours: usize,
    /// Maximum ratio of the smallest to the middle eigenvalue of an accepted local plane.
    pub max_flatness: f64,
}

impl Default for DoubleWallParams {
    fn default() -> Self {
        Self { radius: 0.3, min_neighbours: 3, max_flatness: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoubleWallGap {
    /// Mean point-to-plane distance (m).
    pub gap: f64,
    /// Late points that contributed.
    pub pairs: usize,
}

pub fn double_wall_gap(points: &[SpacetimePoint]) -> Result<f64, EvaluationError> {
    double_wall_gap_with(points, &DoubleWallParams::default()).map(|g| g.gap)
}

/// Distances of last-quarter points to planes fitted through first-quarter neighbours.
pub fn double_wall_gap_with(points: &[SpacetimePoint], params: &DoubleWallParams) -> Result<DoubleWallGap, EvaluationError> {
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.t), hi.max(p.t)));
    if !(hi > lo) {
        return Err(EvaluationError::NoOverlap);
    }
    let quarter = 0.25 * (hi - lo);
    let early: Vec<Vec3> = points.iter().filter(|p| p.t < lo + quarter).map(|p| p.position).collect();
    let late: Vec<Vec3> = points.iter().filter(|p| p.t >= hi - quarter).map(|p| p.position).collect();
    let tree = KdTree::new(&early, KD_LEAF);
    let distances: Vec<f64> = late
        .par_iter()
        .filter_map(|q| {
            let hood: Vec<Vec3> = tree.within(q, params.radius).iter().map(|n| early[n.index]).collect();
            if hood.len() < params.min_neighbours {
                return None;
            }
            let (c, n, ev) = fit_plane(&hood)?;
            (ev[1] > 0.0 && ev[0] <= params.max_flatness * ev[1]).then(|| (q - c).dot(&n).abs())
        })
        .collect();
    if distances.is_empty() {
        return Err(EvaluationError::NoOverlap);
    }
    Ok(DoubleWallGap { gap: distances.iter().sum::<f64>() / distances.len() as f64, pairs: distances.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// A ratio, or `Undefined` when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    fn ratio(num: f64, den: f64) -> Self {
        if den > 0.0 {
            Metric::Value(num / den)
        } else {
            Metric::Undefined
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Undefined => None,
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => s.serialize_f64(*v),
            Metric::Undefined => s.serialize_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub counts: ConfusionCounts,
    /// Points dropped as Unknown or beyond the range gate.
    pub excluded: usize,
    pub iou: Metric,
    pub recall: Metric,
    pub precision: Metric,
    pub accuracy: Metric,
    pub f1: Metric,
    /// Static points predicted dynamic over all static points.
    pub false_positive_rate: Metric,
}

impl ClassificationMetrics {
    pub fn from_counts(counts: ConfusionCounts, excluded: usize) -> Self {
        let ConfusionCounts { tp, fp, fn_, tn } = counts;
        let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        let recall = Metric::ratio(tp, tp + fn_);
        let precision = Metric::ratio(tp, tp + fp);
        let f1 = match (precision, recall) {
            (Metric::Value(p), Metric::Value(r)) => Metric::ratio(2.0 * p * r, p + r),
            _ => Metric::Undefined,
        };
        Self {
            counts,
            excluded,
            iou: Metric::ratio(tp, tp + fp + fn_),
            recall,
            precision,
            accuracy: Metric::ratio(tp + tn, tp + fp + fn_ + tn),
            f1,
            false_positive_rate: Metric::ratio(fp, fp + tn),
        }
    }
}

pub const DEFAULT_RANGE_GATE: f64 = 20.0;

/// Dynamic is the positive class; Unknown predictions and points with
/// `range ≥ gate` are excluded. `truth` is `true` for dynamic points.
pub fn classification_metrics(
    predicted: &[Label],
    truth: &[bool],
    ranges: &[f64],
    gate: f64,
) -> Result<ClassificationMetrics, EvaluationError> {
    if predicted.len() != truth.len() || ranges.len() != truth.len() {
        return Err(EvaluationError::LengthMismatch { predicted: predicted.len(), truth: truth.len().min(ranges.len()) });
    }
    let mut c = ConfusionCounts::default();
    let mut excluded = 0;
    for ((p, &t), &r) in predicted.iter().zip(truth).zip(ranges) {
        if *p == Label::Unknown || !(r < gate) {
            excluded += 1;
            continue;
        }
        match (*p == Label::Dynamic, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(ClassificationMetrics::from_counts(c, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize, step: f64) -> Vec<Vec3> {
        (0..n).flat_map(|i| (0..n).map(move |j| Vec3::new(i as f64 * step, j as f64 * step, 0.0))).collect()
    }

    #[test]
    fn best_distance_examples() {
        let c = grid(10, 0.1);
        assert_eq!(mean_best_distance(&c, &c, 0.75).unwrap(), 0.0);
        let shifted: Vec<Vec3> = c.iter().map(|p| p + Vec3::new(0.0, 0.0, 0.03)).collect();
        assert!((mean_best_distance(&c, &shifted, 1.0).unwrap() - 0.03).abs() < 1e-12);
        let mut d = [1.0, 2.0, 3.0, 100.0];
        assert_eq!(best_fraction_mean(&mut d, 0.75), 2.0);
        assert_eq!(mean_best_distance(&[], &c, 0.75), Err(EvaluationError::Empty("evaluated")));
    }

    fn two_walls(offset: f64) -> Vec<SpacetimePoint> {
        let mut out = Vec::new();
        for (k, p) in grid(30, 0.05).into_iter().enumerate() {
            let t = 0.45 * k as f64 / 900.0;
            let shift = if t >= 0.3375 { offset } else { 0.0 };
            out.push(SpacetimePoint::new(Vec3::new(p.x, p.y, shift), t));
            out.push(SpacetimePoint::new(Vec3::new(shift + 2.0, p.x, p.y), t));
        }
        // Late sweep revisits the early region.
        for (k, p) in grid(30, 0.05).into_iter().enumerate().filter(|(k, _)| k % 3 == 0) {
            let t = 0.45 - 1e-4 * k as f64 / 900.0;
            out.push(SpacetimePoint::new(Vec3::new(p.x, p.y, offset), t));
        }
        out
    }

    #[test]
    fn double_wall_examples() {
        assert!(double_wall_gap(&two_walls(0.0)).unwrap() < 1e-3);
        let g = double_wall_gap(&two_walls(0.1)).unwrap();
        assert!((g - 0.1).abs() < 1e-6, "{g}");
        let disjoint: Vec<SpacetimePoint> = (0..100).map(|i| SpacetimePoint::new(Vec3::new(i as f64, 0.0, 0.0), i as f64 * 0.01)).collect();
        assert_eq!(double_wall_gap(&disjoint), Err(EvaluationError::NoOverlap));
    }

    #[test]
    fn classification_examples() {
        let mut pred = vec![Label::Dynamic; 5];
        pred.extend(vec![Label::Static; 95]);
        let mut truth = vec![true; 10];
        truth.extend(vec![false; 90]);
        let ranges = vec![1.0; 100];
        let m = classification_metrics(&pred, &truth, &ranges, DEFAULT_RANGE_GATE).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 5, fp: 0, fn_: 5, tn: 90 });
        assert_eq!(m.iou, Metric::Value(0.5));
        assert_eq!(m.recall, Metric::Value(0.5));
        assert_eq!(m.precision, Metric::Value(1.0));
        assert_eq!(m.accuracy, Metric::Value(0.95));
        assert!((m.f1.value().unwrap() - 2.0 / 3.0).abs() < 1e-12);

        let perfect = classification_metrics(&[Label::Dynamic, Label::Static], &[true, false], &[1.0, 1.0], 20.0).unwrap();
        for v in [perfect.iou, perfect.recall, perfect.precision, perfect.accuracy, perfect.f1] {
            assert_eq!(v, Metric::Value(1.0));
        }
        let none = classification_metrics(&[Label::Static; 3], &[false; 3], &[1.0; 3], 20.0).unwrap();
        assert_eq!((none.iou, none.recall, none.precision, none.f1), (Metric::Undefined, Metric::Undefined, Metric::Undefined, Metric::Undefined));
        assert_eq!(none.accuracy, Metric::Value(1.0));
        assert_eq!(serde_json::to_string(&none.iou).unwrap(), "\"undefined\"");
    }

    #[test]
    fn gate_and_unknown_are_excluded() {
        let m = classification_metrics(&[Label::Dynamic, Label::Unknown, Label::Static], &[false, true, true], &[25.0, 1.0, 1.0], 20.0).unwrap();
        assert_eq!(m.excluded, 2);
        assert_eq!(m.counts, ConfusionCounts { tp: 0, fp: 0, fn_: 1, tn: 0 });
        assert!(matches!(classification_metrics(&[Label::Static], &[], &[], 20.0), Err(EvaluationError::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn metric_relations(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
            let m = ClassificationMetrics::from_counts(ConfusionCounts { tp, fp, fn_, tn }, 0);
            if let (Some(i), Some(p), Some(r)) = (m.iou.value(), m.precision.value(), m.recall.value()) {
                prop_assert!(i <= p.min(r) + 1e-12);
                if let Some(f) = m.f1.value() {
                    prop_assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn best_distance_rigid_invariant(
            pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 5..40),
            axis in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
        ) {
            let cloud: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let reference: Vec<Vec3> = cloud.iter().map(|p| p * 0.9 + Vec3::new(0.05, 0.0, 0.0)).collect();
            let r = crate::geom::Rotation::exp(&Vec3::new(axis.0, axis.1, axis.2));
            let mv = |c: &[Vec3]| c.iter().map(|p| r.rotate(p) + Vec3::new(1.0, -2.0, 3.0)).collect::<Vec<_>>();
            let a = mean_best_distance(&cloud, &reference, 0.75).unwrap();
            let b = mean_best_distance(&mv(&cloud), &mv(&reference), 0.75).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
