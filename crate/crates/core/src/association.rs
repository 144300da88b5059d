//! Window segmentation, projection of features into the IMU frame at the
//! window start, and nearest-neighbour association between segments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureKind, FeaturePoint};
use crate::geom::{RigidTransform, Vec3};
use crate::kdtree::KdTree;
use crate::preintegration::{PreintegrationError, PreintegrationGrid};
use crate::solver::{project_point, WindowState};

/// Planar target triples with a smaller normal norm are dropped.
pub const COLLINEAR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("window [{t_f0}, {t_f1}] with {segments} segments is invalid")]
    InvalidWindow { t_f0: f64, t_f1: f64, segments: usize },
    #[error("timestamp {t:.9} outside window [{t_f0:.9}, {t_f1:.9})")]
    OutOfWindow { t: f64, t_f0: f64, t_f1: f64 },
    #[error(transparent)]
    Preintegration(#[from] PreintegrationError),
}

/// Estimation window `[t_f0, t_f1)` split into equal-duration segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub t_f0: f64,
    pub t_f1: f64,
    pub segments: usize,
}

impl Window {
    pub fn new(t_f0: f64, t_f1: f64, segments: usize) -> Result<Self, AssociationError> {
        if segments < 2 || !(t_f1 > t_f0) || !t_f0.is_finite() || !t_f1.is_finite() {
            return Err(AssociationError::InvalidWindow { t_f0, t_f1, segments });
        }
        Ok(Self { t_f0, t_f1, segments })
    }

    pub fn duration(&self) -> f64 {
        self.t_f1 - self.t_f0
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_f0 && t < self.t_f1
    }

    /// `floor(K (t - t_f0) / (t_f1 - t_f0))`.
    pub fn segment_of(&self, t: f64) -> Result<usize, AssociationError> {
        if !self.contains(t) {
            return Err(AssociationError::OutOfWindow { t, t_f0: self.t_f0, t_f1: self.t_f1 });
        }
        let s = (self.segments as f64 * (t - self.t_f0) / self.duration()).floor() as usize;
        Ok(s.min(self.segments - 1))
    }

    pub fn segment_bounds(&self, segment: usize) -> (f64, f64) {
        let len = self.duration() / self.segments as f64;
        (self.t_f0 + segment as f64 * len, self.t_f0 + (segment + 1) as f64 * len)
    }
}

/// Splits features into `K` segment lists.
pub fn partition(
    features: &[FeaturePoint],
    window: &Window,
) -> Result<Vec<Vec<FeaturePoint>>, AssociationError> {
    let mut out = vec![Vec::new(); window.segments];
    for f in features {
        out[window.segment_of(f.point.t)?].push(*f);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedFeature {
    pub source: FeaturePoint,
    /// Position in the IMU frame at `t_f0`.
    pub position_i0: Vec3,
    pub segment: usize,
}

impl ProjectedFeature {
    pub fn kind(&self) -> FeatureKind {
        self.source.kind
    }
}

/// Projects features with the trajectory implied by `state`.
pub fn project(
    features: &[FeaturePoint],
    grid: &PreintegrationGrid,
    state: &WindowState,
    extrinsic: &RigidTransform,
    window: &Window,
) -> Result<Vec<ProjectedFeature>, AssociationError> {
    features
        .iter()
        .map(|f| {
            let segment = window.segment_of(f.point.t)?;
            let factor = grid.query(f.point.t)?;
            let position_i0 = project_point(&factor, state, extrinsic, &f.point.position);
            Ok(ProjectedFeature { source: *f, position_i0, segment })
        })
        .collect()
}

/// Target features of one association, as indices into the projected list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Targets {
    Line([usize; 2]),
    Plane([usize; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Association {
    pub subject: usize,
    pub targets: Targets,
}

impl Association {
    pub fn kind(&self) -> FeatureKind {
        match self.targets {
            Targets::Line(_) => FeatureKind::Edge,
            Targets::Plane(_) => FeatureKind::Planar,
        }
    }

    pub fn target_indices(&self) -> &[usize] {
        match &self.targets {
            Targets::Line(t) => t,
            Targets::Plane(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationParams {
    /// Maximum subject–target distance (m).
    pub gate: f64,
    pub kd_leaf_size: usize,
    /// Also associate last → first.
    pub bidirectional: bool,
    /// Associate every segment pair instead of only first and last.
    pub all_pairs: bool,
}

impl Default for AssociationParams {
    fn default() -> Self {
        Self { gate: 0.5, kd_leaf_size: 16, bidirectional: true, all_pairs: false }
    }
}

fn neighbour_count(kind: FeatureKind) -> usize {
    match kind {
        FeatureKind::Edge => 2,
        FeatureKind::Planar => 3,
    }
}

/// Target lookup for one segment and feature kind.
struct TargetIndex {
    /// Indices into the projected list.
    members: Vec<usize>,
    tree: KdTree,
}

impl TargetIndex {
    fn build(projected: &[ProjectedFeature], segment: usize, kind: FeatureKind, leaf: usize) -> Self {
        let members: Vec<usize> = projected
            .iter()
            .enumerate()
            .filter(|(_, p)| p.segment == segment && p.kind() == kind)
            .map(|(i, _)| i)
            .collect();
        let points: Vec<Vec3> = members.iter().map(|&i| projected[i].position_i0).collect();
        Self { tree: KdTree::new(&points, leaf), members }
    }
}

/// Associates subjects of `from` with targets in `to` (one direction).
pub fn associate_directed(
    projected: &[ProjectedFeature],
    from: usize,
    to: usize,
    params: &AssociationParams,
) -> Vec<Association> {
    let mut out = Vec::new();
    for kind in [FeatureKind::Edge, FeatureKind::Planar] {
        let index = TargetIndex::build(projected, to, kind, params.kd_leaf_size);
        let k = neighbour_count(kind);
        if index.members.len() < k {
            continue;
        }
        let gate2 = params.gate * params.gate;
        for (subject, p) in projected.iter().enumerate() {
            if p.segment != from || p.kind() != kind {
                continue;
            }
            let hits = index.tree.nearest(&p.position_i0, k);
            if hits.len() < k || hits.iter().any(|h| h.dist2 > gate2) {
                continue;
            }
            let t: Vec<usize> = hits.iter().map(|h| index.members[h.index]).collect();
            if let Some(a) = make_association(projected, subject, &t) {
                out.push(a);
            }
        }
    }
    out.sort_by_key(|a| a.subject);
    out
}

pub(crate) fn make_association(projected: &[ProjectedFeature], subject: usize, t: &[usize]) -> Option<Association> {
    match t.len() {
        2 => Some(Association { subject, targets: Targets::Line([t[0], t[1]]) }),
        3 => {
            let (a, b, c) = (projected[t[0]].position_i0, projected[t[1]].position_i0, projected[t[2]].position_i0);
            if (a - b).cross(&(a - c)).norm() <= COLLINEAR_TOLERANCE {
                return None;
            }
            Some(Association { subject, targets: Targets::Plane([t[0], t[1], t[2]]) })
        }
        _ => None,
    }
}

/// Associates segments `a` and `b`, in both directions when configured.
pub fn associate(
    projected: &[ProjectedFeature],
    a: usize,
    b: usize,
    params: &AssociationParams,
) -> Vec<Association> {
    let mut out = associate_directed(projected, a, b, params);
    if params.bidirectional {
        out.extend(associate_directed(projected, b, a, params));
    }
    out
}

/// All associations of a window: first ↔ last segment, or every pair.
pub fn associate_window(
    projected: &[ProjectedFeature],
    segments: usize,
    params: &AssociationParams,
) -> Vec<Association> {
    if segments < 2 {
        return Vec::new();
    }
    if !params.all_pairs {
        return associate(projected, 0, segments - 1, params);
    }
    let mut out = Vec::new();
    for a in 0..segments {
        for b in (a + 1)..segments {
            out.extend(associate(projected, a, b, params));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::LidarPoint;
    use crate::preintegration::{preintegrate, BiasPair, ImuSample};
    use crate::solver::GRAVITY;

    fn planar(p: Vec3, t: f64, segment: usize) -> ProjectedFeature {
        ProjectedFeature {
            source: FeaturePoint {
                point: LidarPoint { t, position: p, channel: 0 },
                kind: FeatureKind::Planar,
                roughness: 0.0,
            },
            position_i0: p,
            segment,
        }
    }

    #[test]
    fn partition_boundaries() {
        let w = Window::new(0.0, 0.45, 3).unwrap();
        assert_eq!(w.segment_of(0.20).unwrap(), 1);
        assert_eq!(w.segment_of(0.0).unwrap(), 0);
        assert_eq!(w.segment_of(0.449999).unwrap(), 2);
        assert!(w.segment_of(0.45).is_err());
        assert!(w.segment_of(-1e-6).is_err());
        assert!(Window::new(0.0, 0.45, 1).is_err());
    }

    #[test]
    fn single_planar_feature_is_not_enough() {
        let p = vec![planar(Vec3::x(), 0.0, 0), planar(Vec3::x(), 0.4, 2)];
        assert!(associate(&p, 0, 2, &AssociationParams::default()).is_empty());
    }

    #[test]
    fn coincident_clouds_associate_fully() {
        let base = [Vec3::zeros(), Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.0), Vec3::new(0.1, 0.1, 0.02)];
        let mut p: Vec<ProjectedFeature> = base.iter().map(|&x| planar(x, 0.0, 0)).collect();
        p.extend(base.iter().map(|&x| planar(x, 0.4, 2)));
        let a = associate(&p, 0, 2, &AssociationParams::default());
        assert_eq!(a.len(), 8);
        for assoc in &a {
            let s = p[assoc.subject].position_i0;
            assert!(assoc.target_indices().iter().any(|&t| p[t].position_i0 == s));
            assert!(assoc.target_indices().iter().all(|&t| p[t].segment != p[assoc.subject].segment));
        }
    }

    #[test]
    fn gate_rejects_distant_clouds() {
        let params = AssociationParams::default();
        let base = [Vec3::zeros(), Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.1, 0.0), Vec3::new(0.1, 0.1, 0.0)];
        let offset = Vec3::new(0.0, 0.0, 2.0 * params.gate);
        let mut p: Vec<ProjectedFeature> = base.iter().map(|&x| planar(x, 0.0, 0)).collect();
        p.extend(base.iter().map(|&x| planar(x + offset, 0.4, 2)));
        assert!(associate(&p, 0, 2, &params).is_empty());
    }

    #[test]
    fn collinear_targets_are_dropped() {
        let mut p = vec![planar(Vec3::new(0.0, 0.1, 0.0), 0.0, 0)];
        for i in 0..3 {
            p.push(planar(Vec3::new(i as f64 * 0.1, 0.0, 0.0), 0.4, 2));
        }
        assert!(associate_directed(&p, 0, 2, &AssociationParams::default()).is_empty());
    }

    #[test]
    fn stationary_projection_applies_extrinsic() {
        let g = Vec3::new(0.0, 0.0, GRAVITY);
        let imu: Vec<ImuSample> = (0..200)
            .map(|i| ImuSample { t: -0.05 + i as f64 * 0.005, accel: g, gyro: Vec3::zeros() })
            .collect();
        let grid = preintegrate(&imu, 0.0, 0.45, 1000.0, &BiasPair::zero()).unwrap();
        let w = Window::new(0.0, 0.45, 3).unwrap();
        let state = WindowState::from_gravity(Vec3::new(0.0, 0.0, -GRAVITY));
        let ext = RigidTransform::from_axis_angle(&Vec3::new(0.0, 0.1, 0.2), Vec3::new(0.1, 0.0, 0.05));
        let feats: Vec<FeaturePoint> = [0.0, 0.2, 0.44]
            .iter()
            .map(|&t| FeaturePoint {
                point: LidarPoint { t, position: Vec3::new(1.0, 2.0, 3.0), channel: 0 },
                kind: FeatureKind::Planar,
                roughness: 0.0,
            })
            .collect();
        let proj = project(&feats, &grid, &state, &ext, &w).unwrap();
        for pf in &proj {
            assert!((pf.position_i0 - ext.transform_point(&Vec3::new(1.0, 2.0, 3.0))).norm() < 1e-12);
        }
        assert_eq!(proj[1].segment, 1);
        // identity extrinsic at t_f0 returns the raw position
        let id = project(&feats[..1], &grid, &state, &RigidTransform::identity(), &w).unwrap();
        assert_eq!(id[0].position_i0, Vec3::new(1.0, 2.0, 3.0));
    }
}
