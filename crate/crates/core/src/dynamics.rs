//! Dynamic point detection from spatiotemporal normals.
//!
//! Each point is lifted to `[x, y, z, t]`. The eigenvector of the smallest
//! eigenvalue of a neighbourhood's 4×4 covariance is the local spacetime
//! normal; its temporal component is zero for static surfaces and equals
//! `v/√(1+v²)` for a plane translating along its normal at `v` m/s.

use std::collections::BTreeMap;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{SymMat4, Vec3};
use crate::kdtree::KdTree;

const KD_LEAF: usize = 16;
const MAX_NEIGHBOURS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpacetimePoint {
    pub position: Vec3,
    pub t: f64,
}

impl SpacetimePoint {
    pub fn new(position: Vec3, t: f64) -> Self {
        Self { position, t }
    }

    fn lifted(&self) -> Vector4<f64> {
        Vector4::new(self.position.x, self.position.y, self.position.z, self.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsParams {
    /// Spatial neighbour radius (m).
    pub search_radius: f64,
    pub score_threshold: f64,
    /// Voxel size for scoring representatives (m).
    pub down_voxel: f64,
    /// Label propagation radius (m).
    pub up_voxel: f64,
    pub min_neighbours: usize,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        Self { search_radius: 0.3, score_threshold: 0.4, down_voxel: 0.1, up_voxel: 0.2, min_neighbours: 8 }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [self.search_radius, self.score_threshold, self.down_voxel, self.up_voxel];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.min_neighbours == 0 {
            return Err("dynamics parameters must all be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Static,
    Dynamic,
    Unknown,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Static => "static",
            Label::Dynamic => "dynamic",
            Label::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "static" => Some(Label::Static),
            "dynamic" => Some(Label::Dynamic),
            "unknown" => Some(Label::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelledPoint {
    pub point: SpacetimePoint,
    /// `None` when the neighbourhood is deficient.
    pub score: Option<f64>,
    pub label: Label,
}

/// Voxel representatives and the point-to-representative map.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsampled {
    /// Index into the input of each representative, ordered by voxel key.
    pub representatives: Vec<usize>,
    /// Representative slot of every input point.
    pub assignment: Vec<usize>,
}

fn voxel_key(p: &Vec3, voxel: f64) -> (i64, i64, i64) {
    ((p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64)
}

/// One point per occupied spatial voxel: the one nearest the voxel's
/// spacetime centroid (lowest index on ties).
pub fn downsample(points: &[SpacetimePoint], voxel: f64) -> Downsampled {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut voxels: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        voxels.entry(voxel_key(&p.position, voxel)).or_default().push(i);
    }
    let mut assignment = vec![0; points.len()];
    let mut representatives = Vec::with_capacity(voxels.len());
    for members in voxels.values() {
        let centroid = members.iter().map(|&i| points[i].lifted()).sum::<Vector4<f64>>() / members.len() as f64;
        let best = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = (points[a].lifted() - centroid).norm_squared();
                let db = (points[b].lifted() - centroid).norm_squared();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("voxel has members");
        for &i in members {
            assignment[i] = representatives.len();
        }
        representatives.push(best);
    }
    Downsampled { representatives, assignment }
}

/// Population covariance of the lifted neighbourhood about its spacetime mean.
pub fn spacetime_covariance(neighbours: &[SpacetimePoint]) -> SymMat4 {
    if neighbours.is_empty() {
        return SymMat4::zeros();
    }
    let n = neighbours.len() as f64;
    let mean = neighbours.iter().map(|p| p.lifted()).sum::<Vector4<f64>>() / n;
    let mut cov = Matrix4::zeros();
    for p in neighbours {
        let d = p.lifted() - mean;
        cov += d * d.transpose();
    }
    SymMat4::new(cov / n).expect("covariance of finite points is symmetric")
}

/// `|t|` component of the smallest-eigenvalue unit eigenvector.
///
/// When the smallest eigenvalue is repeated, the eigenspace contains a
/// vector with zero temporal component and the score is 0.
pub fn dynamicity_score(cov: &SymMat4) -> f64 {
    let e = cov.eig();
    let scale = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale;
    if e.values[1] - e.values[0] <= tol {
        return 0.0;
    }
    e.vectors[0][3].abs().min(1.0)
}

/// Scores and labels every point of a window cloud.
///
/// One score per voxel representative, from the covariance of the raw
/// points within `search_radius` of it (evenly thinned to at most 256 in
/// input order). Points take their representative's label, or that of the
/// nearest scored representative within `up_voxel`; otherwise Unknown.
pub fn classify(points: &[SpacetimePoint], params: &DynamicsParams) -> Vec<LabelledPoint> {
    if points.is_empty() {
        return Vec::new();
    }
    let down = downsample(points, params.down_voxel);
    let reps: Vec<SpacetimePoint> = down.representatives.iter().map(|&i| points[i]).collect();
    let positions: Vec<Vec3> = reps.iter().map(|p| p.position).collect();
    let raw_positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let tree = KdTree::new(&raw_positions, KD_LEAF);
    let scores: Vec<Option<f64>> = reps
        .par_iter()
        .map(|rep| {
            let mut found: Vec<usize> = tree.within(&rep.position, params.search_radius).iter().map(|n| n.index).collect();
            found.sort_unstable();
            let stride = found.len().div_ceil(MAX_NEIGHBOURS).max(1);
            let hood: Vec<SpacetimePoint> = found.iter().step_by(stride).map(|&i| points[i]).collect();
            (hood.len() >= params.min_neighbours).then(|| dynamicity_score(&spacetime_covariance(&hood)))
        })
        .collect();
    let scored: Vec<usize> = (0..reps.len()).filter(|&i| scores[i].is_some()).collect();
    let scored_positions: Vec<Vec3> = scored.iter().map(|&i| positions[i]).collect();
    let scored_tree = KdTree::new(&scored_positions, KD_LEAF);
    let up2 = params.up_voxel * params.up_voxel;
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let own = down.assignment[i];
            let score = scores[own].or_else(|| {
                scored_tree
                    .nearest(&p.position, 1)
                    .first()
                    .filter(|n| n.dist2 <= up2)
                    .and_then(|n| scores[scored[n.index]])
            });
            let label = match score {
                Some(s) if s > params.score_threshold => Label::Dynamic,
                Some(_) => Label::Static,
                None => Label::Unknown,
            };
            LabelledPoint { point: *p, score, label }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rotation;
    use proptest::prelude::*;

    fn translating_plane(normal: Vec3, v: f64, n: usize) -> Vec<SpacetimePoint> {
        let normal = normal.normalize();
        let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = normal.cross(&helper).normalize();
        let w = normal.cross(&u);
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let t = 0.45 * ((i * n + j) as f64 * 0.618_034).fract();
                let a = -0.25 + 0.5 * i as f64 / (n - 1) as f64;
                let b = -0.25 + 0.5 * j as f64 / (n - 1) as f64;
                out.push(SpacetimePoint::new(u * a + w * b + normal * (v * t), t));
            }
        }
        out
    }

    #[test]
    fn downsample_examples() {
        let two = [SpacetimePoint::new(Vec3::new(0.01, 0.01, 0.01), 0.0), SpacetimePoint::new(Vec3::new(0.05, 0.02, 0.03), 0.1)];
        assert_eq!(downsample(&two, 0.1).representatives.len(), 1);
        let grid: Vec<SpacetimePoint> = (0..5)
            .flat_map(|i| (0..5).map(move |j| SpacetimePoint::new(Vec3::new(0.05 + 0.1 * i as f64, 0.05 + 0.1 * j as f64, 0.05), 0.0)))
            .collect();
        assert_eq!(downsample(&grid, 0.1).representatives.len(), 25);
    }

    #[test]
    fn downsample_uniform_cube_is_bounded() {
        let pts: Vec<SpacetimePoint> = (0..10_000)
            .map(|i| {
                let f = |k: f64| ((i as f64 + 1.0) * k).fract();
                SpacetimePoint::new(Vec3::new(f(0.754_877_7), f(0.569_840_3), f(0.396_010_3)), f(0.231))
            })
            .collect();
        let d = downsample(&pts, 0.1);
        assert!(d.representatives.len() <= 1000);
        assert!(d.assignment.iter().all(|&a| a < d.representatives.len()));
    }

    #[test]
    fn covariance_examples() {
        let same = vec![SpacetimePoint::new(Vec3::new(1.0, 2.0, 3.0), 0.2); 5];
        assert_eq!(*spacetime_covariance(&same).matrix(), Matrix4::zeros());
        let two = [SpacetimePoint::new(Vec3::zeros(), 0.0), SpacetimePoint::new(Vec3::new(1.0, 2.0, 0.5), 0.3)];
        let e = spacetime_covariance(&two).eig();
        assert!(e.values[..3].iter().all(|v| v.abs() < 1e-12));
        let plane = translating_plane(Vec3::z(), 0.0, 20);
        let c = spacetime_covariance(&plane);
        let m = c.matrix();
        for k in 0..3 {
            assert!(m[(k, 3)].abs() < 2e-3, "cross term {k}: {}", m[(k, 3)]);
        }
        assert!(m[(2, 2)].abs() < 1e-15);
    }

    #[test]
    fn static_plane_scores_zero() {
        let plane = translating_plane(Vec3::new(0.3, -0.2, 1.0), 0.0, 20);
        assert!(dynamicity_score(&spacetime_covariance(&plane)) < 1e-9);
    }

    #[test]
    fn translating_plane_law() {
        for v in [0.2, 0.5, 1.0, 2.0] {
            let plane = translating_plane(Vec3::new(1.0, 0.4, -0.2), v, 20);
            let s = dynamicity_score(&spacetime_covariance(&plane));
            let expected = v / (1.0 + v * v).sqrt();
            assert!((s - expected).abs() < 1e-6, "v = {v}: {s} vs {expected}");
        }
        let v = 0.4364;
        let s = dynamicity_score(&spacetime_covariance(&translating_plane(Vec3::x(), v, 20)));
        assert!((s - 0.4).abs() < 1e-4);
    }

    #[test]
    fn degenerate_covariance_scores_zero() {
        assert_eq!(dynamicity_score(&SymMat4::zeros()), 0.0);
    }

    #[test]
    fn classify_empty_and_moving_plane() {
        assert!(classify(&[], &DynamicsParams::default()).is_empty());
        let mut pts = translating_plane(Vec3::x(), 1.4, 40);
        pts.extend(translating_plane(Vec3::x(), 0.0, 40).into_iter().map(|p| SpacetimePoint::new(p.position + Vec3::new(0.0, 3.0, 0.0), p.t)));
        let out = classify(&pts, &DynamicsParams::default());
        assert_eq!(out.len(), pts.len());
        let half = pts.len() / 2;
        let dynamic = out[..half].iter().filter(|p| p.label == Label::Dynamic).count();
        let false_pos = out[half..].iter().filter(|p| p.label == Label::Dynamic).count();
        assert!(dynamic as f64 > 0.8 * half as f64, "{dynamic}/{half}");
        assert_eq!(false_pos, 0);
    }

    #[test]
    fn isolated_points_are_unknown() {
        let pts = [SpacetimePoint::new(Vec3::zeros(), 0.0), SpacetimePoint::new(Vec3::new(5.0, 0.0, 0.0), 0.1)];
        assert!(classify(&pts, &DynamicsParams::default()).iter().all(|p| p.label == Label::Unknown && p.score.is_none()));
    }

    proptest! {
        #[test]
        fn score_is_bounded_and_rigid_invariant(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.0f64..0.45), 9..40),
            axis in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
            shift in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
        ) {
            let cloud: Vec<SpacetimePoint> = pts.iter().map(|&(x, y, z, t)| SpacetimePoint::new(Vec3::new(x, y, z), t)).collect();
            let r = Rotation::exp(&Vec3::new(axis.0, axis.1, axis.2));
            let d = Vec3::new(shift.0, shift.1, shift.2);
            let moved: Vec<SpacetimePoint> = cloud.iter().map(|p| SpacetimePoint::new(r.rotate(&p.position) + d, p.t)).collect();
            let a = dynamicity_score(&spacetime_covariance(&cloud));
            let b = dynamicity_score(&spacetime_covariance(&moved));
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }

        #[test]
        fn score_increases_with_speed(v in 0.05f64..3.0, dv in 0.05f64..1.0) {
            let s = |v: f64| dynamicity_score(&spacetime_covariance(&translating_plane(Vec3::new(0.2, 1.0, 0.1), v, 12)));
            prop_assert!(s(v + dv) > s(v));
        }
    }
}
