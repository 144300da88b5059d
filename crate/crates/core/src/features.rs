//! Planar and edge feature extraction from per-channel point streams.
//!
//! A point's roughness is its distance to the line through the points `n`
//! positions before and after it on the same channel. Low roughness marks a
//! planar feature; strict local maxima of roughness above the edge threshold
//! mark edges.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Vec3;

/// Denominators below this are treated as degenerate.
pub const DEGENERATE_BASE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    /// Emission time (s).
    pub t: f64,
    /// Position in the lidar frame at emission time (m).
    pub position: Vec3,
    pub channel: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKind {
    Planar,
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint {
    pub point: LidarPoint,
    pub kind: FeatureKind,
    pub roughness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    /// Channel index offset of the neighbour line.
    pub n: usize,
    /// Roughness below this is planar (m).
    pub planar_threshold: f64,
    /// Planar features kept per extraction call.
    pub max_planar_per_segment: usize,
    /// Minimum roughness of an edge (m).
    pub edge_min_prominence: f64,
    /// Seed of the planar subsampling.
    pub seed: u64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            n: 5,
            planar_threshold: 0.05,
            max_planar_per_segment: 2000,
            edge_min_prominence: 0.05,
            seed: 0,
        }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.n < 1 {
            return Err("features.n must be >= 1".into());
        }
        if !(self.planar_threshold > 0.0) || !(self.edge_min_prominence > 0.0) {
            return Err("feature thresholds must be > 0".into());
        }
        Ok(())
    }
}

/// Distance from `p` to the line through `prev` and `next`; `None` when the
/// two line points coincide.
pub fn roughness(prev: &Vec3, p: &Vec3, next: &Vec3) -> Option<f64> {
    let base = (prev - next).norm();
    if base < DEGENERATE_BASE {
        return None;
    }
    Some((p - prev).cross(&(p - next)).norm() / base)
}

#[derive(Debug, Clone, Default)]
pub struct FeatureExtraction {
    /// Channel-major, time-minor.
    pub features: Vec<FeaturePoint>,
    /// Points skipped because their neighbour line was degenerate.
    pub degenerate: usize,
}

/// Roughness per point of one time-ordered channel; `None` within `n` of either
/// end and for degenerate neighbour lines.
fn channel_roughness(points: &[&LidarPoint], n: usize, degenerate: &mut usize) -> Vec<Option<f64>> {
    let len = points.len();
    (0..len)
        .map(|i| {
            if i < n || i + n >= len {
                return None;
            }
            let r = roughness(&points[i - n].position, &points[i].position, &points[i + n].position);
            if r.is_none() {
                *degenerate += 1;
            }
            r
        })
        .collect()
}

/// Extracts features from `points`, grouped by their `channel` field; each
/// channel must be time ordered. `salt` varies the planar subsample between
/// calls sharing one parameter set.
pub fn extract_features_salted(points: &[LidarPoint], params: &FeatureParams, salt: u64) -> FeatureExtraction {
    let mut channels: BTreeMap<u32, Vec<&LidarPoint>> = BTreeMap::new();
    for p in points {
        channels.entry(p.channel).or_default().push(p);
    }
    let n = params.n.max(1);
    let edge_floor = params.edge_min_prominence.max(params.planar_threshold);
    let mut out = FeatureExtraction::default();
    let mut planar_slots = Vec::new();
    for pts in channels.values() {
        let rough = channel_roughness(pts, n, &mut out.degenerate);
        for (i, r) in rough.iter().enumerate() {
            let Some(r) = *r else { continue };
            let kind = if r < params.planar_threshold {
                FeatureKind::Planar
            } else if r >= edge_floor && is_strict_local_max(&rough, i, n) {
                FeatureKind::Edge
            } else {
                continue;
            };
            if kind == FeatureKind::Planar {
                planar_slots.push(out.features.len());
            }
            out.features.push(FeaturePoint { point: *pts[i], kind, roughness: r });
        }
    }
    let cap = params.max_planar_per_segment;
    if planar_slots.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut keep = vec![false; planar_slots.len()];
        for k in sample(&mut rng, planar_slots.len(), cap) {
            keep[k] = true;
        }
        let mut drop = vec![false; out.features.len()];
        for (k, &slot) in planar_slots.iter().enumerate() {
            drop[slot] = !keep[k];
        }
        let mut idx = 0;
        out.features.retain(|_| {
            idx += 1;
            !drop[idx - 1]
        });
    }
    out
}

pub fn extract_features(points: &[LidarPoint], params: &FeatureParams) -> FeatureExtraction {
    extract_features_salted(points, params, 0)
}

fn is_strict_local_max(rough: &[Option<f64>], i: usize, n: usize) -> bool {
    let r = rough[i].unwrap();
    let lo = i.saturating_sub(n);
    let hi = (i + n).min(rough.len() - 1);
    (lo..=hi).filter(|&j| j != i).all(|j| rough[j].is_none_or(|rj| rj < r))
}
