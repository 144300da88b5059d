//! Independent oracles and instance generators for the acceptance suite.

#![allow(dead_code)]

use lidarmc_core::association::{Association, AssociationParams, ProjectedFeature, Targets};
use lidarmc_core::geom::{hat, Mat3};
use lidarmc_core::simulator::{Signal, Sinusoid, TrajectorySpec};
use lidarmc_core::{FeatureKind, ImuSample, Vec3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

fn random_signal(rng: &mut ChaCha8Rng, rate: f64, amplitude: f64) -> Signal {
    Signal {
        offset: rng.random_range(-0.5..0.5),
        rate: rng.random_range(-rate..rate),
        accel: rng.random_range(-0.5..0.5),
        sinusoids: (0..2)
            .map(|_| Sinusoid {
                amplitude: rng.random_range(0.0..amplitude),
                frequency: rng.random_range(0.2..2.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            })
            .collect(),
    }
}

/// Smooth trajectory with speeds around 1 m/s and rotation rates up to about 2 rad/s.
pub fn random_trajectory(rng: &mut ChaCha8Rng, duration: f64) -> TrajectorySpec {
    TrajectorySpec {
        duration,
        position: std::array::from_fn(|_| random_signal(rng, 1.0, 0.1)),
        orientation: std::array::from_fn(|_| random_signal(rng, 0.6, 0.1)),
    }
}

/// Rotation, velocity and position of the IMU relative to its frame at `t0`;
/// the gyro and accelerometer signals are linearly interpolated between samples.
pub struct Rk4State {
    pub rotation: Mat3,
    pub velocity: Vec3,
    pub position: Vec3,
}

fn interpolate(imu: &[ImuSample], t: f64) -> (Vec3, Vec3) {
    let i = imu.partition_point(|s| s.t <= t).clamp(1, imu.len() - 1);
    let (a, b) = (&imu[i - 1], &imu[i]);
    let u = (t - a.t) / (b.t - a.t);
    (a.gyro.lerp(&b.gyro, u), a.accel.lerp(&b.accel, u))
}

/// Classical fourth-order Runge-Kutta on `Ṙ = R ω^`, `v̇ = R a + g`, `ṗ = v`.
pub fn rk4_integrate(imu: &[ImuSample], t0: f64, t1: f64, v0: &Vec3, gravity: &Vec3, steps: usize) -> Rk4State {
    type S = (Mat3, Vec3, Vec3);
    let f = |t: f64, s: &S| -> S {
        let (w, a) = interpolate(imu, t);
        (s.0 * hat(&w), s.0 * a + gravity, s.1)
    };
    let add = |s: &S, k: &S, h: f64| -> S { (s.0 + k.0 * h, s.1 + k.1 * h, s.2 + k.2 * h) };
    let h = (t1 - t0) / steps as f64;
    let mut s: S = (Mat3::identity(), *v0, Vec3::zeros());
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = f(t, &s);
        let k2 = f(t + 0.5 * h, &add(&s, &k1, 0.5 * h));
        let k3 = f(t + 0.5 * h, &add(&s, &k2, 0.5 * h));
        let k4 = f(t + h, &add(&s, &k3, h));
        s = (
            s.0 + (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0) * (h / 6.0),
            s.1 + (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) * (h / 6.0),
            s.2 + (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2) * (h / 6.0),
        );
    }
    Rk4State { rotation: s.0, velocity: s.1, position: s.2 }
}

/// Angle of `a⁻¹ b` for two (near-)rotation matrices.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let m = a.transpose() * b;
    let axis = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    (0.5 * axis.norm()).atan2(0.5 * (m.trace() - 1.0))
}

fn needed(kind: FeatureKind) -> usize {
    match kind {
        FeatureKind::Edge => 2,
        FeatureKind::Planar => 3,
    }
}

/// Exhaustive-search association of segment `from` subjects to segment `to` targets.
pub fn brute_force_directed(projected: &[ProjectedFeature], from: usize, to: usize, params: &AssociationParams) -> Vec<Association> {
    let mut out = Vec::new();
    for kind in [FeatureKind::Edge, FeatureKind::Planar] {
        let k = needed(kind);
        let members: Vec<usize> = (0..projected.len()).filter(|&i| projected[i].segment == to && projected[i].kind() == kind).collect();
        if members.len() < k {
            continue;
        }
        for (subject, p) in projected.iter().enumerate() {
            if p.segment != from || p.kind() != kind {
                continue;
            }
            let mut by_distance: Vec<(f64, usize)> =
                members.iter().map(|&m| ((projected[m].position_i0 - p.position_i0).norm_squared(), m)).collect();
            by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nearest = &by_distance[..k];
            if nearest.iter().any(|(d2, _)| *d2 > params.gate * params.gate) {
                continue;
            }
            let t: Vec<usize> = nearest.iter().map(|(_, m)| *m).collect();
            let targets = if k == 2 {
                Targets::Line([t[0], t[1]])
            } else {
                let (a, b, c) = (projected[t[0]].position_i0, projected[t[1]].position_i0, projected[t[2]].position_i0);
                if (a - b).cross(&(a - c)).norm() <= 1e-9 {
                    continue;
                }
                Targets::Plane([t[0], t[1], t[2]])
            };
            out.push(Association { subject, targets });
        }
    }
    out
}

pub fn brute_force_window(projected: &[ProjectedFeature], segments: usize, params: &AssociationParams) -> Vec<Association> {
    let pairs: Vec<(usize, usize)> = if params.all_pairs {
        (0..segments).flat_map(|a| (a + 1..segments).map(move |b| (a, b))).collect()
    } else {
        vec![(0, segments - 1)]
    };
    let mut out = Vec::new();
    for (a, b) in pairs {
        out.extend(brute_force_directed(projected, a, b, params));
        if params.bidirectional {
            out.extend(brute_force_directed(projected, b, a, params));
        }
    }
    out
}
