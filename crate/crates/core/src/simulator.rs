//! Synthetic ground truth: analytic 6-DoF trajectories, IMU synthesis and a
//! spinning lidar ray-cast against static and constant-velocity rigid bodies.
//!
//! Orientation is `R(t) = Exp(φ(t))` with each component of `φ` an analytic
//! signal, so angular rate is `Jr(φ) φ̇` and specific force is
//! `Rᵀ (p̈ − g)` exactly.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::LidarPoint;
use crate::geom::{right_jacobian, RigidTransform, Rotation, TransformSpec, Vec3};
use crate::preintegration::{BiasPair, ImuSample};
use crate::solver::GRAVITY;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulatorError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: &str) -> SimulatorError {
    SimulatorError::Invalid { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    /// rad.
    #[serde(default)]
    pub phase: f64,
}

/// `offset + rate t + accel t²/2 + Σ A sin(2π f t + φ)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Signal {
    pub offset: f64,
    pub rate: f64,
    pub accel: f64,
    pub sinusoids: Vec<Sinusoid>,
}

impl Signal {
    pub fn constant(offset: f64) -> Self {
        Self { offset, ..Self::default() }
    }

    pub fn linear(offset: f64, rate: f64) -> Self {
        Self { offset, rate, ..Self::default() }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.offset
            + self.rate * t
            + 0.5 * self.accel * t * t
            + self.sinusoids.iter().map(|s| s.amplitude * (TAU * s.frequency * t + s.phase).sin()).sum::<f64>()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.rate
            + self.accel * t
            + self
                .sinusoids
                .iter()
                .map(|s| s.amplitude * TAU * s.frequency * (TAU * s.frequency * t + s.phase).cos())
                .sum::<f64>()
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        self.accel
            - self
                .sinusoids
                .iter()
                .map(|s| s.amplitude * (TAU * s.frequency).powi(2) * (TAU * s.frequency * t + s.phase).sin())
                .sum::<f64>()
    }

    fn validate(&self, field: &str) -> Result<(), SimulatorError> {
        let finite = [self.offset, self.rate, self.accel].iter().all(|x| x.is_finite())
            && self.sinusoids.iter().all(|s| s.amplitude.is_finite() && s.frequency.is_finite() && s.phase.is_finite());
        if !finite {
            return Err(invalid(field, "non-finite coefficient"));
        }
        Ok(())
    }
}

/// World pose of the IMU over `[0, duration]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    /// s.
    pub duration: f64,
    pub position: [Signal; 3],
    /// Axis-angle components (rad).
    pub orientation: [Signal; 3],
}

fn eval3(s: &[Signal; 3], f: impl Fn(&Signal) -> f64) -> Vec3 {
    Vec3::new(f(&s[0]), f(&s[1]), f(&s[2]))
}

impl TrajectorySpec {
    pub fn stationary(duration: f64) -> Self {
        Self { duration, position: Default::default(), orientation: Default::default() }
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(invalid("trajectory.duration", "must be > 0"));
        }
        for (i, s) in self.position.iter().enumerate() {
            s.validate(&format!("trajectory.position[{i}]"))?;
        }
        for (i, s) in self.orientation.iter().enumerate() {
            s.validate(&format!("trajectory.orientation[{i}]"))?;
        }
        Ok(())
    }

    pub fn position(&self, t: f64) -> Vec3 {
        eval3(&self.position, |s| s.value(t))
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        eval3(&self.position, |s| s.derivative(t))
    }

    pub fn acceleration(&self, t: f64) -> Vec3 {
        eval3(&self.position, |s| s.second_derivative(t))
    }

    pub fn rotation_vector(&self, t: f64) -> Vec3 {
        eval3(&self.orientation, |s| s.value(t))
    }

    pub fn rotation(&self, t: f64) -> Rotation {
        Rotation::exp(&self.rotation_vector(t))
    }

    /// IMU-to-world pose.
    pub fn pose(&self, t: f64) -> RigidTransform {
        RigidTransform::new(self.rotation(t), self.position(t))
    }

    /// Body-frame angular velocity.
    pub fn angular_velocity(&self, t: f64) -> Vec3 {
        right_jacobian(&self.rotation_vector(t)) * eval3(&self.orientation, |s| s.derivative(t))
    }

    /// Body-frame specific force for world gravity `g`.
    pub fn specific_force(&self, t: f64, g: &Vec3) -> Vec3 {
        self.rotation(t).transpose().rotate(&(self.acceleration(t) - g))
    }

    /// Velocity at `t` in the IMU frame at `t`.
    pub fn body_velocity(&self, t: f64) -> Vec3 {
        self.rotation(t).transpose().rotate(&self.velocity(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuSpec {
    /// Hz.
    pub rate: f64,
    pub accel_noise: f64,
    pub gyro_noise: f64,
    pub bias: BiasPair,
    pub gravity: Vec3,
}

impl Default for ImuSpec {
    fn default() -> Self {
        Self {
            rate: 200.0,
            accel_noise: 0.0,
            gyro_noise: 0.0,
            bias: BiasPair::zero(),
            gravity: Vec3::new(0.0, 0.0, -GRAVITY),
        }
    }
}

impl ImuSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(invalid("imu.rate", "must be > 0"));
        }
        if !(self.accel_noise >= 0.0) || !(self.gyro_noise >= 0.0) {
            return Err(invalid("imu noise", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarSpec {
    pub channels: u32,
    /// Lowest beam elevation (rad).
    pub fov_min: f64,
    /// Highest beam elevation (rad).
    pub fov_max: f64,
    /// Revolutions per second.
    pub rotation_rate: f64,
    /// Firings per channel per revolution.
    pub points_per_revolution: u32,
    /// Gaussian range noise σ (m).
    pub range_noise: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Lidar-to-IMU transform.
    pub extrinsic: TransformSpec,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            channels: 16,
            fov_min: -15f64.to_radians(),
            fov_max: 15f64.to_radians(),
            rotation_rate: 10.0,
            points_per_revolution: 900,
            range_noise: 0.02,
            min_range: 0.2,
            max_range: 100.0,
            extrinsic: TransformSpec { rotation: [0.0; 3], translation: [0.0; 3] },
        }
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.channels == 0 || self.points_per_revolution == 0 {
            return Err(invalid("lidar", "channels and points_per_revolution must be > 0"));
        }
        if !(self.rotation_rate > 0.0) || !(self.fov_max >= self.fov_min) {
            return Err(invalid("lidar", "rotation_rate must be > 0 and fov_max >= fov_min"));
        }
        if !(self.range_noise >= 0.0) || !(self.max_range > self.min_range) || !(self.min_range >= 0.0) {
            return Err(invalid("lidar", "bad range settings"));
        }
        Ok(())
    }

    pub fn firing_period(&self) -> f64 {
        1.0 / (self.rotation_rate * self.points_per_revolution as f64 * self.channels as f64)
    }

    fn elevation(&self, channel: u32) -> f64 {
        if self.channels == 1 {
            return 0.5 * (self.fov_min + self.fov_max);
        }
        self.fov_min + (self.fov_max - self.fov_min) * channel as f64 / (self.channels - 1) as f64
    }

    /// Channel, emission time and lidar-frame direction of global firing `k`.
    pub fn firing(&self, k: u64) -> (u32, f64, Vec3) {
        let channel = (k % self.channels as u64) as u32;
        let t = k as f64 * self.firing_period();
        let azimuth = TAU * self.rotation_rate * t;
        let el = self.elevation(channel);
        (channel, t, Vec3::new(el.cos() * azimuth.cos(), el.cos() * azimuth.sin(), el.sin()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Axis-aligned box surface (usable from inside as a room).
    Box { min: Vec3, max: Vec3 },
    /// Rectangle `corner + a u + b v`, `a, b ∈ [0, 1]`.
    Quad { corner: Vec3, u: Vec3, v: Vec3 },
    Triangles { triangles: Vec<[Vec3; 3]> },
}

impl Shape {
    fn triangles(&self) -> Vec<[Vec3; 3]> {
        match self {
            Shape::Box { min, max } => {
                let c = |x: usize, y: usize, z: usize| {
                    Vec3::new(if x == 0 { min.x } else { max.x }, if y == 0 { min.y } else { max.y }, if z == 0 { min.z } else { max.z })
                };
                let faces = [
                    [c(0, 0, 0), c(0, 1, 0), c(0, 1, 1), c(0, 0, 1)],
                    [c(1, 0, 0), c(1, 1, 0), c(1, 1, 1), c(1, 0, 1)],
                    [c(0, 0, 0), c(1, 0, 0), c(1, 0, 1), c(0, 0, 1)],
                    [c(0, 1, 0), c(1, 1, 0), c(1, 1, 1), c(0, 1, 1)],
                    [c(0, 0, 0), c(1, 0, 0), c(1, 1, 0), c(0, 1, 0)],
                    [c(0, 0, 1), c(1, 0, 1), c(1, 1, 1), c(0, 1, 1)],
                ];
                faces.iter().flat_map(|f| [[f[0], f[1], f[2]], [f[0], f[2], f[3]]]).collect()
            }
            Shape::Quad { corner, u, v } => {
                vec![[*corner, corner + u, corner + u + v], [*corner, corner + u + v, corner + v]]
            }
            Shape::Triangles { triangles } => triangles.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub shape: Shape,
    /// World velocity (m/s); non-zero marks the body dynamic.
    #[serde(default = "Vec3::zeros")]
    pub velocity: Vec3,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub bodies: Vec<BodySpec>,
}

#[derive(Debug, Clone)]
struct Mesh {
    triangles: Vec<[Vec3; 3]>,
    lo: Vec3,
    hi: Vec3,
    velocity: Vec3,
}

/// Scene prepared for ray casting.
#[derive(Debug, Clone)]
pub struct CompiledScene {
    meshes: Vec<Mesh>,
}

/// Nearest hit of a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub body: usize,
}

const DEGENERATE_AREA: f64 = 1e-12;

impl Scene {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        for (i, b) in self.bodies.iter().enumerate() {
            if b.velocity.iter().any(|x| !x.is_finite()) {
                return Err(invalid(&format!("bodies[{i}].velocity"), "non-finite"));
            }
            let tris = b.shape.triangles();
            if tris.is_empty() {
                return Err(invalid(&format!("bodies[{i}]"), "no triangles"));
            }
            for (j, t) in tris.iter().enumerate() {
                if (t[1] - t[0]).cross(&(t[2] - t[0])).norm() <= DEGENERATE_AREA || t.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
                    return Err(invalid(&format!("bodies[{i}] triangle {j}"), "degenerate or non-finite"));
                }
            }
        }
        Ok(())
    }

    pub fn compile(&self) -> CompiledScene {
        let meshes = self
            .bodies
            .iter()
            .map(|b| {
                let triangles = b.shape.triangles();
                let mut lo = Vec3::repeat(f64::INFINITY);
                let mut hi = Vec3::repeat(f64::NEG_INFINITY);
                for p in triangles.iter().flatten() {
                    lo = lo.inf(p);
                    hi = hi.sup(p);
                }
                Mesh { triangles, lo, hi, velocity: b.velocity }
            })
            .collect();
        CompiledScene { meshes }
    }

    pub fn is_dynamic(&self, body: usize) -> bool {
        self.bodies[body].velocity != Vec3::zeros()
    }
}

/// Ray/triangle intersection distance (both faces).
pub fn intersect_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

fn ray_hits_box(origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3, max_t: f64) -> bool {
    let (mut t0, mut t1) = (0.0f64, max_t);
    for k in 0..3 {
        let inv = 1.0 / dir[k];
        let (mut a, mut b) = ((lo[k] - origin[k]) * inv, (hi[k] - origin[k]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if a.is_nan() || b.is_nan() {
            // Ray parallel to the slab with origin on its boundary.
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return false;
            }
            continue;
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return false;
        }
    }
    true
}

impl CompiledScene {
    /// Nearest hit with range in `[min_range, max_range]` at time `t`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, t: f64, min_range: f64, max_range: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (body, mesh) in self.meshes.iter().enumerate() {
            let o = origin - mesh.velocity * t;
            let limit = best.map_or(max_range, |b| b.range);
            if !ray_hits_box(&o, dir, &mesh.lo, &mesh.hi, limit) {
                continue;
            }
            for tri in &mesh.triangles {
                if let Some(r) = intersect_triangle(&o, dir, tri) {
                    if r >= min_range && r <= max_range && best.is_none_or(|b| r < b.range) {
                        best = Some(Hit { range: r, body });
                    }
                }
            }
        }
        best
    }
}

/// Stable 64-bit mix of two words.
pub fn stable_hash(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const IMU_STREAM: u64 = 0x494D_5500;
const LIDAR_STREAM: u64 = 0x4C49_4400;

/// IMU stream gaps are padded this far beyond the requested interval.
pub const IMU_MARGIN: f64 = 0.05;

/// Samples on `k / rate` over `[t0 − margin, t1 + margin]`.
pub fn synth_imu(traj: &TrajectorySpec, spec: &ImuSpec, t0: f64, t1: f64, seed: u64) -> Vec<ImuSample> {
    let k0 = ((t0 - IMU_MARGIN) * spec.rate).floor() as i64;
    let k1 = ((t1 + IMU_MARGIN) * spec.rate).ceil() as i64;
    (k0..=k1)
        .map(|k| {
            let t = k as f64 / spec.rate;
            let mut accel = traj.specific_force(t, &spec.gravity) + spec.bias.accel_bias;
            let mut gyro = traj.angular_velocity(t) + spec.bias.gyro_bias;
            if spec.accel_noise > 0.0 || spec.gyro_noise > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed ^ IMU_STREAM, k as u64));
                let na = Normal::new(0.0, spec.accel_noise).expect("noise validated");
                let ng = Normal::new(0.0, spec.gyro_noise).expect("noise validated");
                accel += Vec3::from_fn(|_, _| na.sample(&mut rng));
                gyro += Vec3::from_fn(|_, _| ng.sample(&mut rng));
            }
            ImuSample { t, accel, gyro }
        })
        .collect()
}

/// A simulated return with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimPoint {
    /// Noisy lidar-frame measurement.
    pub point: LidarPoint,
    /// Noise-free world position at emission time.
    pub world: Vec3,
    pub body: usize,
    pub dynamic: bool,
}

/// Every firing with emission time in `[t0, t1)`, cast from the true pose.
pub fn synth_sweep(
    traj: &TrajectorySpec,
    scene: &Scene,
    lidar: &LidarSpec,
    t0: f64,
    t1: f64,
    seed: u64,
) -> Vec<SimPoint> {
    let compiled = scene.compile();
    let period = lidar.firing_period();
    let k0 = (t0 / period).ceil().max(0.0) as u64;
    let k1 = (t1 / period).ceil().max(0.0) as u64;
    let extrinsic = lidar.extrinsic.to_transform();
    let noise = (lidar.range_noise > 0.0).then(|| Normal::new(0.0, lidar.range_noise).expect("noise validated"));
    (k0..k1)
        .into_par_iter()
        .filter_map(|k| {
            let (channel, t, dir_l) = lidar.firing(k);
            if t < t0 || t >= t1 {
                return None;
            }
            let world_from_lidar = traj.pose(t) * extrinsic;
            let origin = world_from_lidar.translation;
            let dir = world_from_lidar.rotation.rotate(&dir_l);
            let hit = compiled.cast(&origin, &dir, t, lidar.min_range, lidar.max_range)?;
            let mut range = hit.range;
            if let Some(n) = &noise {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed ^ LIDAR_STREAM, k));
                range += n.sample(&mut rng);
            }
            Some(SimPoint {
                point: LidarPoint { t, position: range * dir_l, channel },
                world: origin + hit.range * dir,
                body: hit.body,
                dynamic: scene.is_dynamic(hit.body),
            })
        })
        .collect()
}

/// Noise-free position of `p` in the IMU frame at time `t_ref`.
pub fn world_to_imu(traj: &TrajectorySpec, t_ref: f64, world: &Vec3) -> Vec3 {
    traj.pose(t_ref).inverse().transform_point(world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn room() -> Scene {
        Scene {
            bodies: vec![BodySpec {
                shape: Shape::Box { min: Vec3::new(-5.0, -4.0, -1.5), max: Vec3::new(6.0, 3.0, 2.5) },
                velocity: Vec3::zeros(),
            }],
        }
    }

    #[test]
    fn stationary_level_imu() {
        let imu = synth_imu(&TrajectorySpec::stationary(1.0), &ImuSpec::default(), 0.0, 1.0, 1);
        for s in &imu {
            assert_abs_diff_eq!(s.accel, Vec3::new(0.0, 0.0, GRAVITY), epsilon = 1e-15);
            assert_eq!(s.gyro, Vec3::zeros());
        }
        assert_eq!(imu.len(), 221);
        assert!((imu[0].t + 0.05).abs() < 1e-12);
    }

    #[test]
    fn constant_acceleration() {
        let mut traj = TrajectorySpec::stationary(1.0);
        traj.position[0].accel = 1.0;
        let f = traj.specific_force(0.3, &ImuSpec::default().gravity);
        assert_abs_diff_eq!(f, Vec3::new(1.0, 0.0, GRAVITY), epsilon = 1e-15);
    }

    #[test]
    fn circular_motion_centripetal() {
        let (r, w) = (2.0, 1.5);
        let f = w / TAU;
        let mut traj = TrajectorySpec::stationary(5.0);
        traj.position[0].sinusoids.push(Sinusoid { amplitude: r, frequency: f, phase: std::f64::consts::FRAC_PI_2 });
        traj.position[1].sinusoids.push(Sinusoid { amplitude: r, frequency: f, phase: 0.0 });
        for t in [0.0, 0.7, 2.3] {
            let horizontal = traj.acceleration(t);
            assert!((horizontal.norm() - r * w * w).abs() < 1e-9);
        }
    }

    #[test]
    fn angular_velocity_matches_finite_difference() {
        let mut traj = TrajectorySpec::stationary(2.0);
        traj.orientation[0] = Signal { offset: 0.2, rate: 0.3, accel: 0.0, sinusoids: vec![Sinusoid { amplitude: 0.4, frequency: 0.7, phase: 0.1 }] };
        traj.orientation[2] = Signal { offset: -0.5, rate: 1.0, accel: 0.4, sinusoids: vec![] };
        let t = 0.8;
        let h = 1e-6;
        let dr = traj.rotation(t).transpose() * traj.rotation(t + h);
        let dl = traj.rotation(t).transpose() * traj.rotation(t - h);
        let fd = (dr.log() - dl.log()) / (2.0 * h);
        assert_abs_diff_eq!(fd, traj.angular_velocity(t), epsilon = 1e-8);
    }

    #[test]
    fn firing_schedule() {
        let spec = LidarSpec { channels: 4, points_per_revolution: 10, rotation_rate: 10.0, ..LidarSpec::default() };
        let (c, t, _) = spec.firing(5);
        assert_eq!(c, 1);
        assert!((t - 5.0 / 400.0).abs() < 1e-15);
        let (_, _, d) = spec.firing(40);
        assert!((d - Vec3::new(spec.fov_min.cos(), 0.0, spec.fov_min.sin())).norm() < 1e-9);
    }

    #[test]
    fn stationary_sweep_in_closed_room() {
        let lidar = LidarSpec { range_noise: 0.0, ..LidarSpec::default() };
        let traj = TrajectorySpec::stationary(1.0);
        let pts = synth_sweep(&traj, &room(), &lidar, 0.0, 0.1, 3);
        assert_eq!(pts.len(), 16 * 900);
        for p in &pts {
            assert!((p.point.position - p.world).norm() < 1e-9);
            assert!(!p.dynamic);
        }
        assert!(pts.windows(2).all(|w| w[0].point.t < w[1].point.t));
    }

    #[test]
    fn noise_is_deterministic_per_ray() {
        let lidar = LidarSpec::default();
        let traj = TrajectorySpec::stationary(1.0);
        let a = synth_sweep(&traj, &room(), &lidar, 0.0, 0.05, 9);
        let b = synth_sweep(&traj, &room(), &lidar, 0.02, 0.05, 9);
        let tail = &a[a.len() - b.len()..];
        assert_eq!(tail, &b[..]);
        let c = synth_sweep(&traj, &room(), &lidar, 0.0, 0.05, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn moving_body_is_labelled_and_displaced() {
        let mut scene = room();
        scene.bodies.push(BodySpec {
            shape: Shape::Box { min: Vec3::new(2.0, -0.5, -1.5), max: Vec3::new(2.5, 0.5, 0.5) },
            velocity: Vec3::new(1.0, 0.0, 0.0),
        });
        let lidar = LidarSpec { range_noise: 0.0, ..LidarSpec::default() };
        let traj = TrajectorySpec::stationary(1.0);
        let pts = synth_sweep(&traj, &scene, &lidar, 0.0, 0.5, 0);
        let box_pts: Vec<_> = pts.iter().filter(|p| p.body == 1).collect();
        assert!(!box_pts.is_empty());
        assert!(box_pts.iter().all(|p| p.dynamic));
        assert!(pts.iter().filter(|p| p.body == 0).all(|p| !p.dynamic));
        for p in box_pts.iter().filter(|p| p.world.x < 2.0 + p.point.t + 1e-9 && p.world.y.abs() < 0.4) {
            assert!((p.world.x - (2.0 + p.point.t)).abs() < 1e-9);
        }
    }

    #[test]
    fn translating_sensor_shears_raw_wall() {
        let scene = Scene { bodies: vec![BodySpec { shape: Shape::Quad { corner: Vec3::new(-20.0, 5.0, -5.0), u: Vec3::new(40.0, 0.0, 0.0), v: Vec3::new(0.0, 0.0, 10.0) }, velocity: Vec3::zeros() }] };
        let mut traj = TrajectorySpec::stationary(1.0);
        traj.position[1] = Signal::linear(0.0, 1.0);
        let lidar = LidarSpec { range_noise: 0.0, ..LidarSpec::default() };
        let pts = synth_sweep(&traj, &scene, &lidar, 0.0, 0.1, 0);
        assert!(pts.iter().all(|p| (p.world.y - 5.0).abs() < 1e-9));
        let ys: Vec<f64> = pts.iter().map(|p| p.point.position.y).collect();
        let spread = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ys.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 0.04);
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let scene = Scene { bodies: vec![BodySpec { shape: Shape::Triangles { triangles: vec![[Vec3::zeros(), Vec3::x(), 2.0 * Vec3::x()]] }, velocity: Vec3::zeros() }] };
        assert!(scene.validate().is_err());
        assert!(room().validate().is_ok());
    }
}
