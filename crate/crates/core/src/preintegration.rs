//! Discrete IMU preintegration on a fixed-rate grid with first-order bias
//! correction, and the pose of the IMU relative to its frame at the grid start.
//!
//! Each grid step integrates the exact interval mean of the linearly
//! interpolated IMU signal. Rotation uses the exponential map; the specific
//! force is rotated with the mid-step attitude. The bias Jacobians are the
//! exact derivatives of this discrete scheme, so first-order bias correction
//! has a purely second-order residual.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{hat, right_jacobian, Mat3, RigidTransform, Rotation, Vec3};

/// IMU samples must extend this far beyond the integrated interval on both sides.
pub const COVERAGE_SLACK: f64 = 0.010;
/// Default preintegration grid rate (Hz).
pub const DEFAULT_RATE: f64 = 1000.0;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// Seconds.
    pub t: f64,
    /// Specific force in the IMU frame (m/s²).
    pub accel: Vec3,
    /// Angular rate in the IMU frame (rad/s).
    pub gyro: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BiasPair {
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
}

impl BiasPair {
    pub fn new(accel_bias: Vec3, gyro_bias: Vec3) -> Self {
        Self { accel_bias, gyro_bias }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreintegrationError {
    #[error("IMU data covers [{have_start:.6}, {have_end:.6}] but [{need_start:.6}, {need_end:.6}] is required")]
    InsufficientCoverage { need_start: f64, need_end: f64, have_start: f64, have_end: f64 },
    #[error("IMU timestamps not strictly increasing at sample {index}")]
    NonMonotonic { index: usize },
    #[error("non-finite IMU sample at index {index}")]
    NonFinite { index: usize },
    #[error("query time {t:.9} outside grid [{start:.9}, {end:.9}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("invalid preintegration interval or rate")]
    InvalidInterval,
}

/// Relative rotation, velocity and position between `t0` and `t`, with
/// Jacobians with respect to the IMU biases at `linearization_bias`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreintegratedFactor {
    pub t0: f64,
    pub t: f64,
    pub delta_r: Rotation,
    pub delta_v: Vec3,
    pub delta_p: Vec3,
    pub j_r_bg: Mat3,
    pub j_v_ba: Mat3,
    pub j_v_bg: Mat3,
    pub j_p_ba: Mat3,
    pub j_p_bg: Mat3,
    pub linearization_bias: BiasPair,
}

impl PreintegratedFactor {
    pub fn identity(t0: f64, linearization_bias: BiasPair) -> Self {
        Self {
            t0,
            t: t0,
            delta_r: Rotation::identity(),
            delta_v: Vec3::zeros(),
            delta_p: Vec3::zeros(),
            j_r_bg: Mat3::zeros(),
            j_v_ba: Mat3::zeros(),
            j_v_bg: Mat3::zeros(),
            j_p_ba: Mat3::zeros(),
            j_p_bg: Mat3::zeros(),
            linearization_bias,
        }
    }

    pub fn dt(&self) -> f64 {
        self.t - self.t0
    }

    /// One integration step with bias-compensated mean rate and specific force.
    fn integrate(&mut self, gyro: &Vec3, accel: &Vec3, dt: f64) {
        let phi = gyro * dt;
        let step = Rotation::exp(&phi);
        let half = Rotation::exp(&(0.5 * phi));
        let r_half = self.delta_r * half;
        let rm = *r_half.matrix();
        let acc_skew = hat(accel);

        // Sensitivity of the mid-step attitude to the gyro bias.
        let j_half = half.transpose().matrix() * self.j_r_bg - right_jacobian(&(0.5 * phi)) * (0.5 * dt);
        let rot_acc_bg = -(rm * acc_skew * j_half);

        let dv = rm * accel * dt;
        self.delta_p += self.delta_v * dt + 0.5 * dt * dv;
        self.j_p_ba += self.j_v_ba * dt - 0.5 * dt * dt * rm;
        self.j_p_bg += self.j_v_bg * dt + 0.5 * dt * dt * rot_acc_bg;
        self.delta_v += dv;
        self.j_v_ba -= rm * dt;
        self.j_v_bg += rot_acc_bg * dt;
        self.j_r_bg = step.transpose().matrix() * self.j_r_bg - right_jacobian(&phi) * dt;
        self.delta_r = self.delta_r * step;
        self.t += dt;
    }

    /// Chain `self` over `[t0, tm]` with `next` over `[tm, t1]`.
    pub fn compose(&self, next: &PreintegratedFactor) -> PreintegratedFactor {
        let ra = *self.delta_r.matrix();
        let dtb = next.dt();
        PreintegratedFactor {
            t0: self.t0,
            t: next.t,
            delta_r: self.delta_r * next.delta_r,
            delta_v: self.delta_v + ra * next.delta_v,
            delta_p: self.delta_p + self.delta_v * dtb + ra * next.delta_p,
            j_r_bg: next.delta_r.transpose().matrix() * self.j_r_bg + next.j_r_bg,
            j_v_ba: self.j_v_ba + ra * next.j_v_ba,
            j_v_bg: self.j_v_bg - ra * hat(&next.delta_v) * self.j_r_bg + ra * next.j_v_bg,
            j_p_ba: self.j_p_ba + self.j_v_ba * dtb + ra * next.j_p_ba,
            j_p_bg: self.j_p_bg + self.j_v_bg * dtb - ra * hat(&next.delta_p) * self.j_r_bg
                + ra * next.j_p_bg,
            linearization_bias: self.linearization_bias,
        }
    }

    /// Velocity at `t` in the start frame: `v0 + g·Δt + Δv`.
    pub fn velocity_at(&self, v0: &Vec3, gravity: &Vec3) -> Vec3 {
        v0 + gravity * self.dt() + self.delta_v
    }
}

/// First-order update of a factor to a new bias.
pub fn correct_bias(f: &PreintegratedFactor, new_bias: &BiasPair) -> PreintegratedFactor {
    let dba = new_bias.accel_bias - f.linearization_bias.accel_bias;
    let dbg = new_bias.gyro_bias - f.linearization_bias.gyro_bias;
    let mut out = *f;
    out.delta_r = f.delta_r * Rotation::exp(&(f.j_r_bg * dbg));
    out.delta_v = f.delta_v + f.j_v_ba * dba + f.j_v_bg * dbg;
    out.delta_p = f.delta_p + f.j_p_ba * dba + f.j_p_bg * dbg;
    out.linearization_bias = *new_bias;
    out
}

/// IMU pose at `f.t` in the IMU frame at `f.t0`, given the velocity and
/// gravity vector expressed in that frame.
pub fn pose_at(f: &PreintegratedFactor, v0: &Vec3, gravity: &Vec3) -> RigidTransform {
    let dt = f.dt();
    RigidTransform::new(f.delta_r, dt * v0 + 0.5 * dt * dt * gravity + f.delta_p)
}

/// Factors at `t0 + k / rate`, `k = 0..`, all relative to `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegrationGrid {
    pub t0: f64,
    pub rate: f64,
    pub factors: Vec<PreintegratedFactor>,
}

impl PreintegrationGrid {
    pub fn end_time(&self) -> f64 {
        self.factors.last().map_or(self.t0, |f| f.t)
    }

    pub fn linearization_bias(&self) -> BiasPair {
        self.factors[0].linearization_bias
    }

    /// Factor at an arbitrary time between grid nodes.
    pub fn query(&self, t: f64) -> Result<PreintegratedFactor, PreintegrationError> {
        query(self, t)
    }
}

/// Continuous piecewise-linear view of an IMU stream.
struct ImuSignal<'a> {
    samples: &'a [ImuSample],
}

impl ImuSignal<'_> {
    /// Exact mean of the linear interpolant over `[a, b]`, starting the search at `*cursor`.
    fn mean(&self, a: f64, b: f64, cursor: &mut usize) -> (Vec3, Vec3) {
        let s = self.samples;
        while *cursor + 2 < s.len() && s[*cursor + 1].t <= a {
            *cursor += 1;
        }
        let mut acc = Vec3::zeros();
        let mut gyr = Vec3::zeros();
        let mut i = *cursor;
        let mut lo = a;
        loop {
            let last_segment = i + 2 >= s.len();
            let hi = if last_segment { b } else { b.min(s[i + 1].t) };
            if hi > lo {
                let (a_lo, g_lo) = interp(&s[i], &s[i + 1], lo);
                let (a_hi, g_hi) = interp(&s[i], &s[i + 1], hi);
                let w = hi - lo;
                acc += 0.5 * w * (a_lo + a_hi);
                gyr += 0.5 * w * (g_lo + g_hi);
            }
            if hi >= b {
                break;
            }
            lo = hi;
            i += 1;
        }
        let span = b - a;
        (acc / span, gyr / span)
    }
}

fn interp(a: &ImuSample, b: &ImuSample, t: f64) -> (Vec3, Vec3) {
    let alpha = (t - a.t) / (b.t - a.t);
    (a.accel + alpha * (b.accel - a.accel), a.gyro + alpha * (b.gyro - a.gyro))
}

/// Checks the stream is finite and strictly increasing.
pub fn validate_imu(imu: &[ImuSample]) -> Result<(), PreintegrationError> {
    for (index, s) in imu.iter().enumerate() {
        let finite = s.t.is_finite()
            && s.accel.iter().all(|x| x.is_finite())
            && s.gyro.iter().all(|x| x.is_finite());
        if !finite {
            return Err(PreintegrationError::NonFinite { index });
        }
        if index > 0 && s.t <= imu[index - 1].t {
            return Err(PreintegrationError::NonMonotonic { index });
        }
    }
    Ok(())
}

/// Preintegrates `imu` over `[t0, t1]` on a grid of spacing `1 / rate`.
///
/// The last grid node is the first one at or after `t1`.
pub fn preintegrate(
    imu: &[ImuSample],
    t0: f64,
    t1: f64,
    rate: f64,
    lin_bias: &BiasPair,
) -> Result<PreintegrationGrid, PreintegrationError> {
    if !(rate > 0.0) || !t0.is_finite() || !t1.is_finite() || t1 < t0 {
        return Err(PreintegrationError::InvalidInterval);
    }
    validate_imu(imu)?;
    let need_start = t0 - COVERAGE_SLACK;
    let need_end = t1 + COVERAGE_SLACK;
    let (have_start, have_end) = match (imu.first(), imu.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => (f64::NAN, f64::NAN),
    };
    if imu.len() < 2 || have_start > need_start + TIME_EPS || have_end < need_end - TIME_EPS {
        return Err(PreintegrationError::InsufficientCoverage {
            need_start,
            need_end,
            have_start,
            have_end,
        });
    }
    let steps = ((t1 - t0) * rate - 1e-6).ceil().max(0.0) as usize;
    let dt = 1.0 / rate;
    let signal = ImuSignal { samples: imu };
    let mut cursor = imu.partition_point(|s| s.t <= t0).saturating_sub(1);
    let mut current = PreintegratedFactor::identity(t0, *lin_bias);
    let mut factors = Vec::with_capacity(steps + 1);
    factors.push(current);
    for k in 0..steps {
        let a = t0 + k as f64 * dt;
        let b = t0 + (k + 1) as f64 * dt;
        let (acc, gyr) = signal.mean(a, b, &mut cursor);
        current.integrate(&(gyr - lin_bias.gyro_bias), &(acc - lin_bias.accel_bias), b - a);
        current.t = b;
        factors.push(current);
    }
    Ok(PreintegrationGrid { t0, rate, factors })
}

/// Factor at time `t`: geodesic rotation interpolation between the
/// bracketing nodes, linear for every vector and Jacobian term.
pub fn query(grid: &PreintegrationGrid, t: f64) -> Result<PreintegratedFactor, PreintegrationError> {
    let end = grid.end_time();
    if !(t >= grid.t0 - TIME_EPS && t <= end + TIME_EPS) {
        return Err(PreintegrationError::OutOfRange { t, start: grid.t0, end });
    }
    let pos = ((t - grid.t0) * grid.rate).max(0.0);
    let k = (pos.floor() as usize).min(grid.factors.len() - 1);
    let a = &grid.factors[k];
    if (t - a.t).abs() <= 1e-12 || k + 1 == grid.factors.len() {
        let mut f = *a;
        f.t = t;
        return Ok(f);
    }
    let b = &grid.factors[k + 1];
    let alpha = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
    let lerp3 = |x: &Vec3, y: &Vec3| x + alpha * (y - x);
    let lerpm = |x: &Mat3, y: &Mat3| x + alpha * (y - x);
    Ok(PreintegratedFactor {
        t0: a.t0,
        t,
        delta_r: a.delta_r.interpolate(&b.delta_r, alpha),
        delta_v: lerp3(&a.delta_v, &b.delta_v),
        delta_p: lerp3(&a.delta_p, &b.delta_p),
        j_r_bg: lerpm(&a.j_r_bg, &b.j_r_bg),
        j_v_ba: lerpm(&a.j_v_ba, &b.j_v_ba),
        j_v_bg: lerpm(&a.j_v_bg, &b.j_v_bg),
        j_p_ba: lerpm(&a.j_p_ba, &b.j_p_ba),
        j_p_bg: lerpm(&a.j_p_bg, &b.j_p_bg),
        linearization_bias: a.linearization_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn constant_imu(accel: Vec3, gyro: Vec3, start: f64, end: f64, rate: f64) -> Vec<ImuSample> {
        let n = ((end - start) * rate).round() as usize;
        (0..=n)
            .map(|i| ImuSample { t: start + i as f64 / rate, accel, gyro })
            .collect()
    }

    fn factor_distance(a: &PreintegratedFactor, b: &PreintegratedFactor) -> f64 {
        a.delta_r.angle_to(&b.delta_r) + (a.delta_v - b.delta_v).norm() + (a.delta_p - b.delta_p).norm()
    }

    #[test]
    fn zero_signal_is_identity() {
        let imu = constant_imu(Vec3::zeros(), Vec3::zeros(), -0.05, 1.05, 200.0);
        let g = preintegrate(&imu, 0.0, 1.0, 1000.0, &BiasPair::zero()).unwrap();
        let f = g.factors.last().unwrap();
        assert_eq!(*f.delta_r.matrix(), Mat3::identity());
        assert_eq!(f.delta_v, Vec3::zeros());
        assert_eq!(f.delta_p, Vec3::zeros());
        assert_eq!(g.factors.len(), 1001);
    }

    #[test]
    fn constant_rate_rotation() {
        let imu = constant_imu(Vec3::zeros(), Vec3::new(0.0, 0.0, FRAC_PI_2), -0.05, 1.05, 200.0);
        let g = preintegrate(&imu, 0.0, 1.0, 1000.0, &BiasPair::zero()).unwrap();
        let expected = Rotation::exp(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        assert!(g.query(1.0).unwrap().delta_r.angle_to(&expected) < 1e-6);
        // midway between nodes
        let t = 0.4565;
        let expected = Rotation::exp(&Vec3::new(0.0, 0.0, FRAC_PI_2 * t));
        assert!(g.query(t).unwrap().delta_r.angle_to(&expected) < 1e-7);
    }

    #[test]
    fn constant_acceleration_double_integral() {
        let imu = constant_imu(Vec3::x(), Vec3::zeros(), -0.05, 1.05, 200.0);
        let g = preintegrate(&imu, 0.0, 1.0, 1000.0, &BiasPair::zero()).unwrap();
        let f = g.query(1.0).unwrap();
        assert_abs_diff_eq!(f.delta_v, Vec3::x(), epsilon = 1e-6);
        assert_abs_diff_eq!(f.delta_p, Vec3::new(0.5, 0.0, 0.0), epsilon = 1e-6);
    }

    #[test]
    fn query_nodes_and_start() {
        let imu = constant_imu(Vec3::new(0.3, 0.1, 9.8), Vec3::new(0.2, -0.1, 0.5), -0.05, 0.6, 400.0);
        let g = preintegrate(&imu, 0.0, 0.45, 1000.0, &BiasPair::zero()).unwrap();
        assert_eq!(g.query(g.factors[17].t).unwrap(), g.factors[17]);
        let f0 = g.query(0.0).unwrap();
        assert_eq!(f0, PreintegratedFactor::identity(0.0, BiasPair::zero()));
        assert!(matches!(g.query(0.5), Err(PreintegrationError::OutOfRange { .. })));
        assert!(matches!(g.query(-0.01), Err(PreintegrationError::OutOfRange { .. })));
    }

    #[test]
    fn coverage_and_monotonicity_errors() {
        let imu = constant_imu(Vec3::zeros(), Vec3::zeros(), 0.0, 1.0, 200.0);
        assert!(matches!(
            preintegrate(&imu, 0.0, 0.5, 1000.0, &BiasPair::zero()),
            Err(PreintegrationError::InsufficientCoverage { .. })
        ));
        let mut imu = constant_imu(Vec3::zeros(), Vec3::zeros(), -0.1, 1.0, 200.0);
        imu[10].t = imu[9].t;
        assert!(matches!(
            preintegrate(&imu, 0.0, 0.5, 1000.0, &BiasPair::zero()),
            Err(PreintegrationError::NonMonotonic { index: 10 })
        ));
    }

    #[test]
    fn zero_bias_change_is_noop() {
        let imu = constant_imu(Vec3::new(0.3, 0.1, 9.8), Vec3::new(0.2, -0.1, 0.5), -0.05, 0.6, 400.0);
        let g = preintegrate(&imu, 0.0, 0.45, 1000.0, &BiasPair::zero()).unwrap();
        let f = g.query(0.3).unwrap();
        assert_eq!(correct_bias(&f, &BiasPair::zero()), f);
    }

    #[test]
    fn accel_bias_shift_moves_position() {
        let imu = constant_imu(Vec3::x(), Vec3::zeros(), -0.05, 1.05, 200.0);
        let g = preintegrate(&imu, 0.0, 1.0, 1000.0, &BiasPair::zero()).unwrap();
        let eps = 1e-3;
        let nb = BiasPair::new(Vec3::new(eps, 0.0, 0.0), Vec3::zeros());
        let f = correct_bias(g.factors.last().unwrap(), &nb);
        let re = preintegrate(&imu, 0.0, 1.0, 1000.0, &nb).unwrap();
        assert!((f.delta_p.x - (0.5 - 0.5 * eps)).abs() < 1e-9);
        assert!(factor_distance(&f, re.factors.last().unwrap()) < 1e-10);
    }

    #[test]
    fn gyro_bias_correction_matches_repreintegration() {
        let imu = constant_imu(Vec3::new(0.5, 0.2, 9.8), Vec3::new(0.0, 0.0, FRAC_PI_2), -0.05, 1.05, 200.0);
        let g = preintegrate(&imu, 0.0, 1.0, 1000.0, &BiasPair::zero()).unwrap();
        let db = Vec3::new(1e-4, -2e-4, 3e-4);
        let nb = BiasPair::new(Vec3::zeros(), db);
        let f = correct_bias(g.factors.last().unwrap(), &nb);
        let re = preintegrate(&imu, 0.0, 1.0, 1000.0, &nb).unwrap();
        let r = re.factors.last().unwrap();
        assert!(f.delta_r.angle_to(&r.delta_r) < 1e-8 + db.norm_squared());
    }

    #[test]
    fn composition_is_consistent() {
        let mut imu = Vec::new();
        for i in 0..400 {
            let t = -0.05 + i as f64 / 400.0;
            imu.push(ImuSample {
                t,
                accel: Vec3::new((3.0 * t).sin(), 0.2 * t, 9.8 + 0.3 * (5.0 * t).cos()),
                gyro: Vec3::new(0.4 * (2.0 * t).cos(), -0.3, 0.8 * t),
            });
        }
        let bias = BiasPair::new(Vec3::new(0.01, -0.02, 0.03), Vec3::new(0.001, 0.002, -0.001));
        let whole = preintegrate(&imu, 0.0, 0.5, 1000.0, &bias).unwrap();
        let first = preintegrate(&imu, 0.0, 0.2, 1000.0, &bias).unwrap();
        let second = preintegrate(&imu, 0.2, 0.5, 1000.0, &bias).unwrap();
        let composed = first.factors.last().unwrap().compose(second.factors.last().unwrap());
        let direct = whole.factors.last().unwrap();
        assert!(factor_distance(&composed, direct) < 1e-8);
        assert!((composed.j_p_bg - direct.j_p_bg).abs().max() < 1e-8);
        assert!((composed.j_v_bg - direct.j_v_bg).abs().max() < 1e-8);
        assert!((composed.j_r_bg - direct.j_r_bg).abs().max() < 1e-8);
    }

    #[test]
    fn pose_at_examples() {
        let f = PreintegratedFactor { t: 1.0, ..PreintegratedFactor::identity(0.0, BiasPair::zero()) };
        let pose = pose_at(&f, &Vec3::x(), &Vec3::new(0.0, 0.0, -9.81));
        assert_abs_diff_eq!(pose.translation, Vec3::new(1.0, 0.0, -4.905), epsilon = 1e-12);
        assert_eq!(*pose.rotation.matrix(), Mat3::identity());
        let f0 = PreintegratedFactor::identity(0.0, BiasPair::zero());
        assert_eq!(pose_at(&f0, &Vec3::x(), &Vec3::z()), RigidTransform::identity());
    }

    #[test]
    fn stationary_raw_signal_drifts_quadratically() {
        // Accelerometer reads +g up while gravity is not compensated: p = ½·a·t².
        let imu = constant_imu(Vec3::new(0.0, 0.0, 9.80665), Vec3::zeros(), -0.05, 1.05, 200.0);
        let g = preintegrate(&imu, 0.0, 1.0, 1000.0, &BiasPair::zero()).unwrap();
        let pose = pose_at(&g.query(0.8).unwrap(), &Vec3::zeros(), &Vec3::zeros());
        assert_abs_diff_eq!(pose.translation, Vec3::new(0.0, 0.0, 0.5 * 9.80665 * 0.64), epsilon = 1e-9);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut imu = Vec::new();
        for i in 0..300 {
            let t = -0.05 + i as f64 / 500.0;
            imu.push(ImuSample {
                t,
                accel: Vec3::new(1.0 + (4.0 * t).sin(), -0.5, 9.0),
                gyro: Vec3::new(0.6, -0.9 * (3.0 * t).cos(), 0.7),
            });
        }
        let base = BiasPair::zero();
        let g = preintegrate(&imu, 0.0, 0.45, 1000.0, &base).unwrap();
        let f = g.factors.last().unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut d = Vec3::zeros();
            d[k] = h;
            let plus = preintegrate(&imu, 0.0, 0.45, 1000.0, &BiasPair::new(Vec3::zeros(), d)).unwrap();
            let minus = preintegrate(&imu, 0.0, 0.45, 1000.0, &BiasPair::new(Vec3::zeros(), -d)).unwrap();
            let (p, m) = (plus.factors.last().unwrap(), minus.factors.last().unwrap());
            let dr = (m.delta_r.transpose() * p.delta_r).log() / (2.0 * h);
            assert_abs_diff_eq!(dr, f.j_r_bg.column(k).into_owned(), epsilon = 1e-7);
            assert_abs_diff_eq!((p.delta_v - m.delta_v) / (2.0 * h), f.j_v_bg.column(k).into_owned(), epsilon = 1e-6);
            assert_abs_diff_eq!((p.delta_p - m.delta_p) / (2.0 * h), f.j_p_bg.column(k).into_owned(), epsilon = 1e-6);
        }
    }
}
