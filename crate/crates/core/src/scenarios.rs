//! Reference scenes, trajectories and sensors for tests, benches and examples.

use crate::geom::{TransformSpec, Vec3};
use crate::preintegration::BiasPair;
use crate::simulator::{BodySpec, ImuSpec, LidarSpec, Scene, Shape, Signal, Sinusoid, TrajectorySpec};

fn wave(offset: f64, rate: f64, accel: f64, waves: &[(f64, f64, f64)]) -> Signal {
    Signal {
        offset,
        rate,
        accel,
        sinusoids: waves.iter().map(|&(amplitude, frequency, phase)| Sinusoid { amplitude, frequency, phase }).collect(),
    }
}

fn static_box(min: Vec3, max: Vec3) -> BodySpec {
    BodySpec { shape: Shape::Box { min, max }, velocity: Vec3::zeros() }
}

/// 13 × 9 × 4 m room with three pillars.
pub fn room() -> Scene {
    let mut bodies = vec![static_box(Vec3::new(-6.0, -5.0, -1.5), Vec3::new(7.0, 4.0, 2.5))];
    for (c, h) in [(Vec3::new(2.5, 1.5, 0.0), 0.4), (Vec3::new(-3.0, -2.0, 0.0), 0.5), (Vec3::new(-2.0, 2.5, 0.0), 0.3)] {
        bodies.push(static_box(c - Vec3::new(h, h, 1.5), c + Vec3::new(h, h, 0.5)));
    }
    Scene { bodies }
}

/// The room plus a person-sized box starting at `start` and moving at `velocity`.
pub fn room_with_walker(start: Vec3, velocity: Vec3) -> Scene {
    let mut scene = room();
    let half = Vec3::new(0.3, 0.3, 0.0);
    scene.bodies.push(BodySpec {
        shape: Shape::Box { min: start - half + Vec3::new(0.0, 0.0, -1.5), max: start + half + Vec3::new(0.0, 0.0, 0.3) },
        velocity,
    });
    scene
}

/// Hand-held walk: ≈1 m/s forward with sway, ±`tilt` rad roll/pitch oscillation, 0.8 rad/s yaw.
pub fn handheld(duration: f64, tilt: f64) -> TrajectorySpec {
    TrajectorySpec {
        duration,
        position: [
            wave(0.0, 0.8, 0.0, &[(0.1, 0.5, 0.3)]),
            wave(0.0, 0.5, 0.0, &[(0.05, 0.8, 1.0)]),
            wave(0.0, 0.0, 0.0, &[(0.05, 1.0, 0.0)]),
        ],
        orientation: [
            wave(0.05, 0.0, 0.0, &[(tilt, 0.7, 0.0)]),
            wave(-0.03, 0.0, 0.0, &[(tilt, 0.6, 1.0)]),
            wave(0.0, 0.8, 0.0, &[]),
        ],
    }
}

/// Translation at 1 m/s with yaw rate ramping from `rate0` by `ramp` rad/s².
pub fn rotation_ramp(duration: f64, rate0: f64, ramp: f64) -> TrajectorySpec {
    TrajectorySpec {
        duration,
        position: [
            wave(-2.0, 0.8, 0.0, &[(0.05, 0.5, 0.0)]),
            wave(-1.0, 0.6, 0.0, &[]),
            wave(0.0, 0.0, 0.0, &[(0.03, 0.8, 0.5)]),
        ],
        orientation: [
            wave(0.02, 0.0, 0.0, &[(0.05, 0.9, 0.0)]),
            wave(0.0, 0.0, 0.0, &[(0.05, 0.7, 1.2)]),
            wave(0.0, rate0, ramp, &[]),
        ],
    }
}

/// 32-channel spinning lidar mounted slightly offset from the IMU.
pub fn lidar32(range_noise: f64) -> LidarSpec {
    LidarSpec {
        channels: 32,
        fov_min: -30f64.to_radians(),
        fov_max: 30f64.to_radians(),
        points_per_revolution: 1024,
        range_noise,
        extrinsic: TransformSpec { rotation: [0.0, 0.0, 0.1], translation: [0.05, 0.0, 0.1] },
        ..LidarSpec::default()
    }
}

/// 200 Hz IMU with accel bias 0.05 m/s² and gyro bias 0.01 rad/s per axis.
pub fn biased_imu() -> ImuSpec {
    ImuSpec { bias: BiasPair::new(Vec3::new(0.05, -0.05, 0.05), Vec3::new(0.01, -0.01, 0.01)), ..ImuSpec::default() }
}
