//! Window state estimation: Levenberg–Marquardt over point-to-line and
//! point-to-plane distances between features projected with the
//! preintegrated trajectory.
//!
//! The state has eleven scalars: accelerometer bias, gyroscope bias, IMU
//! velocity at the window start, and two angles locating the gravity
//! direction on the unit sphere around an anchor direction. Gravity keeps
//! a fixed magnitude of [`GRAVITY`].

use nalgebra::{Cholesky, Matrix3x2, SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{associate_window, AssociationParams, ProjectedFeature, Targets, Window};
use crate::features::{FeatureKind, FeaturePoint};
use crate::geom::{hat, left_jacobian, right_jacobian, Mat3, RigidTransform, Rotation, Vec3};
use crate::preintegration::{
    correct_bias, pose_at, preintegrate, BiasPair, ImuSample, PreintegratedFactor, PreintegrationError,
    PreintegrationGrid,
};

/// Standard gravity (m/s²).
pub const GRAVITY: f64 = 9.80665;
/// Number of estimated scalars.
pub const STATE_DIM: usize = 11;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateJacobian = SMatrix<f64, 1, STATE_DIM>;
type PointJacobian = SMatrix<f64, 3, STATE_DIM>;
type Hessian = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Gravity direction as two angles in the tangent plane of a unit anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityDirection {
    anchor: Vec3,
    angles: [f64; 2],
}

impl GravityDirection {
    /// Direction of `v`; falls back to `-z` for a zero vector.
    pub fn from_vector(v: &Vec3) -> Self {
        let n = v.norm();
        let anchor = if n > 0.0 && n.is_finite() { v / n } else { -Vec3::z() };
        Self { anchor, angles: [0.0, 0.0] }
    }

    pub fn angles(&self) -> [f64; 2] {
        self.angles
    }

    pub fn anchor(&self) -> Vec3 {
        self.anchor
    }

    pub fn with_angles(&self, angles: [f64; 2]) -> Self {
        Self { anchor: self.anchor, angles }
    }

    /// Tangent basis of the anchor.
    fn basis(&self) -> (Vec3, Vec3) {
        let a = self.anchor;
        let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let b1 = a.cross(&helper).normalize();
        let b2 = a.cross(&b1);
        (b1, b2)
    }

    fn tangent(&self) -> Vec3 {
        let (b1, b2) = self.basis();
        self.angles[0] * b1 + self.angles[1] * b2
    }

    pub fn unit(&self) -> Vec3 {
        Rotation::exp(&self.tangent()).rotate(&self.anchor)
    }

    /// Gravity vector, norm [`GRAVITY`].
    pub fn vector(&self) -> Vec3 {
        GRAVITY * self.unit()
    }

    /// `∂ vector / ∂ angles`.
    pub fn jacobian(&self) -> Matrix3x2<f64> {
        let (b1, b2) = self.basis();
        let phi = self.tangent();
        let g = self.vector();
        let m = -hat(&g) * left_jacobian(&phi);
        Matrix3x2::from_columns(&[m * b1, m * b2])
    }

    /// Same direction with the anchor moved onto it and zero angles.
    pub fn rebased(&self) -> Self {
        Self::from_vector(&self.unit())
    }

    pub fn rotated(&self, r: &Rotation) -> Self {
        Self::from_vector(&r.rotate(&self.unit()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowState {
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
    /// IMU velocity at `t_f0` in the IMU frame at `t_f0`.
    pub velocity: Vec3,
    pub gravity: GravityDirection,
}

impl WindowState {
    pub fn from_gravity(gravity: Vec3) -> Self {
        Self {
            accel_bias: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            velocity: Vec3::zeros(),
            gravity: GravityDirection::from_vector(&gravity),
        }
    }

    /// Zero biases and velocity; gravity opposite to the mean specific force
    /// over `[t0, t1]`.
    pub fn cold(imu: &[ImuSample], t0: f64, t1: f64) -> Self {
        let sum = imu
            .iter()
            .filter(|s| s.t >= t0 && s.t <= t1)
            .fold(Vec3::zeros(), |acc, s| acc + s.accel);
        Self::from_gravity(-sum)
    }

    pub fn biases(&self) -> BiasPair {
        BiasPair::new(self.accel_bias, self.gyro_bias)
    }

    pub fn gravity_vector(&self) -> Vec3 {
        self.gravity.vector()
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.accel_bias);
        x.fixed_rows_mut::<3>(3).copy_from(&self.gyro_bias);
        x.fixed_rows_mut::<3>(6).copy_from(&self.velocity);
        x[9] = self.gravity.angles[0];
        x[10] = self.gravity.angles[1];
        x
    }

    /// State with the same gravity anchor and scalars from `x`.
    pub fn with_vector(&self, x: &StateVector) -> Self {
        Self {
            accel_bias: x.fixed_rows::<3>(0).into_owned(),
            gyro_bias: x.fixed_rows::<3>(3).into_owned(),
            velocity: x.fixed_rows::<3>(6).into_owned(),
            gravity: self.gravity.with_angles([x[9], x[10]]),
        }
    }

    pub fn rebased(&self) -> Self {
        Self { gravity: self.gravity.rebased(), ..*self }
    }
}

/// Projects a lidar point (lidar frame) into the IMU frame at the window start.
pub fn project_point(
    factor: &PreintegratedFactor,
    state: &WindowState,
    extrinsic: &RigidTransform,
    p_lidar: &Vec3,
) -> Vec3 {
    let f = correct_bias(factor, &state.biases());
    pose_at(&f, &state.velocity, &state.gravity_vector()).transform_point(&extrinsic.transform_point(p_lidar))
}

/// Projected point and its 3×11 Jacobian with respect to the state.
fn project_with_jacobian(
    factor: &PreintegratedFactor,
    state: &WindowState,
    q_imu: &Vec3,
) -> (Vec3, PointJacobian) {
    let f = correct_bias(factor, &state.biases());
    let g = state.gravity_vector();
    let x = pose_at(&f, &state.velocity, &g).transform_point(q_imu);
    let dt = factor.dt();
    let dbg = state.gyro_bias - factor.linearization_bias.gyro_bias;
    let phi = factor.j_r_bg * dbg;
    let rc = *f.delta_r.matrix();
    let mut j = PointJacobian::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&factor.j_p_ba);
    let d_bg: Mat3 = -rc * hat(q_imu) * right_jacobian(&phi) * factor.j_r_bg + factor.j_p_bg;
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&d_bg);
    j.fixed_view_mut::<3, 3>(0, 6).copy_from(&(Mat3::identity() * dt));
    j.fixed_view_mut::<3, 2>(0, 9).copy_from(&(0.5 * dt * dt * state.gravity.jacobian()));
    (x, j)
}

/// Point-to-line distance `‖(s−a)×(s−b)‖ / ‖a−b‖`.
pub fn point_to_line(s: &Vec3, a: &Vec3, b: &Vec3) -> Option<f64> {
    point_to_line_with_gradient(s, a, b).map(|(d, _)| d)
}

/// Distance and its gradients with respect to `s`, `a`, `b`.
pub fn point_to_line_with_gradient(s: &Vec3, a: &Vec3, b: &Vec3) -> Option<(f64, [Vec3; 3])> {
    let e = a - b;
    let base = e.norm();
    if base < crate::features::DEGENERATE_BASE {
        return None;
    }
    let (sa, sb) = (s - a, s - b);
    let c = sa.cross(&sb);
    let cn = c.norm();
    let d = cn / base;
    let e_hat = e / base;
    let (mut gs, mut ga, mut gb) = (Vec3::zeros(), Vec3::zeros(), Vec3::zeros());
    if cn > 0.0 {
        let u = c / cn;
        gs = (sb.cross(&u) + u.cross(&sa)) / base;
        ga = -sb.cross(&u) / base;
        gb = -u.cross(&sa) / base;
    }
    ga -= d * e_hat / base;
    gb += d * e_hat / base;
    Some((d, [gs, ga, gb]))
}

/// Signed point-to-plane distance, normal `(a−b)×(a−c)`.
pub fn point_to_plane(s: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    point_to_plane_with_gradient(s, a, b, c).map(|(d, _)| d)
}

pub fn point_to_plane_with_gradient(s: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<(f64, [Vec3; 4])> {
    let (ab, ac) = (a - b, a - c);
    let n = ab.cross(&ac);
    let nn = n.norm();
    if nn <= crate::association::COLLINEAR_TOLERANCE {
        return None;
    }
    let n_hat = n / nn;
    let sa = s - a;
    let d = sa.dot(&n_hat);
    let w = (sa - d * n_hat) / nn;
    let gs = n_hat;
    let ga = -n_hat + ac.cross(&w) + w.cross(&ab);
    let gb = -ac.cross(&w);
    let gc = -w.cross(&ab);
    Some((d, [gs, ga, gb, gc]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RobustLoss {
    #[default]
    None,
    Huber { delta: f64 },
}

impl RobustLoss {
    fn rho(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::None => r * r,
            RobustLoss::Huber { delta } => {
                if r.abs() <= delta {
                    r * r
                } else {
                    2.0 * delta * r.abs() - delta * delta
                }
            }
        }
    }

    fn weight(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::None => 1.0,
            RobustLoss::Huber { delta } => {
                if r.abs() <= delta {
                    1.0
                } else {
                    delta / r.abs()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub max_outer_iterations: usize,
    pub max_lm_iterations: usize,
    pub lm_lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Relative cost change below which LM stops.
    pub cost_tolerance: f64,
    /// Step norm below which LM stops.
    pub step_tolerance: f64,
    pub robust_loss: RobustLoss,
    /// Fewer residuals than this is under-constrained.
    pub min_residuals: usize,
    /// Drop associations whose residual exceeds this multiple of the robust
    /// residual scale `1.4826 · median |r|` before each LM run.
    pub outlier_mad_factor: Option<f64>,
    /// Lower bound of the rejection threshold (m).
    pub outlier_floor: f64,
    /// Steps are restricted to Hessian eigendirections whose standard
    /// deviation, measured in `state_scale` units, stays below this.
    pub degeneracy_sigma: Option<f64>,
    /// Pseudo-measurements pulling the biases towards their initial values,
    /// each as informative as one residual when the bias error is this many
    /// `state_scale` units.
    pub bias_prior_sigma: Option<f64>,
    pub state_scale: StateScale,
}

/// Nominal magnitudes used to compare uncertainty across state blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateScale {
    /// m/s².
    pub accel_bias: f64,
    /// rad/s.
    pub gyro_bias: f64,
    /// m/s.
    pub velocity: f64,
    /// rad.
    pub gravity: f64,
}

impl Default for StateScale {
    fn default() -> Self {
        Self { accel_bias: 0.1, gyro_bias: 0.01, velocity: 0.1, gravity: 0.01 }
    }
}

impl StateScale {
    fn diagonal(&self) -> StateVector {
        let mut d = StateVector::zeros();
        for i in 0..3 {
            d[i] = self.accel_bias;
            d[3 + i] = self.gyro_bias;
            d[6 + i] = self.velocity;
        }
        d[9] = self.gravity;
        d[10] = self.gravity;
        d
    }
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_outer_iterations: 8,
            max_lm_iterations: 25,
            lm_lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            cost_tolerance: 1e-8,
            step_tolerance: 1e-10,
            robust_loss: RobustLoss::Huber { delta: 0.01 },
            min_residuals: 30,
            outlier_mad_factor: Some(3.0),
            outlier_floor: 1e-3,
            degeneracy_sigma: Some(1.0),
            bias_prior_sigma: Some(1.0),
            state_scale: StateScale::default(),
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = self.max_outer_iterations > 0
            && self.max_lm_iterations > 0
            && self.lm_lambda_init > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 0.0
            && self.lambda_down < 1.0
            && self.cost_tolerance > 0.0
            && self.step_tolerance > 0.0;
        if !positive {
            return Err("solver parameters must be positive (lambda_up > 1 > lambda_down)".into());
        }
        if self.outlier_mad_factor.is_some_and(|k| !(k > 0.0)) || !(self.outlier_floor >= 0.0) {
            return Err("outlier rejection factor must be > 0 and floor >= 0".into());
        }
        let sc = self.state_scale;
        if self.degeneracy_sigma.is_some_and(|k| !(k > 0.0))
            || ![sc.accel_bias, sc.gyro_bias, sc.velocity, sc.gravity].iter().all(|x| *x > 0.0)
        {
            return Err("degeneracy threshold and state scales must be > 0".into());
        }
        if self.bias_prior_sigma.is_some_and(|k| !(k > 0.0)) {
            return Err("bias prior sigma must be > 0".into());
        }
        if let RobustLoss::Huber { delta } = self.robust_loss {
            if !(delta > 0.0) {
                return Err("huber delta must be > 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("only {residuals} residuals available (at least {required} needed)")]
    UnderConstrained { residuals: usize, required: usize },
    #[error(transparent)]
    Preintegration(#[from] PreintegrationError),
    #[error(transparent)]
    Association(#[from] crate::association::AssociationError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub association: usize,
    pub value: f64,
    pub jacobian: StateJacobian,
}

/// A feature with its uncorrected factor and extrinsic-applied position.
#[derive(Debug, Clone, Copy)]
pub struct FeatureFrame {
    pub factor: PreintegratedFactor,
    /// Point in the IMU frame at its own timestamp.
    pub q_imu: Vec3,
    pub segment: usize,
    pub kind: FeatureKind,
}

impl FeatureFrame {
    pub fn build(
        features: &[FeaturePoint],
        grid: &PreintegrationGrid,
        extrinsic: &RigidTransform,
        window: &Window,
    ) -> Result<Vec<FeatureFrame>, SolverError> {
        features
            .iter()
            .map(|f| {
                Ok(FeatureFrame {
                    factor: grid.query(f.point.t)?,
                    q_imu: extrinsic.transform_point(&f.point.position),
                    segment: window.segment_of(f.point.t)?,
                    kind: f.kind,
                })
            })
            .collect()
    }

    fn position(&self, state: &WindowState) -> Vec3 {
        let f = correct_bias(&self.factor, &state.biases());
        pose_at(&f, &state.velocity, &state.gravity_vector()).transform_point(&self.q_imu)
    }
}

/// Residual and 1×11 Jacobian of one association; `None` for degenerate geometry.
pub fn residual_and_jacobian(
    association: &crate::association::Association,
    frames: &[FeatureFrame],
    state: &WindowState,
) -> Option<(f64, StateJacobian)> {
    let (s, js) = project_with_jacobian(&frames[association.subject].factor, state, &frames[association.subject].q_imu);
    let proj = |i: usize| project_with_jacobian(&frames[i].factor, state, &frames[i].q_imu);
    let mut jac = StateJacobian::zeros();
    let value = match association.targets {
        Targets::Line([a, b]) => {
            let ((pa, ja), (pb, jb)) = (proj(a), proj(b));
            let (d, g) = point_to_line_with_gradient(&s, &pa, &pb)?;
            jac += g[0].transpose() * js + g[1].transpose() * ja + g[2].transpose() * jb;
            d
        }
        Targets::Plane([a, b, c]) => {
            let ((pa, ja), (pb, jb), (pc, jc)) = (proj(a), proj(b), proj(c));
            let (d, g) = point_to_plane_with_gradient(&s, &pa, &pb, &pc)?;
            jac += g[0].transpose() * js + g[1].transpose() * ja + g[2].transpose() * jb + g[3].transpose() * jc;
            d
        }
    };
    if !value.is_finite() || jac.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some((value, jac))
}

/// Residual value only.
pub fn residual_value(
    association: &crate::association::Association,
    frames: &[FeatureFrame],
    state: &WindowState,
) -> Option<f64> {
    let s = frames[association.subject].position(state);
    match association.targets {
        Targets::Line([a, b]) => point_to_line(&s, &frames[a].position(state), &frames[b].position(state)),
        Targets::Plane([a, b, c]) => point_to_plane(
            &s,
            &frames[a].position(state),
            &frames[b].position(state),
            &frames[c].position(state),
        ),
    }
}

/// Robust cost over a fixed association set; degenerate terms are skipped.
pub fn total_cost(
    associations: &[crate::association::Association],
    frames: &[FeatureFrame],
    state: &WindowState,
    loss: &RobustLoss,
) -> f64 {
    let terms: Vec<f64> = associations
        .par_iter()
        .map(|a| residual_value(a, frames, state).map_or(0.0, |r| loss.rho(r)))
        .collect();
    terms.iter().sum()
}

fn evaluate(
    associations: &[crate::association::Association],
    frames: &[FeatureFrame],
    state: &WindowState,
) -> Vec<Residual> {
    let evaluated: Vec<Option<Residual>> = associations
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            residual_and_jacobian(a, frames, state).map(|(value, jacobian)| Residual { association: i, value, jacobian })
        })
        .collect();
    evaluated.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Cost after every accepted step.
    pub cost_trace: Vec<f64>,
    /// Eigendirections excluded from the last step.
    pub frozen_directions: usize,
}

/// Projector onto the Hessian eigendirections that the data constrain, and
/// the number of excluded directions.
///
/// In coordinates scaled by `scale`, direction `i` has standard deviation
/// `σ / √λᵢ`, with `σ = 1.4826 · median |r|`. Directions above `max_sigma`
/// keep their current value.
fn observable_projector(
    h: &Hessian,
    residuals: &[Residual],
    scale: &StateScale,
    max_sigma: f64,
) -> (Hessian, usize) {
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.value.abs()).collect();
    if abs.is_empty() {
        return (Hessian::identity(), 0);
    }
    let mid = abs.len() / 2;
    let sigma = 1.4826 * *abs.select_nth_unstable_by(mid, f64::total_cmp).1;
    let d = Hessian::from_diagonal(&scale.diagonal());
    let d_inv = Hessian::from_diagonal(&scale.diagonal().map(|x| 1.0 / x));
    let scaled = d * h * d;
    let eig = nalgebra::SymmetricEigen::new(scaled);
    let mut p = Hessian::zeros();
    let mut frozen = 0;
    for i in 0..STATE_DIM {
        let lambda = eig.eigenvalues[i];
        if lambda > 0.0 && sigma * sigma <= max_sigma * max_sigma * lambda {
            let v = eig.eigenvectors.column(i);
            p += v * v.transpose();
        } else {
            frozen += 1;
        }
    }
    (d * p * d_inv, frozen)
}

/// Quadratic pull of the biases towards `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasPrior {
    pub center: BiasPair,
    /// Per-component weight on the accelerometer bias (1/(m/s²)²·m²).
    pub accel_weight: f64,
    /// Per-component weight on the gyroscope bias.
    pub gyro_weight: f64,
}

impl BiasPrior {
    /// Weights for a residual scale `sigma` (m).
    pub fn new(center: BiasPair, sigma: f64, k: f64, scale: &StateScale) -> Self {
        Self {
            center,
            accel_weight: (sigma / (k * scale.accel_bias)).powi(2),
            gyro_weight: (sigma / (k * scale.gyro_bias)).powi(2),
        }
    }

    fn diagonal(&self) -> StateVector {
        let mut w = StateVector::zeros();
        for i in 0..3 {
            w[i] = self.accel_weight;
            w[3 + i] = self.gyro_weight;
        }
        w
    }

    fn offset(&self, state: &WindowState) -> StateVector {
        let mut d = StateVector::zeros();
        let ba = state.accel_bias - self.center.accel_bias;
        let bg = state.gyro_bias - self.center.gyro_bias;
        for i in 0..3 {
            d[i] = ba[i];
            d[3 + i] = bg[i];
        }
        d
    }

    pub fn cost(&self, state: &WindowState) -> f64 {
        let d = self.offset(state);
        d.component_mul(&d).dot(&self.diagonal())
    }
}

/// Robust scale `1.4826 · median |r|` of the evaluable residuals.
pub fn residual_scale(
    associations: &[crate::association::Association],
    frames: &[FeatureFrame],
    state: &WindowState,
) -> Option<f64> {
    let mut abs: Vec<f64> =
        associations.par_iter().filter_map(|a| residual_value(a, frames, state)).map(f64::abs).collect();
    if abs.is_empty() {
        return None;
    }
    let mid = abs.len() / 2;
    Some(1.4826 * *abs.select_nth_unstable_by(mid, f64::total_cmp).1)
}

/// Levenberg–Marquardt with Marquardt diagonal scaling over fixed associations.
pub fn levenberg_marquardt(
    associations: &[crate::association::Association],
    frames: &[FeatureFrame],
    init: &WindowState,
    params: &SolverParams,
) -> (WindowState, LmReport) {
    levenberg_marquardt_with_prior(associations, frames, init, params, None)
}

pub fn levenberg_marquardt_with_prior(
    associations: &[crate::association::Association],
    frames: &[FeatureFrame],
    init: &WindowState,
    params: &SolverParams,
    prior: Option<&BiasPrior>,
) -> (WindowState, LmReport) {
    let loss = params.robust_loss;
    let objective = |s: &WindowState| total_cost(associations, frames, s, &loss) + prior.map_or(0.0, |p| p.cost(s));
    let mut state = init.rebased();
    let mut cost = objective(&state);
    let mut report = LmReport {
        iterations: 0,
        initial_cost: cost,
        final_cost: cost,
        converged: false,
        cost_trace: vec![cost],
        frozen_directions: 0,
    };
    let mut lambda = params.lm_lambda_init;
    for _ in 0..params.max_lm_iterations {
        report.iterations += 1;
        let residuals = evaluate(associations, frames, &state);
        let mut h = Hessian::zeros();
        let mut g = StateVector::zeros();
        for r in &residuals {
            let w = loss.weight(r.value);
            h += w * r.jacobian.transpose() * r.jacobian;
            g += w * r.jacobian.transpose() * r.value;
        }
        if let Some(p) = prior {
            let w = p.diagonal();
            h += Hessian::from_diagonal(&w);
            g += w.component_mul(&p.offset(&state));
        }
        let projector = params
            .degeneracy_sigma
            .map(|k| observable_projector(&h, &residuals, &params.state_scale, k));
        if let Some((_, frozen)) = projector {
            report.frozen_directions = frozen;
        }
        let x = state.to_vector();
        let mut accepted = None;
        for _attempt in 0..12 {
            let mut a = h;
            for i in 0..STATE_DIM {
                a[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = Cholesky::new(a) else {
                lambda *= params.lambda_up;
                continue;
            };
            let mut step = -chol.solve(&g);
            if let Some((p, _)) = &projector {
                step = p * step;
            }
            let candidate = state.with_vector(&(x + step));
            let new_cost = objective(&candidate);
            if new_cost.is_finite() && new_cost < cost {
                lambda = (lambda * params.lambda_down).max(1e-12);
                accepted = Some((candidate, new_cost, step.norm()));
                break;
            }
            lambda *= params.lambda_up;
        }
        let Some((candidate, new_cost, step_norm)) = accepted else {
            report.converged = true;
            break;
        };
        let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
        state = candidate;
        cost = new_cost;
        report.cost_trace.push(cost);
        if rel < params.cost_tolerance || step_norm < params.step_tolerance {
            report.converged = true;
            break;
        }
    }
    report.final_cost = cost;
    (state.rebased(), report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuterIterationReport {
    pub edge_associations: usize,
    pub planar_associations: usize,
    pub residuals: usize,
    pub lm: LmReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub outer: Vec<OuterIterationReport>,
    pub converged: bool,
    pub final_cost: f64,
    pub residual_count: usize,
    /// Mean absolute residual at the returned state (m).
    pub mean_abs_residual: f64,
}

/// Robust residual scale rejection; identity when disabled.
pub fn reject_outliers(
    associations: Vec<crate::association::Association>,
    frames: &[FeatureFrame],
    state: &WindowState,
    params: &SolverParams,
) -> Vec<crate::association::Association> {
    let Some(k) = params.outlier_mad_factor else {
        return associations;
    };
    let values: Vec<Option<f64>> = associations.par_iter().map(|a| residual_value(a, frames, state)).collect();
    let mut abs: Vec<f64> = values.iter().flatten().map(|v| v.abs()).collect();
    if abs.is_empty() {
        return associations;
    }
    let mid = abs.len() / 2;
    let median = *abs.select_nth_unstable_by(mid, f64::total_cmp).1;
    let threshold = (k * 1.4826 * median).max(params.outlier_floor);
    associations
        .into_iter()
        .zip(values)
        .filter(|(_, v)| v.is_some_and(|v| v.abs() <= threshold))
        .map(|(a, _)| a)
        .collect()
}

/// Everything fixed for one window.
pub struct WindowProblem<'a> {
    pub features: &'a [FeaturePoint],
    pub grid: &'a PreintegrationGrid,
    pub window: Window,
    pub extrinsic: RigidTransform,
}

impl WindowProblem<'_> {
    /// Projects every feature with `state`.
    pub fn project(&self, frames: &[FeatureFrame], state: &WindowState) -> Vec<ProjectedFeature> {
        self.features
            .iter()
            .zip(frames)
            .map(|(f, fr)| ProjectedFeature { source: *f, position_i0: fr.position(state), segment: fr.segment })
            .collect()
    }

    /// Alternates association with LM minimisation.
    pub fn solve(
        &self,
        init: &WindowState,
        params: &SolverParams,
        assoc: &AssociationParams,
    ) -> Result<(WindowState, SolveReport), SolverError> {
        let frames = FeatureFrame::build(self.features, self.grid, &self.extrinsic, &self.window)?;
        let mut state = init.rebased();
        let mut report = SolveReport {
            outer: Vec::new(),
            converged: false,
            final_cost: f64::NAN,
            residual_count: 0,
            mean_abs_residual: f64::NAN,
        };
        let mut previous: Option<Vec<crate::association::Association>> = None;
        let mut associations = Vec::new();
        for outer in 0..params.max_outer_iterations {
            let projected = self.project(&frames, &state);
            let current = reject_outliers(associate_window(&projected, self.window.segments, assoc), &frames, &state, params);
            if previous.as_ref() == Some(&current) {
                break;
            }
            let residuals = current
                .iter()
                .filter(|a| residual_value(a, &frames, &state).is_some())
                .count();
            if residuals < params.min_residuals {
                if outer == 0 {
                    return Err(SolverError::UnderConstrained { residuals, required: params.min_residuals });
                }
                break;
            }
            let prior = params.bias_prior_sigma.and_then(|k| {
                residual_scale(&current, &frames, &state).map(|sigma| BiasPrior::new(init.biases(), sigma, k, &params.state_scale))
            });
            let (next, lm) = levenberg_marquardt_with_prior(&current, &frames, &state, params, prior.as_ref());
            let edges = current.iter().filter(|a| a.kind() == FeatureKind::Edge).count();
            report.outer.push(OuterIterationReport {
                edge_associations: edges,
                planar_associations: current.len() - edges,
                residuals,
                lm,
            });
            state = next;
            associations = current.clone();
            previous = Some(current);
        }
        let last = report.outer.last().expect("at least one outer iteration");
        report.converged = last.lm.converged;
        report.final_cost = last.lm.final_cost;
        let values: Vec<f64> = associations.iter().filter_map(|a| residual_value(a, &frames, &state)).collect();
        report.residual_count = values.len();
        report.mean_abs_residual = values.iter().map(|v| v.abs()).sum::<f64>() / values.len().max(1) as f64;
        Ok((state, report))
    }
}

/// Preintegrates the IMU over the window and solves it.
#[allow(clippy::too_many_arguments)]
pub fn solve_window(
    features: &[FeaturePoint],
    imu: &[ImuSample],
    window: &Window,
    extrinsic: &RigidTransform,
    init: &WindowState,
    params: &SolverParams,
    assoc: &AssociationParams,
    preintegration_rate: f64,
) -> Result<(WindowState, SolveReport), SolverError> {
    let grid = preintegrate(imu, window.t_f0, window.t_f1, preintegration_rate, &init.biases())?;
    WindowProblem { features, grid: &grid, window: *window, extrinsic: *extrinsic }.solve(init, params, assoc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn point_to_line_examples() {
        assert_eq!(point_to_line(&Vec3::y(), &Vec3::zeros(), &Vec3::x()), Some(1.0));
        assert_eq!(point_to_line(&Vec3::new(0.5, 0.0, 0.0), &Vec3::zeros(), &Vec3::x()), Some(0.0));
        let d = point_to_line(&Vec3::new(1.0, 1.0, 1.0), &Vec3::zeros(), &Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(point_to_line(&Vec3::y(), &Vec3::x(), &Vec3::x()), None);
    }

    #[test]
    fn point_to_plane_examples() {
        let d = point_to_plane(&Vec3::z(), &Vec3::zeros(), &Vec3::x(), &Vec3::y()).unwrap();
        assert_eq!(d.abs(), 1.0);
        assert_eq!(point_to_plane(&Vec3::new(0.3, 0.2, 0.0), &Vec3::zeros(), &Vec3::x(), &Vec3::y()), Some(0.0));
        let d = point_to_plane(
            &Vec3::new(1.0, 1.0, 5.0),
            &Vec3::new(0.0, 0.0, 2.0),
            &Vec3::new(1.0, 0.0, 2.0),
            &Vec3::new(0.0, 1.0, 2.0),
        )
        .unwrap();
        assert!((d.abs() - 3.0).abs() < 1e-15);
        assert_eq!(point_to_plane(&Vec3::z(), &Vec3::zeros(), &Vec3::x(), &(2.0 * Vec3::x())), None);
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        let pts = [Vec3::new(0.3, 1.2, -0.4), Vec3::new(-0.2, 0.1, 0.3), Vec3::new(1.1, -0.3, 0.2), Vec3::new(0.4, 0.9, 1.3)];
        let h = 1e-6;
        let (_, gl) = point_to_line_with_gradient(&pts[0], &pts[1], &pts[2]).unwrap();
        let (_, gp) = point_to_plane_with_gradient(&pts[0], &pts[1], &pts[2], &pts[3]).unwrap();
        for which in 0..4 {
            for k in 0..3 {
                let mut plus = pts;
                let mut minus = pts;
                plus[which][k] += h;
                minus[which][k] -= h;
                let fd = (point_to_plane(&plus[0], &plus[1], &plus[2], &plus[3]).unwrap()
                    - point_to_plane(&minus[0], &minus[1], &minus[2], &minus[3]).unwrap())
                    / (2.0 * h);
                assert!((fd - gp[which][k]).abs() < 1e-8, "plane grad {which} {k}");
                if which < 3 {
                    let fd = (point_to_line(&plus[0], &plus[1], &plus[2]).unwrap()
                        - point_to_line(&minus[0], &minus[1], &minus[2]).unwrap())
                        / (2.0 * h);
                    assert!((fd - gl[which][k]).abs() < 1e-8, "line grad {which} {k}");
                }
            }
        }
    }

    #[test]
    fn gravity_parameterisation() {
        let g = GravityDirection::from_vector(&Vec3::new(0.1, -0.2, -9.7));
        let moved = g.with_angles([0.3, -0.2]);
        assert!((moved.vector().norm() - GRAVITY).abs() < 1e-12);
        let jac = moved.jacobian();
        let h = 1e-7;
        for k in 0..2 {
            let mut a = moved.angles();
            let mut b = moved.angles();
            a[k] += h;
            b[k] -= h;
            let fd = (g.with_angles(a).vector() - g.with_angles(b).vector()) / (2.0 * h);
            assert_abs_diff_eq!(fd, jac.column(k).into_owned(), epsilon = 1e-6);
        }
        let r = moved.rebased();
        assert_eq!(r.angles(), [0.0, 0.0]);
        assert_abs_diff_eq!(r.unit(), moved.unit(), epsilon = 1e-15);
    }

    #[test]
    fn state_vector_round_trip() {
        let mut s = WindowState::from_gravity(Vec3::new(0.0, 0.0, -1.0));
        s.accel_bias = Vec3::new(1.0, 2.0, 3.0);
        s.velocity = Vec3::new(-1.0, 0.5, 0.0);
        let x = s.to_vector();
        assert_eq!(s.with_vector(&x), s);
    }

    #[test]
    fn huber_weights() {
        let l = RobustLoss::Huber { delta: 0.1 };
        assert_eq!(l.weight(0.05), 1.0);
        assert!((l.weight(0.2) - 0.5).abs() < 1e-15);
        assert!((l.rho(0.2) - (0.04 - 0.01)).abs() < 1e-15);
    }
}
