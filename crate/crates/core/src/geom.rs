//! Small fixed-size geometry: SO(3) exp/log, rigid transforms and a cyclic
//! Jacobi eigensolver for symmetric matrices up to 4×4.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec4 = Vector4<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Below this angle the exponential and Jacobians switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;
/// Orthonormality and determinant tolerance for [`Rotation::from_matrix`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Relative symmetry tolerance for [`SymMat4::new`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("matrix is not a rotation (orthonormality deviation {deviation:.3e}, det {det:.12})")]
    NotRotation { deviation: f64, det: f64 },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("non-finite input")]
    NonFinite,
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
#[rustfmt::skip]
pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(
         0.0, -w.z,  w.y,
         w.z,  0.0, -w.x,
        -w.y,  w.x,  0.0,
    )
}

/// Inverse of [`hat`]. Does not check skew-symmetry.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Right Jacobian of SO(3): `Exp(phi + d) ≈ Exp(phi) Exp(Jr(phi) d)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    if theta < 1e-5 {
        return Mat3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    Mat3::identity() - ((1.0 - theta.cos()) / theta2) * k
        + ((theta - theta.sin()) / (theta2 * theta)) * k * k
}

/// Left Jacobian of SO(3): `Exp(phi + d) ≈ Exp(Jl(phi) d) Exp(phi)`.
pub fn left_jacobian(phi: &Vec3) -> Mat3 {
    right_jacobian(&-phi)
}

/// A proper rotation stored as a 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates orthonormality and det = +1 within [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: Mat3) -> Result<Self, GeomError> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let deviation = (m.transpose() * m - Mat3::identity()).abs().max();
        let det = m.determinant();
        if deviation > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeomError::NotRotation { deviation, det });
        }
        Ok(Rotation(m))
    }

    /// Rodrigues' formula.
    pub fn exp(omega: &Vec3) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(omega);
        let m = if theta < SMALL_ANGLE {
            Mat3::identity() + k + 0.5 * k * k
        } else {
            Mat3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * k * k
        };
        Rotation(m)
    }

    /// Axis-angle vector with norm in `[0, π]`.
    pub fn log(&self) -> Vec3 {
        let r = &self.0;
        let skew = vee(&(r - r.transpose()));
        let sin_theta = 0.5 * skew.norm();
        let cos_theta = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
        let theta = sin_theta.atan2(cos_theta);
        if theta < SMALL_ANGLE {
            return 0.5 * skew;
        }
        if std::f64::consts::PI - theta > 1e-6 {
            return (theta / (2.0 * sin_theta)) * skew;
        }
        // Near π the skew part vanishes; recover the axis from the symmetric part.
        let sym = 0.5 * (r + r.transpose());
        let aat = (sym - cos_theta * Mat3::identity()) / (1.0 - cos_theta);
        let (mut best, mut best_val) = (0, aat[(0, 0)]);
        for i in 1..3 {
            if aat[(i, i)] > best_val {
                best = i;
                best_val = aat[(i, i)];
            }
        }
        let mut axis = aat.column(best).into_owned() / best_val.max(f64::MIN_POSITIVE).sqrt();
        axis.normalize_mut();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        theta * axis
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic interpolation: `alpha = 0` gives `self`, `alpha = 1` gives `other`.
    pub fn interpolate(&self, other: &Rotation, alpha: f64) -> Rotation {
        let delta = (self.transpose() * *other).log();
        *self * Rotation::exp(&(alpha * delta))
    }

    /// Angle of `self⁻¹ · other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).log().norm()
    }

    /// Projects back onto SO(3) (removes accumulated round-off).
    pub fn renormalized(&self) -> Rotation {
        let svd = self.0.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut m = u * vt;
        if m.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            m = u2 * vt;
        }
        Rotation(m)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Rigid body transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_axis_angle(rotation: &Vec3, translation: Vec3) -> Self {
        Self::new(Rotation::exp(rotation), translation)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.transpose();
        Self::new(r, -(r.rotate(&self.translation)))
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * rhs.rotation,
            self.rotation.rotate(&rhs.translation) + self.translation,
        )
    }
}

/// Free function form of [`RigidTransform::transform_point`].
pub fn transform_point(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.transform_point(p)
}

/// Serializable axis-angle + translation form of a [`RigidTransform`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    /// Axis-angle vector (rad).
    #[serde(default)]
    pub rotation: [f64; 3],
    /// Metres.
    #[serde(default)]
    pub translation: [f64; 3],
}

impl TransformSpec {
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::from_axis_angle(&Vec3::from(self.rotation), Vec3::from(self.translation))
    }

    pub fn from_transform(t: &RigidTransform) -> Self {
        let r = t.rotation.log();
        Self {
            rotation: [r.x, r.y, r.z],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

/// Symmetric 4×4 matrix (spacetime covariance).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymMat4(Mat4);

impl SymMat4 {
    pub fn new(m: Mat4) -> Result<Self, GeomError> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let scale = m.abs().max();
        let asym = (m - m.transpose()).abs().max();
        let asymmetry = if scale > 0.0 { asym / scale } else { 0.0 };
        if asymmetry > SYMMETRY_TOLERANCE {
            return Err(GeomError::NotSymmetric { asymmetry });
        }
        Ok(SymMat4(0.5 * (m + m.transpose())))
    }

    pub fn zeros() -> Self {
        SymMat4(Mat4::zeros())
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn eig(&self) -> SymEigen4 {
        let (values, vectors) = jacobi_eigen(&self.0);
        SymEigen4 {
            values: [values[0], values[1], values[2], values[3]],
            vectors: [
                vectors.column(0).into_owned(),
                vectors.column(1).into_owned(),
                vectors.column(2).into_owned(),
                vectors.column(3).into_owned(),
            ],
        }
    }
}

/// Eigenpairs sorted ascending by eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEigen4 {
    pub values: [f64; 4],
    pub vectors: [Vec4; 4],
}

pub fn eig_sym(m: &SymMat4) -> SymEigen4 {
    m.eig()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are returned ascending with eigenvectors as matching columns.
/// Each eigenvector is unit norm with its largest-magnitude component positive.
pub fn jacobi_eigen<const N: usize>(
    m: &SMatrix<f64, N, N>,
) -> (SVector<f64, N>, SMatrix<f64, N, N>) {
    let mut a = *m;
    let mut v = SMatrix::<f64, N, N>::identity();
    let scale = a.norm();
    let off = |a: &SMatrix<f64, N, N>| -> f64 {
        let mut s = 0.0;
        for i in 0..N {
            for j in 0..N {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    if scale > 0.0 {
        for _sweep in 0..64 {
            if off(&a) < 1e-13 * scale {
                break;
            }
            for p in 0..N {
                for q in (p + 1)..N {
                    let apq = a[(p, q)];
                    if apq.abs() < f64::MIN_POSITIVE {
                        continue;
                    }
                    let app = a[(p, p)];
                    let aqq = a[(q, q)];
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let t = if tau == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..N {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..N {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..N {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..N).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let mut values = SVector::<f64, N>::zeros();
    let mut vectors = SMatrix::<f64, N, N>::zeros();
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = a[(src, src)];
        let mut col = v.column(src).into_owned();
        col.normalize_mut();
        let mut imax = 0;
        for k in 1..N {
            if col[k].abs() > col[imax].abs() {
                imax = k;
            }
        }
        if col[imax] < 0.0 {
            col = -col;
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Least-squares plane through `points`: returns (centroid, unit normal, eigenvalues ascending).
pub fn fit_plane(points: &[Vec3]) -> Option<(Vec3, Vec3, [f64; 3])> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let (values, vectors) = jacobi_eigen(&cov);
    Some((centroid, vectors.column(0).into_owned(), [values[0], values[1], values[2]]))
}
