//! Lidar-inertial motion distortion correction and learning-free dynamic
//! point detection.
//!
//! The trajectory of the sensor over a short window is parameterised by
//! preintegrated IMU measurements and eleven scalars (IMU biases, initial
//! velocity and gravity direction), estimated by Levenberg–Marquardt on
//! point-to-line and point-to-plane residuals between lidar features. The
//! corrected points are then scored by the temporal component of their
//! spacetime surface normal.

pub mod association;
pub mod dynamics;
pub mod evaluation;
pub mod features;
pub mod geom;
pub mod kdtree;
pub mod pipeline;
pub mod preintegration;
pub mod scenarios;
pub mod simulator;
pub mod solver;









pub use association::{Association, AssociationParams, ProjectedFeature, Window};
pub use dynamics::{DynamicsParams, Label, LabelledPoint, SpacetimePoint};
pub use features::{FeatureKind, FeatureParams, FeaturePoint, LidarPoint};
pub use geom::{RigidTransform, Rotation, SymMat4, Vec3};
pub use pipeline::{CorrectedCloud, CorrectedPoint, PipelineConfig, WindowOutcome};
pub use preintegration::{BiasPair, ImuSample, PreintegratedFactor, PreintegrationGrid};
pub use solver::{SolverParams, WindowState};
