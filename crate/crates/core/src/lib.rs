//! Spatial-uncertainty estimation: an algebra of uncertain rigid-body
//! relationships with analytic Jacobians, first/second-order moment
//! propagation, and incremental Kalman-filter map building.

pub mod error;
pub mod map;
pub mod propagate;
pub mod rng;
pub mod scenario;
pub mod sensors;
pub mod transforms2d;
pub mod transforms3d;

pub use error::{Error, Result};
pub use map::{mahalanobis_gate, EntityId, EntityKind, MapMode, MapState, StochasticMap, UpdateDiagnostics};
pub use propagate::{Ellipse, Gaussian};
pub use sensors::SensorModel;
pub use transforms2d::{compose2, inverse2, jac_compose2, jac_inverse2, normalize_angle, tail_to_tail2, Pose2};
pub use transforms3d::{compose3, inverse3, jac_compose3, jac_inverse3, rot_of_pose, singularity_margin, tail_to_tail3, AngleConvention, Pose3, Rot3};
