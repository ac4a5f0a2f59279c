//! Sensor and pseudo-sensor models.
//!
//! A sensor is z = h(x) + v with mean-zero noise v of covariance C(v).
//! Geometric constraints are expressed the same way ("pseudo-sensors"):
//! the rectangle sensor below measures how much four planar points fail to
//! form a rectangle, and feeding it the measurement z = 0 imposes the
//! constraint. Formally h is a function of the whole state vector; models
//! here evaluate on the stacked sub-state of their touched entities and the
//! map scatters the Jacobian blocks into full rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::map::{EntityId, EntityKind, MapMode, StochasticMap};
use crate::propagate::{symmetrized, Gaussian};
use crate::transforms2d::{tail_to_tail2, Pose2};
use crate::transforms3d::{tail_to_tail3, Pose3};

/// Noise floor substituted for an exactly-zero noise covariance, keeping
/// the innovation covariance invertible while imposing hard constraints.
pub const DEFAULT_NOISE_FLOOR: f64 = 1e-10;

type MeasureFn = Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;
type JacobianFn = Box<dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync>;

/// A measurement function over an ordered set of entities, its Jacobian,
/// and the noise model. Immutable after construction; evaluation is pure.
pub struct SensorModel {
    touched: Vec<EntityId>,
    meas_dim: usize,
    noise_cov: DMatrix<f64>,
    angle_components: Vec<usize>,
    measure: MeasureFn,
    jacobian: JacobianFn,
}

impl std::fmt::Debug for SensorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SensorModel")
            .field("touched", &self.touched)
            .field("meas_dim", &self.meas_dim)
            .field("angle_components", &self.angle_components)
            .finish_non_exhaustive()
    }
}

impl SensorModel {
    /// Assemble a custom sensor. The noise covariance must be symmetric
    /// PSD of measurement dimension; an all-zero matrix is replaced by
    /// [`DEFAULT_NOISE_FLOOR`]·I.
    pub fn new(
        touched: Vec<EntityId>,
        meas_dim: usize,
        noise_cov: DMatrix<f64>,
        angle_components: Vec<usize>,
        measure: impl Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
        jacobian: impl Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Result<Self> {
        if noise_cov.nrows() != meas_dim || noise_cov.ncols() != meas_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{meas_dim}x{meas_dim} noise covariance"),
                got: format!("{}x{}", noise_cov.nrows(), noise_cov.ncols()),
            });
        }
        // Validates symmetry and positive semi-definiteness.
        Gaussian::new(DVector::zeros(meas_dim), noise_cov.clone())?;
        let noise_cov = if noise_cov.iter().all(|&v| v == 0.0) {
            DMatrix::identity(meas_dim, meas_dim) * DEFAULT_NOISE_FLOOR
        } else {
            noise_cov
        };
        if angle_components.iter().any(|&i| i >= meas_dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("angle components below {meas_dim}"),
                got: format!("{angle_components:?}"),
            });
        }
        Ok(SensorModel {
            touched,
            meas_dim,
            noise_cov,
            angle_components,
            measure: Box::new(measure),
            jacobian: Box::new(jacobian),
        })
    }

    pub fn touched(&self) -> &[EntityId] {
        &self.touched
    }

    pub fn meas_dim(&self) -> usize {
        self.meas_dim
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn angle_components(&self) -> &[usize] {
        &self.angle_components
    }

    /// Evaluate h on the stacked sub-state of the touched entities.
    pub fn measure(&self, substate: &DVector<f64>) -> Result<DVector<f64>> {
        (self.measure)(substate)
    }

    /// Evaluate the Jacobian blocks (meas_dim × Σ touched dims).
    pub fn jacobian(&self, substate: &DVector<f64>) -> Result<DMatrix<f64>> {
        (self.jacobian)(substate)
    }
}

/// Sensor measuring the relative location of pose `j` in pose `i`'s frame,
/// h = ⊖xᵢ ⊕ xⱼ, with Jacobian blocks [J₁⊕·J⊖ | J₂⊕].
pub fn relative_pose_sensor(
    map: &StochasticMap,
    i: EntityId,
    j: EntityId,
    noise_cov: DMatrix<f64>,
) -> Result<SensorModel> {
    if i == j {
        // A sensor relating an entity to itself carries no information.
        return Err(Error::DuplicateEntity(i.index()));
    }
    let pose_kind = map.mode().pose_kind();
    for id in [i, j] {
        let kind = map.kind(id)?;
        if kind != pose_kind {
            return Err(Error::KindMismatch {
                expected: format!("{pose_kind:?}"),
                got: format!("{kind:?}"),
            });
        }
    }
    match map.mode() {
        MapMode::Planar => SensorModel::new(
            vec![i, j],
            3,
            noise_cov,
            vec![2],
            |sub| {
                let a = Pose2::from_slice(&sub.as_slice()[0..3])?;
                let b = Pose2::from_slice(&sub.as_slice()[3..6])?;
                let (rel, _) = tail_to_tail2(a, b);
                Ok(DVector::from_vec(vec![rel.x(), rel.y(), rel.phi()]))
            },
            |sub| {
                let a = Pose2::from_slice(&sub.as_slice()[0..3])?;
                let b = Pose2::from_slice(&sub.as_slice()[3..6])?;
                let (_, jac) = tail_to_tail2(a, b);
                Ok(DMatrix::from_fn(3, 6, |r, c| jac[(r, c)]))
            },
        ),
        mode => {
            let convention = mode.convention().expect("3d mode");
            SensorModel::new(
                vec![i, j],
                6,
                noise_cov,
                vec![3, 4, 5],
                move |sub| {
                    let a = Pose3::from_slice(&sub.as_slice()[0..6], convention)?;
                    let b = Pose3::from_slice(&sub.as_slice()[6..12], convention)?;
                    let (rel, _) = tail_to_tail3(&a, &b)?;
                    Ok(DVector::from_column_slice(rel.to_vector().as_slice()))
                },
                move |sub| {
                    let a = Pose3::from_slice(&sub.as_slice()[0..6], convention)?;
                    let b = Pose3::from_slice(&sub.as_slice()[6..12], convention)?;
                    let (_, jac) = tail_to_tail3(&a, &b)?;
                    Ok(DMatrix::from_fn(6, 12, |r, c| jac[(r, c)]))
                },
            )
        }
    }
}

/// Sensor measuring a planar point in a pose's frame, h = Rᵀ·(p − t).
pub fn relative_point_sensor(
    map: &StochasticMap,
    pose: EntityId,
    point: EntityId,
    noise_cov: DMatrix<f64>,
) -> Result<SensorModel> {
    if pose == point {
        return Err(Error::DuplicateEntity(pose.index()));
    }
    if map.kind(pose)? != EntityKind::Pose2 || map.kind(point)? != EntityKind::Point2 {
        return Err(Error::KindMismatch {
            expected: "planar pose observing a planar point".into(),
            got: format!("{:?} -> {:?}", map.kind(pose)?, map.kind(point)?),
        });
    }
    SensorModel::new(
        vec![pose, point],
        2,
        noise_cov,
        vec![],
        |sub| {
            let (s, c) = sub[2].sin_cos();
            let dx = sub[3] - sub[0];
            let dy = sub[4] - sub[1];
            Ok(DVector::from_vec(vec![c * dx + s * dy, -s * dx + c * dy]))
        },
        |sub| {
            let (s, c) = sub[2].sin_cos();
            let dx = sub[3] - sub[0];
            let dy = sub[4] - sub[1];
            let rx = c * dx + s * dy;
            let ry = -s * dx + c * dy;
            Ok(DMatrix::from_row_slice(
                2,
                5,
                &[-c, -s, ry, c, s, s, -c, -rx, -s, c],
            ))
        },
    )
}

/// Sensor measuring one state component of an entity directly.
pub fn coordinate_sensor(
    map: &StochasticMap,
    id: EntityId,
    component: usize,
    noise_cov: DMatrix<f64>,
) -> Result<SensorModel> {
    let kind = map.kind(id)?;
    if component >= kind.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("component below {}", kind.dim()),
            got: format!("{component}"),
        });
    }
    let angle = if kind.angle_offsets().contains(&component) {
        vec![0]
    } else {
        vec![]
    };
    let dim = kind.dim();
    SensorModel::new(
        vec![id],
        1,
        noise_cov,
        angle,
        move |sub| Ok(DVector::from_vec(vec![sub[component]])),
        move |_| {
            let mut j = DMatrix::zeros(1, dim);
            j[(0, component)] = 1.0;
            Ok(j)
        },
    )
}

/// Pseudo-sensor measuring the rectangularity of four planar points
/// labeled counter-clockwise from the lower-right corner:
///
/// ```text
/// z = [ xᵢ − xⱼ + xₖ − xₗ                                   ]
///     [ yᵢ − yⱼ + yₖ − yₗ                                   ]
///     [ (xᵢ−xⱼ)(xₖ−xⱼ) + (yᵢ−yⱼ)(yₖ−yⱼ)                     ]
/// ```
///
/// The first two components vanish when opposite sides are parallel, the
/// third when the corner at j is square; z = 0 exactly on rectangles.
pub fn rectangle_sensor(
    map: &StochasticMap,
    corners: [EntityId; 4],
    noise_cov: DMatrix<f64>,
) -> Result<SensorModel> {
    for (n, id) in corners.iter().enumerate() {
        if corners[..n].contains(id) {
            return Err(Error::DuplicateEntity(id.index()));
        }
        if map.kind(*id)? != EntityKind::Point2 {
            return Err(Error::KindMismatch {
                expected: "Point2 corner".into(),
                got: format!("{:?}", map.kind(*id)?),
            });
        }
    }
    if noise_cov.nrows() != 3 || noise_cov.ncols() != 3 {
        return Err(Error::ShapeMismatch {
            expected: "3x3 noise covariance".into(),
            got: format!("{}x{}", noise_cov.nrows(), noise_cov.ncols()),
        });
    }
    SensorModel::new(
        corners.to_vec(),
        3,
        noise_cov,
        vec![],
        |sub| {
            let (xi, yi, xj, yj, xk, yk, xl, yl) = (
                sub[0], sub[1], sub[2], sub[3], sub[4], sub[5], sub[6], sub[7],
            );
            Ok(DVector::from_vec(vec![
                xi - xj + xk - xl,
                yi - yj + yk - yl,
                (xi - xj) * (xk - xj) + (yi - yj) * (yk - yj),
            ]))
        },
        |sub| {
            let (xi, yi, xj, yj, xk, yk) = (sub[0], sub[1], sub[2], sub[3], sub[4], sub[5]);
            Ok(DMatrix::from_row_slice(
                3,
                8,
                &[
                    1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0, //
                    0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, //
                    xk - xj,
                    yk - yj,
                    2.0 * xj - xi - xk,
                    2.0 * yj - yi - yk,
                    xi - xj,
                    yi - yj,
                    0.0,
                    0.0,
                ],
            ))
        },
    )
}

/// Expected sensor value and its likely variation under the current map:
/// ẑ = h(x̂) and C(z) = H·C·Hᵀ + C(v), using the full cross-covariance
/// sub-blocks of the touched entities.
pub fn predict_measurement(map: &StochasticMap, sensor: &SensorModel) -> Result<Gaussian> {
    let sub = map.gather_substate(sensor.touched())?;
    let mean = sensor.measure(&sub)?;
    let jac = sensor.jacobian(&sub)?;
    let sub_cov = map.gather_subcov(sensor.touched())?;
    let cov = &jac * sub_cov * jac.transpose() + sensor.noise_cov();
    Ok(Gaussian::from_parts(mean, symmetrized(&cov)))
}
