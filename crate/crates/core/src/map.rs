//! The stochastic map: a joint estimate of every entity's world location.
//!
//! The map is a flat state vector stacking the spatial variables of all
//! entities, plus the full system covariance including every
//! cross-covariance block — the channel through which an update to one
//! entity improves the others:
//!
//! ```text
//!       x = [x₁ … xₙ]ᵀ,       C(x) = [ C(x₁)      C(x₁,x₂) … ]
//!                                     [ C(x₂,x₁)  C(x₂)    … ]
//! ```
//!
//! Entities enter independently (world priors, zero cross blocks) or
//! relative to an existing base (correlated cross blocks from the
//! compounding Jacobian), poses extrapolate under noisy controls, and
//! constraints between mapped entities are folded in with EKF/IEKF
//! updates. Storage is dense; at the intended map sizes (≤ ~100 entities)
//! no sparsification is warranted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagate::{chi_square_quantile, symmetrized, Gaussian};
use crate::sensors::SensorModel;
use crate::transforms2d::{compose2, jac_compose2, tail_to_tail2, wrap_angle, Pose2};
use crate::transforms3d::{compose3, jac_compose3, tail_to_tail3, AngleConvention, Pose3};

/// Dimensionality regime of a map and the convention of its pose entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapMode {
    #[serde(rename = "2d")]
    Planar,
    #[serde(rename = "3d-euler")]
    Euler3,
    #[serde(rename = "3d-rpy")]
    Rpy3,
}

impl MapMode {
    pub fn pose_kind(&self) -> EntityKind {
        match self {
            MapMode::Planar => EntityKind::Pose2,
            _ => EntityKind::Pose3,
        }
    }

    pub fn convention(&self) -> Option<AngleConvention> {
        match self {
            MapMode::Planar => None,
            MapMode::Euler3 => Some(AngleConvention::Euler),
            MapMode::Rpy3 => Some(AngleConvention::Rpy),
        }
    }

    fn allows(&self, kind: EntityKind) -> bool {
        match self {
            MapMode::Planar => matches!(kind, EntityKind::Point2 | EntityKind::Pose2),
            _ => matches!(kind, EntityKind::Pose3),
        }
    }
}

/// What an entity's state block represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    /// Planar point (x, y) — 2 variables, no orientation.
    Point2,
    /// Planar pose (x, y, φ) — 3 variables.
    Pose2,
    /// Spatial pose (x, y, z, φ, θ, ψ) — 6 variables.
    Pose3,
}

impl EntityKind {
    pub fn dim(&self) -> usize {
        match self {
            EntityKind::Point2 => 2,
            EntityKind::Pose2 => 3,
            EntityKind::Pose3 => 6,
        }
    }

    /// Offsets of angle-valued components within the entity block.
    pub fn angle_offsets(&self) -> &'static [usize] {
        match self {
            EntityKind::Point2 => &[],
            EntityKind::Pose2 => &[2],
            EntityKind::Pose3 => &[3, 4, 5],
        }
    }

    pub fn is_pose(&self) -> bool {
        !matches!(self, EntityKind::Point2)
    }
}

/// Stable handle to a map entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(usize);

impl EntityId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Result of a filter update, for inspection and logging.
#[derive(Debug, Clone)]
pub struct UpdateDiagnostics {
    /// Kalman gain of the accepted step.
    pub gain: DMatrix<f64>,
    /// Innovation z − h(x̂⁻), angle components wrapped.
    pub innovation: DVector<f64>,
    /// Innovation covariance H·C⁻·Hᵀ + C(v) at the prior estimate.
    pub innovation_cov: DMatrix<f64>,
    /// Number of relinearized estimates computed before the fixed point.
    pub iterations: usize,
    /// False when the iteration budget ran out before confirmation.
    pub converged: bool,
    /// νᵀ·S⁻¹·ν at the prior estimate.
    pub mahalanobis_sq: f64,
}

/// Serializable image of a map, with the covariance stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapState {
    pub mode: MapMode,
    pub kinds: Vec<EntityKind>,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

/// Entity registry plus joint mean and full system covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMap {
    mode: MapMode,
    kinds: Vec<EntityKind>,
    offsets: Vec<usize>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl StochasticMap {
    /// A fresh map holding one anchor pose — the robot at the world origin
    /// with no uncertainty.
    pub fn new(mode: MapMode) -> Self {
        let kind = mode.pose_kind();
        let d = kind.dim();
        StochasticMap {
            mode,
            kinds: vec![kind],
            offsets: vec![0],
            mean: DVector::zeros(d),
            cov: DMatrix::zeros(d, d),
        }
    }

    pub fn mode(&self) -> MapMode {
        self.mode
    }

    /// The entity created by [`StochasticMap::new`].
    pub fn anchor(&self) -> EntityId {
        EntityId(0)
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.kinds.len()).map(EntityId)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn kind(&self, id: EntityId) -> Result<EntityKind> {
        self.kinds
            .get(id.0)
            .copied()
            .ok_or(Error::UnknownEntity(id.0))
    }

    pub fn offset(&self, id: EntityId) -> Result<usize> {
        self.offsets
            .get(id.0)
            .copied()
            .ok_or(Error::UnknownEntity(id.0))
    }

    /// Mean block of one entity.
    pub fn entity_mean(&self, id: EntityId) -> Result<DVector<f64>> {
        let off = self.offset(id)?;
        let d = self.kinds[id.0].dim();
        Ok(self.mean.rows(off, d).clone_owned())
    }

    /// Diagonal covariance block of one entity.
    pub fn entity_cov(&self, id: EntityId) -> Result<DMatrix<f64>> {
        let off = self.offset(id)?;
        let d = self.kinds[id.0].dim();
        Ok(self.cov.view((off, off), (d, d)).clone_owned())
    }

    /// Cross-covariance block C(xᵢ, xⱼ).
    pub fn cross_cov(&self, i: EntityId, j: EntityId) -> Result<DMatrix<f64>> {
        let oi = self.offset(i)?;
        let oj = self.offset(j)?;
        let di = self.kinds[i.0].dim();
        let dj = self.kinds[j.0].dim();
        Ok(self.cov.view((oi, oj), (di, dj)).clone_owned())
    }

    /// Marginal of one entity as a Gaussian.
    pub fn entity_gaussian(&self, id: EntityId) -> Result<Gaussian> {
        Ok(Gaussian::from_parts(
            self.entity_mean(id)?,
            self.entity_cov(id)?,
        ))
    }

    /// Marginal of the (x, y) components of one entity, for ellipse display.
    pub fn entity_xy_gaussian(&self, id: EntityId) -> Result<Gaussian> {
        let off = self.offset(id)?;
        Ok(Gaussian::from_parts(
            self.mean.rows(off, 2).clone_owned(),
            self.cov.view((off, off), (2, 2)).clone_owned(),
        ))
    }

    fn pose2_at(&self, id: EntityId) -> Result<Pose2> {
        let m = self.entity_mean(id)?;
        Pose2::new(m[0], m[1], m[2])
    }

    fn pose3_at(&self, id: EntityId) -> Result<Pose3> {
        let convention = self.mode.convention().ok_or(Error::KindMismatch {
            expected: "3d mode".into(),
            got: "2d".into(),
        })?;
        let m = self.entity_mean(id)?;
        Pose3::from_slice(m.as_slice(), convention)
    }

    /// Indices of all angle-valued components of the state vector.
    pub fn state_angle_indices(&self) -> Vec<usize> {
        let mut idx = Vec::new();
        for (k, &off) in self.kinds.iter().zip(self.offsets.iter()) {
            for &a in k.angle_offsets() {
                idx.push(off + a);
            }
        }
        idx
    }

    fn wrap_state_angles(&mut self) {
        for i in self.state_angle_indices() {
            self.mean[i] = wrap_angle(self.mean[i]);
        }
    }

    /// Case I-a: insert an object whose world estimate is independent of
    /// the map. The new cross blocks are zero.
    pub fn add_object_world(&mut self, prior: &Gaussian, kind: EntityKind) -> Result<EntityId> {
        if !self.mode.allows(kind) {
            return Err(Error::KindMismatch {
                expected: format!("kind valid in {:?} mode", self.mode),
                got: format!("{kind:?}"),
            });
        }
        if prior.dim() != kind.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} state variables", kind.dim()),
                got: format!("{}", prior.dim()),
            });
        }
        let id = self.grow(kind, prior.mean().clone());
        let off = self.offsets[id.0];
        let d = kind.dim();
        self.cov
            .view_mut((off, off), (d, d))
            .copy_from(prior.cov());
        self.wrap_state_angles();
        Ok(id)
    }

    /// Case I-b: insert an object measured relative to `base`. The new
    /// world estimate is g(x_base, z) = x_base ⊕ z; its covariance is
    /// G_x·C(x_base)·G_xᵀ + G_z·C(z)·G_zᵀ and its cross-covariance row is
    /// G_x·C(x_base, ·), correlating the newcomer with the whole map.
    pub fn add_object_relative(
        &mut self,
        base: EntityId,
        rel: &Gaussian,
        kind: EntityKind,
    ) -> Result<EntityId> {
        let base_kind = self.kind(base)?;
        if !base_kind.is_pose() {
            return Err(Error::KindMismatch {
                expected: "pose base".into(),
                got: format!("{base_kind:?}"),
            });
        }
        if !self.mode.allows(kind) {
            return Err(Error::KindMismatch {
                expected: format!("kind valid in {:?} mode", self.mode),
                got: format!("{kind:?}"),
            });
        }
        if rel.dim() != kind.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} relation variables", kind.dim()),
                got: format!("{}", rel.dim()),
            });
        }
        let (g_mean, gx, gz) = self.compound_from(base, rel.mean(), kind)?;

        let base_off = self.offsets[base.0];
        let base_dim = base_kind.dim();
        let n_old = self.dim();
        let base_row = self.cov.view((base_off, 0), (base_dim, n_old)).clone_owned();
        let base_block = self.cov.view((base_off, base_off), (base_dim, base_dim));
        let a = &gx * base_block * gx.transpose() + &gz * rel.cov() * gz.transpose();
        let b = &gx * base_row;

        let id = self.grow(kind, g_mean);
        let off = self.offsets[id.0];
        let d = kind.dim();
        self.cov.view_mut((off, 0), (d, n_old)).copy_from(&b);
        self.cov
            .view_mut((0, off), (n_old, d))
            .copy_from(&b.transpose());
        self.cov
            .view_mut((off, off), (d, d))
            .copy_from(&symmetrized(&a));
        self.wrap_state_angles();
        Ok(id)
    }

    /// World mean of base ⊕ z together with the Jacobian blocks over the
    /// base state (G_x) and the relation (G_z).
    fn compound_from(
        &self,
        base: EntityId,
        z: &DVector<f64>,
        kind: EntityKind,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        match (self.mode, kind) {
            (MapMode::Planar, EntityKind::Pose2) => {
                let bp = self.pose2_at(base)?;
                let zp = Pose2::new(z[0], z[1], z[2])?;
                let w = compose2(bp, zp);
                let j = jac_compose2(bp, zp, w);
                let gx = DMatrix::from_fn(3, 3, |r, c| j[(r, c)]);
                let gz = DMatrix::from_fn(3, 3, |r, c| j[(r, c + 3)]);
                Ok((
                    DVector::from_vec(vec![w.x(), w.y(), w.phi()]),
                    gx,
                    gz,
                ))
            }
            (MapMode::Planar, EntityKind::Point2) => {
                let bp = self.pose2_at(base)?;
                let (s, c) = bp.phi().sin_cos();
                let wx = z[0] * c - z[1] * s + bp.x();
                let wy = z[0] * s + z[1] * c + bp.y();
                let gx = DMatrix::from_row_slice(
                    2,
                    3,
                    &[1.0, 0.0, -(wy - bp.y()), 0.0, 1.0, wx - bp.x()],
                );
                let gz = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
                Ok((DVector::from_vec(vec![wx, wy]), gx, gz))
            }
            (_, EntityKind::Pose3) => {
                let convention = self.mode.convention().expect("3d mode");
                let bp = self.pose3_at(base)?;
                let zp = Pose3::from_slice(z.as_slice(), convention)?;
                let w = compose3(&bp, &zp)?;
                let j = jac_compose3(&bp, &zp, &w)?;
                let gx = DMatrix::from_fn(6, 6, |r, c| j[(r, c)]);
                let gz = DMatrix::from_fn(6, 6, |r, c| j[(r, c + 6)]);
                Ok((
                    DVector::from_column_slice(w.to_vector().as_slice()),
                    gx,
                    gz,
                ))
            }
            _ => Err(Error::KindMismatch {
                expected: "kind compatible with map mode".into(),
                got: format!("{kind:?}"),
            }),
        }
    }

    fn grow(&mut self, kind: EntityKind, block_mean: DVector<f64>) -> EntityId {
        let n_old = self.dim();
        let d = kind.dim();
        let id = EntityId(self.kinds.len());
        self.kinds.push(kind);
        self.offsets.push(n_old);
        let mut mean = DVector::zeros(n_old + d);
        mean.rows_mut(0, n_old).copy_from(&self.mean);
        mean.rows_mut(n_old, d).copy_from(&block_mean);
        self.mean = mean;
        let mut cov = DMatrix::zeros(n_old + d, n_old + d);
        cov.view_mut((0, 0), (n_old, n_old)).copy_from(&self.cov);
        self.cov = cov;
        id
    }

    /// Extrapolate a pose entity through an uncertain relative motion
    /// y = (û, C(w)). Its mean block becomes x̂ ⊕ û, the diagonal block
    /// J₁·C(x)·J₁ᵀ + J₂·C(y)·J₂ᵀ, and every cross block J₁·C(x, xᵢ); the
    /// rest of the map is untouched.
    pub fn move_entity(&mut self, id: EntityId, control: &Gaussian) -> Result<()> {
        let kind = self.kind(id)?;
        if !kind.is_pose() {
            return Err(Error::KindMismatch {
                expected: "pose entity".into(),
                got: format!("{kind:?}"),
            });
        }
        if control.dim() != kind.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}-dimensional control", kind.dim()),
                got: format!("{}", control.dim()),
            });
        }
        let (new_mean, j1, j2) = match kind {
            EntityKind::Pose2 => {
                let p = self.pose2_at(id)?;
                let u = Pose2::new(control.mean()[0], control.mean()[1], control.mean()[2])?;
                let w = compose2(p, u);
                let j = jac_compose2(p, u, w);
                (
                    DVector::from_vec(vec![w.x(), w.y(), w.phi()]),
                    DMatrix::from_fn(3, 3, |r, c| j[(r, c)]),
                    DMatrix::from_fn(3, 3, |r, c| j[(r, c + 3)]),
                )
            }
            EntityKind::Pose3 => {
                let convention = self.mode.convention().expect("3d mode");
                let p = self.pose3_at(id)?;
                let u = Pose3::from_slice(control.mean().as_slice(), convention)?;
                let w = compose3(&p, &u)?;
                let j = jac_compose3(&p, &u, &w)?;
                (
                    DVector::from_column_slice(w.to_vector().as_slice()),
                    DMatrix::from_fn(6, 6, |r, c| j[(r, c)]),
                    DMatrix::from_fn(6, 6, |r, c| j[(r, c + 6)]),
                )
            }
            EntityKind::Point2 => unreachable!(),
        };

        let off = self.offsets[id.0];
        let d = kind.dim();
        let n = self.dim();
        let old_row = self.cov.view((off, 0), (d, n)).clone_owned();
        let old_diag = self.cov.view((off, off), (d, d)).clone_owned();
        let new_row = &j1 * old_row;
        let new_diag =
            symmetrized(&(&j1 * old_diag * j1.transpose() + &j2 * control.cov() * j2.transpose()));

        self.mean.rows_mut(off, d).copy_from(&new_mean);
        self.cov.view_mut((off, 0), (d, n)).copy_from(&new_row);
        self.cov
            .view_mut((0, off), (n, d))
            .copy_from(&new_row.transpose());
        self.cov.view_mut((off, off), (d, d)).copy_from(&new_diag);
        self.wrap_state_angles();
        Ok(())
    }

    /// Stacked mean of the sensor's touched entities.
    pub fn gather_substate(&self, touched: &[EntityId]) -> Result<DVector<f64>> {
        self.gather_from(&self.mean, touched)
    }

    fn gather_from(&self, state: &DVector<f64>, touched: &[EntityId]) -> Result<DVector<f64>> {
        let total: usize = touched
            .iter()
            .map(|id| self.kind(*id).map(|k| k.dim()))
            .sum::<Result<usize>>()?;
        let mut out = DVector::zeros(total);
        let mut at = 0;
        for id in touched {
            let off = self.offset(*id)?;
            let d = self.kinds[id.0].dim();
            out.rows_mut(at, d).copy_from(&state.rows(off, d));
            at += d;
        }
        Ok(out)
    }

    /// Covariance submatrix over the touched entities, cross blocks
    /// included.
    pub fn gather_subcov(&self, touched: &[EntityId]) -> Result<DMatrix<f64>> {
        let dims: Vec<(usize, usize)> = touched
            .iter()
            .map(|id| Ok((self.offset(*id)?, self.kind(*id)?.dim())))
            .collect::<Result<_>>()?;
        let total: usize = dims.iter().map(|(_, d)| d).sum();
        let mut out = DMatrix::zeros(total, total);
        let mut ri = 0;
        for &(oi, di) in &dims {
            let mut ci = 0;
            for &(oj, dj) in &dims {
                out.view_mut((ri, ci), (di, dj))
                    .copy_from(&self.cov.view((oi, oj), (di, dj)));
                ci += dj;
            }
            ri += di;
        }
        Ok(out)
    }

    /// Full-state sensor Jacobian assembled from per-entity blocks;
    /// untouched entities contribute zero columns.
    fn scatter_jacobian(&self, sensor: &SensorModel, sub_jac: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = sensor.meas_dim();
        let mut h = DMatrix::zeros(m, self.dim());
        let mut at = 0;
        for id in sensor.touched() {
            let off = self.offset(*id)?;
            let d = self.kinds[id.index()].dim();
            h.view_mut((0, off), (m, d))
                .copy_from(&sub_jac.view((0, at), (m, d)));
            at += d;
        }
        Ok(h)
    }

    /// Difference a − b in state space with angle components wrapped.
    fn state_difference(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = a - b;
        for i in self.state_angle_indices() {
            d[i] = wrap_angle(d[i]);
        }
        d
    }

    fn wrapped_innovation(sensor: &SensorModel, z: &DVector<f64>, h0: &DVector<f64>) -> DVector<f64> {
        let mut nu = z - h0;
        for &i in sensor.angle_components() {
            nu[i] = wrap_angle(nu[i]);
        }
        nu
    }

    /// One relinearized filter step evaluated at `lin`, against the prior
    /// (mean, cov). Returns (candidate mean, gain, innovation-at-lin, S).
    fn filter_step(
        &self,
        sensor: &SensorModel,
        z: &DVector<f64>,
        prior_mean: &DVector<f64>,
        lin: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
        let sub = self.gather_from(lin, sensor.touched())?;
        let h0 = sensor.measure(&sub)?;
        if h0.len() != sensor.meas_dim() || z.len() != sensor.meas_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} measurement components", sensor.meas_dim()),
                got: format!("{}/{}", h0.len(), z.len()),
            });
        }
        let sub_jac = sensor.jacobian(&sub)?;
        let h = self.scatter_jacobian(sensor, &sub_jac)?;
        let cht = &self.cov * h.transpose();
        let s = symmetrized(&(&h * &cht + sensor.noise_cov()));
        // Cholesky is the positive-definiteness gate; the actual solve goes
        // through LU, which keeps simple cases (like the scalar fusion)
        // free of square-root rounding.
        s.clone().cholesky().ok_or(Error::InnovationNotPD)?;
        let lu = s.clone().lu();
        let gain = lu
            .solve(&cht.transpose())
            .ok_or(Error::InnovationNotPD)?
            .transpose();
        // ν_i = z − h(x_i) − H·(x̂⁻ − x_i): the measurement residual
        // relinearized about `lin`.
        let mut resid = Self::wrapped_innovation(sensor, z, &h0);
        resid -= &h * self.state_difference(prior_mean, lin);
        let mut candidate = prior_mean + &gain * &resid;
        for i in self.state_angle_indices() {
            candidate[i] = wrap_angle(candidate[i]);
        }
        Ok((candidate, gain, resid, s))
    }

    /// Extended Kalman filter update: x̂⁺ = x̂⁻ + K·ν and
    /// C⁺ = C⁻ − K·H·C⁻, back-propagating the constraint through the
    /// cross-covariances.
    pub fn ekf_update(&mut self, sensor: &SensorModel, z: &DVector<f64>) -> Result<UpdateDiagnostics> {
        self.iekf_update(sensor, z, f64::INFINITY, 1)
    }

    /// Iterated EKF update. The measurement function is relinearized about
    /// successive posterior estimates, always against the original
    /// measurement and prior moments; the covariance is computed once, from
    /// the accepted step. Iteration stops when a relinearized step moves
    /// the state by less than `tol` (that confirming step is not counted),
    /// or when `max_iter` estimates have been computed — reported via
    /// `converged`.
    pub fn iekf_update(
        &mut self,
        sensor: &SensorModel,
        z: &DVector<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<UpdateDiagnostics> {
        if max_iter == 0 {
            return Err(Error::InvalidValue("max_iter must be positive".into()));
        }
        let prior_mean = self.mean.clone();

        let mut lin = prior_mean.clone();
        let mut accepted: Option<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> = None;
        let mut first: Option<(DVector<f64>, DMatrix<f64>, f64)> = None;
        let mut iterations = 0;
        let mut converged = false;
        loop {
            let (candidate, gain, resid, s) = self.filter_step(sensor, z, &prior_mean, &lin)?;
            if first.is_none() {
                let solved = s
                    .clone()
                    .lu()
                    .solve(&resid)
                    .ok_or(Error::InnovationNotPD)?;
                let d2 = resid.dot(&solved);
                first = Some((resid.clone(), s.clone(), d2));
            }
            if let Some((prev, _, _)) = &accepted {
                if self.state_difference(&candidate, prev).norm() < tol {
                    converged = true;
                    break;
                }
            } else if tol.is_infinite() {
                // Any step satisfies an infinite tolerance; accept the
                // plain EKF estimate without a confirming pass.
                let sub_jac = sensor.jacobian(&self.gather_from(&lin, sensor.touched())?)?;
                let h = self.scatter_jacobian(sensor, &sub_jac)?;
                accepted = Some((candidate, gain, h));
                iterations = 1;
                converged = true;
                break;
            }
            let sub_jac = sensor.jacobian(&self.gather_from(&lin, sensor.touched())?)?;
            let h = self.scatter_jacobian(sensor, &sub_jac)?;
            lin = candidate.clone();
            accepted = Some((candidate, gain, h));
            iterations += 1;
            if iterations >= max_iter {
                break;
            }
        }
        let (post_mean, gain, h) = accepted.expect("at least one step");
        let (innovation, innovation_cov, mahalanobis_sq) = first.expect("first step recorded");

        self.mean = post_mean;
        self.wrap_state_angles();
        let khc = &gain * &h * &self.cov;
        self.cov = symmetrized(&(&self.cov - khc));

        Ok(UpdateDiagnostics {
            gain,
            innovation,
            innovation_cov,
            iterations,
            converged,
            mahalanobis_sq,
        })
    }

    /// Relation of entity `j` expressed in entity `i`'s frame, with the
    /// covariance G·C_sub·Gᵀ taken over the joint (i, j) blocks.
    pub fn extract_relation(&self, i: EntityId, j: EntityId) -> Result<Gaussian> {
        let ki = self.kind(i)?;
        let kj = self.kind(j)?;
        if !ki.is_pose() {
            return Err(Error::KindMismatch {
                expected: "pose frame".into(),
                got: format!("{ki:?}"),
            });
        }
        if i == j {
            let d = ki.dim();
            return Ok(Gaussian::from_parts(
                DVector::zeros(d),
                DMatrix::zeros(d, d),
            ));
        }
        let (mean, gi, gj) = match (self.mode, kj) {
            (MapMode::Planar, EntityKind::Pose2) => {
                let pi = self.pose2_at(i)?;
                let pj = self.pose2_at(j)?;
                let (rel, jac) = tail_to_tail2(pi, pj);
                (
                    DVector::from_vec(vec![rel.x(), rel.y(), rel.phi()]),
                    DMatrix::from_fn(3, 3, |r, c| jac[(r, c)]),
                    DMatrix::from_fn(3, 3, |r, c| jac[(r, c + 3)]),
                )
            }
            (MapMode::Planar, EntityKind::Point2) => {
                let pi = self.pose2_at(i)?;
                let pm = self.entity_mean(j)?;
                let (s, c) = pi.phi().sin_cos();
                let dx = pm[0] - pi.x();
                let dy = pm[1] - pi.y();
                // Point expressed in the pose frame: Rᵀ·(p − t).
                let rx = c * dx + s * dy;
                let ry = -s * dx + c * dy;
                let gi = DMatrix::from_row_slice(2, 3, &[-c, -s, ry, s, -c, -rx]);
                let gj = DMatrix::from_row_slice(2, 2, &[c, s, -s, c]);
                (DVector::from_vec(vec![rx, ry]), gi, gj)
            }
            (_, EntityKind::Pose3) => {
                let pi = self.pose3_at(i)?;
                let pj = self.pose3_at(j)?;
                let (rel, jac) = tail_to_tail3(&pi, &pj)?;
                (
                    DVector::from_column_slice(rel.to_vector().as_slice()),
                    DMatrix::from_fn(6, 6, |r, c| jac[(r, c)]),
                    DMatrix::from_fn(6, 6, |r, c| jac[(r, c + 6)]),
                )
            }
            _ => {
                return Err(Error::KindMismatch {
                    expected: "relation target compatible with map mode".into(),
                    got: format!("{kj:?}"),
                })
            }
        };
        let cii = self.cross_cov(i, i)?;
        let cij = self.cross_cov(i, j)?;
        let cjj = self.cross_cov(j, j)?;
        let cov = &gi * &cii * gi.transpose()
            + &gi * &cij * gj.transpose()
            + &gj * cij.transpose() * gi.transpose()
            + &gj * &cjj * gj.transpose();
        Ok(Gaussian::from_parts(mean, symmetrized(&cov)))
    }

    /// Maximum covariance asymmetry, for invariant checks.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim() {
            for j in (i + 1)..self.dim() {
                worst = worst.max((self.cov[(i, j)] - self.cov[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn to_state(&self) -> MapState {
        MapState {
            mode: self.mode,
            kinds: self.kinds.clone(),
            mean: self.mean.iter().copied().collect(),
            cov: {
                let n = self.dim();
                let mut out = Vec::with_capacity(n * n);
                for r in 0..n {
                    for c in 0..n {
                        out.push(self.cov[(r, c)]);
                    }
                }
                out
            },
        }
    }

    pub fn from_state(state: &MapState) -> Result<Self> {
        let mut offsets = Vec::with_capacity(state.kinds.len());
        let mut total = 0usize;
        for kind in &state.kinds {
            if !state.mode.allows(*kind) {
                return Err(Error::Schema(format!(
                    "kind {kind:?} not valid in {:?} mode",
                    state.mode
                )));
            }
            offsets.push(total);
            total += kind.dim();
        }
        if state.mean.len() != total {
            return Err(Error::Schema(format!(
                "mean length {} does not match entity dims {total}",
                state.mean.len()
            )));
        }
        if state.cov.len() != total * total {
            return Err(Error::Schema(format!(
                "covariance length {} is not {total}²",
                state.cov.len()
            )));
        }
        let mean = DVector::from_column_slice(&state.mean);
        let cov = DMatrix::from_row_slice(total, total, &state.cov);
        Ok(StochasticMap {
            mode: state.mode,
            kinds: state.kinds.clone(),
            offsets,
            mean,
            cov,
        })
    }
}

/// Chi-square gate on the innovation ν = z − expected.mean (angle
/// components wrapped) with S = expected.cov + noise_cov. Returns the
/// acceptance flag and d² = νᵀ·S⁻¹·ν; the threshold is the chi-square
/// quantile at probability `p` with dim(ν) degrees of freedom.
pub fn mahalanobis_gate(
    expected: &Gaussian,
    z: &DVector<f64>,
    noise_cov: &DMatrix<f64>,
    p: f64,
    angle_components: &[usize],
) -> Result<(bool, f64)> {
    let d = expected.dim();
    if z.len() != d || noise_cov.nrows() != d || noise_cov.ncols() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("{d}-dimensional measurement and noise"),
            got: format!("{} / {}x{}", z.len(), noise_cov.nrows(), noise_cov.ncols()),
        });
    }
    let mut nu = z - expected.mean();
    for &i in angle_components {
        nu[i] = wrap_angle(nu[i]);
    }
    let s = symmetrized(&(expected.cov() + noise_cov));
    s.clone().cholesky().ok_or(Error::NonPositiveDefinite)?;
    let solved = s.lu().solve(&nu).ok_or(Error::NonPositiveDefinite)?;
    let d2 = nu.dot(&solved);
    let threshold = chi_square_quantile(p, d)?;
    Ok((d2 <= threshold, d2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::sensors;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use std::f64::consts::PI;

    fn gaussian(mean: &[f64], cov_diag: &[f64]) -> Gaussian {
        Gaussian::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(cov_diag)),
        )
        .unwrap()
    }

    #[test]
    fn new_map_is_a_certain_anchor() {
        let m = StochasticMap::new(MapMode::Planar);
        assert_eq!(m.dim(), 3);
        assert!(m.mean().iter().all(|&v| v == 0.0));
        assert!(m.cov().iter().all(|&v| v == 0.0));

        let m = StochasticMap::new(MapMode::Euler3);
        assert_eq!(m.dim(), 6);

        let rel = m.extract_relation(m.anchor(), m.anchor()).unwrap();
        assert!(rel.mean().iter().all(|&v| v == 0.0));
        assert!(rel.cov().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn world_insertion_is_independent() {
        let mut m = StochasticMap::new(MapMode::Planar);
        let prior = gaussian(&[1.0, 2.0, 0.5], &[0.1, 0.2, 0.05]);
        let a = m.add_object_world(&prior, EntityKind::Pose2).unwrap();
        let b = m
            .add_object_world(&gaussian(&[3.0, -1.0, 0.0], &[0.3, 0.3, 0.1]), EntityKind::Pose2)
            .unwrap();
        assert_eq!(m.dim(), 9);
        assert_abs_diff_eq!(m.entity_cov(a).unwrap(), prior.cov().clone_owned());
        assert!(m.cross_cov(a, b).unwrap().iter().all(|&v| v == 0.0));
        assert!(m.cross_cov(m.anchor(), a).unwrap().iter().all(|&v| v == 0.0));

        // Anchor at the origin with zero covariance: the extracted relation
        // reproduces the prior exactly.
        let rel = m.extract_relation(m.anchor(), a).unwrap();
        assert_abs_diff_eq!(rel.mean(), prior.mean(), epsilon = 0.0);
        assert_abs_diff_eq!(rel.cov(), prior.cov(), epsilon = 0.0);
    }

    #[test]
    fn zero_cov_prior_is_a_perfect_landmark() {
        let mut m = StochasticMap::new(MapMode::Planar);
        let prior = Gaussian::certain(dvector![4.0, 5.0]);
        let id = m.add_object_world(&prior, EntityKind::Point2).unwrap();
        assert!(m.entity_cov(id).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_insertion_from_certain_anchor_reduces_to_world_case() {
        let mut m = StochasticMap::new(MapMode::Planar);
        let z1 = gaussian(&[2.0, 1.0, 0.3], &[0.04, 0.04, 0.01]);
        let id = m.add_object_relative(m.anchor(), &z1, EntityKind::Pose2).unwrap();
        // g(x, z) = z when the base is the world frame.
        assert_abs_diff_eq!(m.entity_mean(id).unwrap(), z1.mean(), epsilon = 0.0);
        assert_abs_diff_eq!(m.entity_cov(id).unwrap(), z1.cov().clone_owned(), epsilon = 0.0);
        assert!(m.cross_cov(m.anchor(), id).unwrap().iter().all(|&v| v == 0.0));
        // Robot block untouched.
        assert!(m.entity_cov(m.anchor()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn motion_then_relative_sensing_builds_correlated_blocks() {
        // Anchor moves with covariance C(y), then senses a new object:
        // C(x₂) = J₁·C(y)·J₁ᵀ + J₂·C(z₂)·J₂ᵀ and C(x_R, x₂) = C(y)·J₁ᵀ.
        let mut m = StochasticMap::new(MapMode::Planar);
        let cy = dmatrix![0.02, 0.002, 0.0; 0.002, 0.03, 0.001; 0.0, 0.001, 0.005];
        let control = Gaussian::new(dvector![1.0, 0.4, PI / 6.0], cy.clone()).unwrap();
        m.move_entity(m.anchor(), &control).unwrap();
        assert_abs_diff_eq!(
            m.entity_cov(m.anchor()).unwrap(),
            cy,
            epsilon = 1e-15
        );

        let cz = dmatrix![0.01, 0.0, 0.0; 0.0, 0.01, 0.0; 0.0, 0.0, 0.004];
        let z2 = Gaussian::new(dvector![2.0, -0.5, 0.2], cz.clone()).unwrap();
        let robot_pose = m.pose2_at(m.anchor()).unwrap();
        let zp = Pose2::new(2.0, -0.5, 0.2).unwrap();
        let w = compose2(robot_pose, zp);
        let j = jac_compose2(robot_pose, zp, w);
        let j1 = DMatrix::from_fn(3, 3, |r, c| j[(r, c)]);
        let j2 = DMatrix::from_fn(3, 3, |r, c| j[(r, c + 3)]);

        let id = m.add_object_relative(m.anchor(), &z2, EntityKind::Pose2).unwrap();
        let expected_a = &j1 * &cy * j1.transpose() + &j2 * &cz * j2.transpose();
        assert_abs_diff_eq!(m.entity_cov(id).unwrap(), expected_a, epsilon = 1e-12);
        let expected_cross = &cy * j1.transpose();
        assert_abs_diff_eq!(
            m.cross_cov(m.anchor(), id).unwrap(),
            expected_cross,
            epsilon = 1e-12
        );
    }

    #[test]
    fn relative_insertion_matches_monte_carlo_joint_moments() {
        let mut m = StochasticMap::new(MapMode::Planar);
        let base_prior = Gaussian::new(
            dvector![1.0, 0.5, 0.4],
            dmatrix![2.5e-3, 1.0e-4, 0.0; 1.0e-4, 2.5e-3, 0.0; 0.0, 0.0, 2.5e-5],
        )
        .unwrap();
        let base = m.add_object_world(&base_prior, EntityKind::Pose2).unwrap();
        let rel = Gaussian::new(
            dvector![2.0, -1.0, 0.3],
            dmatrix![2.5e-3, 0.0, 0.0; 0.0, 2.5e-3, 0.0; 0.0, 0.0, 2.5e-5],
        )
        .unwrap();
        let id = m.add_object_relative(base, &rel, EntityKind::Pose2).unwrap();
        let a = m.entity_cov(id).unwrap();
        let b = m.cross_cov(id, base).unwrap();
        let mean = m.entity_mean(id).unwrap();

        let rng = CounterRng::new(2024, 0);
        let fb = base_prior.sampling_factor();
        let fz = rel.sampling_factor();
        let n = 100_000;
        let mut sum = DVector::zeros(3);
        let mut outer = DMatrix::zeros(3, 3);
        let mut cross = DMatrix::zeros(3, 3);
        for s in 0..n {
            let bs = base_prior.sample_with_factor(&fb, &rng, (s * 6) as u64);
            let zs = rel.sample_with_factor(&fz, &rng, (s * 6 + 3) as u64);
            let w = compose2(
                Pose2::new(bs[0], bs[1], bs[2]).unwrap(),
                Pose2::new(zs[0], zs[1], zs[2]).unwrap(),
            );
            let wv = dvector![w.x(), w.y(), w.phi()];
            let dw = &wv - &mean;
            let db = &bs - base_prior.mean();
            sum += &dw;
            outer += &dw * dw.transpose();
            cross += &dw * db.transpose();
        }
        let n_f = n as f64;
        let mc_dev = sum / n_f;
        let mc_cov = outer / n_f - &mc_dev * mc_dev.transpose();
        let mc_cross = cross / n_f;
        for i in 0..3 {
            for j in 0..3 {
                let se = ((a[(i, i)] * a[(j, j)] + a[(i, j)].powi(2)) / n_f).sqrt();
                assert!(
                    (mc_cov[(i, j)] - a[(i, j)]).abs() < 4.0 * se + 1e-9,
                    "joint cov ({i},{j})"
                );
                let se_c = ((a[(i, i)] * base_prior.cov()[(j, j)]
                    + b[(i, j)].powi(2))
                    / n_f)
                    .sqrt();
                assert!(
                    (mc_cross[(i, j)] - b[(i, j)]).abs() < 4.0 * se_c + 1e-9,
                    "cross block ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn null_motion_leaves_map_unchanged() {
        let mut m = StochasticMap::new(MapMode::Planar);
        m.add_object_world(&gaussian(&[1.0, 1.0, 0.1], &[0.1, 0.1, 0.01]), EntityKind::Pose2)
            .unwrap();
        m.move_entity(m.anchor(), &gaussian(&[0.5, 0.2, 0.3], &[0.02, 0.02, 0.01]))
            .unwrap();
        let before = m.clone();
        let null = Gaussian::certain(dvector![0.0, 0.0, 0.0]);
        m.move_entity(m.anchor(), &null).unwrap();
        assert_abs_diff_eq!(m.mean(), before.mean(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.cov(), before.cov(), epsilon = 1e-15);
    }

    #[test]
    fn motion_touches_only_the_movers_row_and_column() {
        let mut m = StochasticMap::new(MapMode::Planar);
        let a = m
            .add_object_relative(m.anchor(), &gaussian(&[1.0, 0.0, 0.2], &[0.01, 0.01, 0.002]), EntityKind::Pose2)
            .unwrap();
        let b = m
            .add_object_relative(a, &gaussian(&[0.5, 0.5, -0.1], &[0.02, 0.01, 0.001]), EntityKind::Pose2)
            .unwrap();
        m.move_entity(m.anchor(), &gaussian(&[1.0, 0.0, 0.1], &[0.01, 0.01, 0.001]))
            .unwrap();
        let before = m.clone();
        m.move_entity(a, &gaussian(&[0.3, -0.2, 0.05], &[0.005, 0.005, 0.0005]))
            .unwrap();
        // Blocks not in a's row/column are untouched.
        assert_abs_diff_eq!(
            m.cross_cov(m.anchor(), b).unwrap(),
            before.cross_cov(m.anchor(), b).unwrap(),
            epsilon = 0.0
        );
        assert_abs_diff_eq!(
            m.entity_cov(b).unwrap(),
            before.entity_cov(b).unwrap(),
            epsilon = 0.0
        );
        assert_abs_diff_eq!(
            m.entity_cov(m.anchor()).unwrap(),
            before.entity_cov(m.anchor()).unwrap(),
            epsilon = 0.0
        );
        // a's blocks did change.
        assert!(
            (m.entity_cov(a).unwrap() - before.entity_cov(a).unwrap()).amax() > 1e-6
        );
    }

    #[test]
    fn points_cannot_move() {
        let mut m = StochasticMap::new(MapMode::Planar);
        let p = m
            .add_object_world(&gaussian(&[1.0, 1.0], &[0.1, 0.1]), EntityKind::Point2)
            .unwrap();
        let err = m.move_entity(p, &gaussian(&[0.0, 0.0], &[0.0, 0.0]));
        assert!(matches!(err, Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn scalar_fusion_posterior() {
        // One Point2 whose x component is measured directly: prior variance
        // 1, measurement noise 1, innovation 1 → posterior (0.5, 0.5).
        let mut m = StochasticMap::new(MapMode::Planar);
        let p = m
            .add_object_world(&gaussian(&[0.0, 0.0], &[1.0, 1.0]), EntityKind::Point2)
            .unwrap();
        let sensor = sensors::coordinate_sensor(&m, p, 0, dmatrix![1.0]).unwrap();
        let diag = m.ekf_update(&sensor, &dvector![1.0]).unwrap();
        assert_abs_diff_eq!(m.entity_mean(p).unwrap()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.entity_cov(p).unwrap()[(0, 0)], 0.5, epsilon = 1e-15);
        // The y component is untouched by an x-only measurement.
        assert_abs_diff_eq!(m.entity_cov(p).unwrap()[(1, 1)], 1.0, epsilon = 1e-15);
        assert_eq!(diag.iterations, 1);
        assert!(diag.converged);
        assert_abs_diff_eq!(diag.mahalanobis_sq, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gain_limits_with_noise_scale() {
        // Huge measurement noise: gain → 0, state nearly unchanged.
        let mut m = StochasticMap::new(MapMode::Planar);
        let p = m
            .add_object_world(&gaussian(&[0.0, 0.0], &[1.0, 1.0]), EntityKind::Point2)
            .unwrap();
        let sensor = sensors::coordinate_sensor(&m, p, 0, dmatrix![1e12]).unwrap();
        let diag = m.ekf_update(&sensor, &dvector![1.0]).unwrap();
        assert!(diag.gain.amax() < 1e-10);
        assert!(m.entity_mean(p).unwrap()[0].abs() < 1e-10);

        // Huge prior uncertainty: nearly the whole innovation is applied.
        let mut m = StochasticMap::new(MapMode::Planar);
        let p = m
            .add_object_world(&gaussian(&[0.0, 0.0], &[1e12, 1.0]), EntityKind::Point2)
            .unwrap();
        let sensor = sensors::coordinate_sensor(&m, p, 0, dmatrix![1.0]).unwrap();
        m.ekf_update(&sensor, &dvector![1.0]).unwrap();
        assert_abs_diff_eq!(m.entity_mean(p).unwrap()[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn update_never_inflates_variances() {
        let mut m = StochasticMap::new(MapMode::Planar);
        let a = m
            .add_object_relative(m.anchor(), &gaussian(&[2.0, 1.0, 0.1], &[0.02, 0.02, 0.005]), EntityKind::Pose2)
            .unwrap();
        m.move_entity(m.anchor(), &gaussian(&[1.0, 0.5, 0.4], &[0.03, 0.02, 0.004]))
            .unwrap();
        let before = m.clone();
        let noise = DMatrix::from_diagonal(&dvector![0.01, 0.01, 0.002]);
        let sensor = sensors::relative_pose_sensor(&m, m.anchor(), a, noise).unwrap();
        let z = dvector![1.1, 0.4, -0.25];
        m.ekf_update(&sensor, &z).unwrap();
        for i in 0..m.dim() {
            assert!(m.cov()[(i, i)] <= before.cov()[(i, i)] + 1e-12);
        }
        assert!(m.cov().trace() <= before.cov().trace() + 1e-12);
        assert!(m.symmetry_defect() < 1e-10);
    }

    #[test]
    fn linear_measurements_commute_at_first_order() {
        let build = || {
            let mut m = StochasticMap::new(MapMode::Planar);
            let p = m
                .add_object_world(&gaussian(&[1.0, 2.0], &[1.0, 2.0]), EntityKind::Point2)
                .unwrap();
            (m, p)
        };
        let (mut m1, p1) = build();
        let sx = sensors::coordinate_sensor(&m1, p1, 0, dmatrix![0.5]).unwrap();
        let sy = sensors::coordinate_sensor(&m1, p1, 1, dmatrix![0.25]).unwrap();
        m1.ekf_update(&sx, &dvector![1.4]).unwrap();
        m1.ekf_update(&sy, &dvector![1.7]).unwrap();

        let (mut m2, _) = build();
        m2.ekf_update(&sy, &dvector![1.7]).unwrap();
        m2.ekf_update(&sx, &dvector![1.4]).unwrap();

        assert_abs_diff_eq!(m1.mean(), m2.mean(), epsilon = 1e-9);
        assert_abs_diff_eq!(m1.cov(), m2.cov(), epsilon = 1e-9);
    }

    #[test]
    fn iekf_on_linear_sensor_equals_ekf_in_one_iteration() {
        let build = || {
            let mut m = StochasticMap::new(MapMode::Planar);
            let p = m
                .add_object_world(&gaussian(&[0.2, -0.4], &[1.0, 2.0]), EntityKind::Point2)
                .unwrap();
            (m, p)
        };
        let (mut ekf_map, p) = build();
        let sensor = sensors::coordinate_sensor(&ekf_map, p, 0, dmatrix![0.5]).unwrap();
        let ekf_diag = ekf_map.ekf_update(&sensor, &dvector![1.0]).unwrap();
        assert_eq!(ekf_diag.iterations, 1);

        let (mut iekf_map, _) = build();
        let iekf_diag = iekf_map.iekf_update(&sensor, &dvector![1.0], 1e-12, 30).unwrap();
        assert_eq!(iekf_diag.iterations, 1, "relinearization is a no-op");
        assert!(iekf_diag.converged);
        assert_abs_diff_eq!(ekf_map.mean(), iekf_map.mean(), epsilon = 0.0);
        assert_abs_diff_eq!(ekf_map.cov(), iekf_map.cov(), epsilon = 0.0);
    }

    #[test]
    fn iekf_with_infinite_tolerance_is_exactly_ekf() {
        let build = || {
            let mut m = StochasticMap::new(MapMode::Planar);
            let a = m
                .add_object_relative(
                    m.anchor(),
                    &gaussian(&[2.0, 1.0, 0.4], &[0.05, 0.05, 0.02]),
                    EntityKind::Pose2,
                )
                .unwrap();
            m.move_entity(m.anchor(), &gaussian(&[1.0, 0.3, 0.5], &[0.04, 0.04, 0.01]))
                .unwrap();
            (m, a)
        };
        let (mut ekf_map, a) = build();
        let noise = DMatrix::from_diagonal(&dvector![0.01, 0.01, 0.004]);
        let sensor = sensors::relative_pose_sensor(&ekf_map, ekf_map.anchor(), a, noise).unwrap();
        let z = dvector![0.9, 0.8, -0.2];
        ekf_map.ekf_update(&sensor, &z).unwrap();

        let (mut iekf_map, _) = build();
        let diag = iekf_map.iekf_update(&sensor, &z, f64::INFINITY, 30).unwrap();
        assert_eq!(diag.iterations, 1);
        assert_abs_diff_eq!(ekf_map.mean(), iekf_map.mean(), epsilon = 0.0);
        assert_abs_diff_eq!(ekf_map.cov(), iekf_map.cov(), epsilon = 0.0);
    }

    #[test]
    fn iekf_beats_single_ekf_step_on_the_rectangle_constraint() {
        let corners = [[2.1, 0.15], [1.9, 1.1], [-0.2, 0.9], [0.1, -0.15]];
        let build = || {
            let mut m = StochasticMap::new(MapMode::Planar);
            let ids: Vec<_> = corners
                .iter()
                .map(|c| {
                    m.add_object_world(&gaussian(c, &[0.01, 0.01]), EntityKind::Point2)
                        .unwrap()
                })
                .collect();
            (m, [ids[0], ids[1], ids[2], ids[3]])
        };
        let (mut ekf_map, ids) = build();
        let sensor =
            sensors::rectangle_sensor(&ekf_map, ids, DMatrix::identity(3, 3) * 1e-8).unwrap();
        let residual = |m: &StochasticMap| {
            sensor
                .measure(&m.gather_substate(sensor.touched()).unwrap())
                .unwrap()
                .norm()
        };
        let z = DVector::zeros(3);
        ekf_map.ekf_update(&sensor, &z).unwrap();
        let ekf_residual = residual(&ekf_map);

        let (mut iekf_map, _) = build();
        let diag = iekf_map.iekf_update(&sensor, &z, 1e-10, 50).unwrap();
        let iekf_residual = residual(&iekf_map);
        assert!(diag.iterations > 1, "nonlinear constraint must iterate");
        assert!(
            iekf_residual < ekf_residual,
            "iekf {iekf_residual:.3e} vs ekf {ekf_residual:.3e}"
        );
    }

    #[test]
    fn reverse_extraction_is_the_reversal_conjugate() {
        // extract(j, i) equals the reversal pushforward of extract(i, j):
        // mean ⊖-inverted, covariance conjugated by the reversal Jacobian.
        let mut m = StochasticMap::new(MapMode::Planar);
        let a = m
            .add_object_relative(
                m.anchor(),
                &gaussian(&[2.0, 1.0, 0.4], &[0.03, 0.02, 0.008]),
                EntityKind::Pose2,
            )
            .unwrap();
        m.move_entity(m.anchor(), &gaussian(&[1.0, -0.5, 0.7], &[0.02, 0.02, 0.006]))
            .unwrap();
        let fwd = m.extract_relation(m.anchor(), a).unwrap();
        let rev = m.extract_relation(a, m.anchor()).unwrap();

        let fwd_pose = Pose2::new(fwd.mean()[0], fwd.mean()[1], fwd.mean()[2]).unwrap();
        let inv = crate::transforms2d::inverse2(fwd_pose);
        assert_abs_diff_eq!(rev.mean()[0], inv.x(), epsilon = 1e-12);
        assert_abs_diff_eq!(rev.mean()[1], inv.y(), epsilon = 1e-12);
        assert_abs_diff_eq!(rev.mean()[2], inv.phi(), epsilon = 1e-12);

        let j = crate::transforms2d::jac_inverse2(fwd_pose, inv);
        let j = DMatrix::from_fn(3, 3, |r, c| j[(r, c)]);
        let conjugated = &j * fwd.cov() * j.transpose();
        assert_abs_diff_eq!(rev.cov(), &conjugated, epsilon = 1e-12);
    }

    #[test]
    fn covariance_stays_symmetric_through_random_operation_sequences() {
        let rng = crate::rng::CounterRng::new(55, 0);
        let mut draw = 0u64;
        let mut g = |d: &mut u64| {
            let v = rng.gauss(*d);
            *d += 1;
            v
        };
        let mut m = StochasticMap::new(MapMode::Planar);
        let mut poses = vec![m.anchor()];
        for round in 0..30 {
            match round % 4 {
                0 => {
                    let rel = gaussian(
                        &[2.0 + g(&mut draw), g(&mut draw), 0.3 * g(&mut draw)],
                        &[0.02, 0.02, 0.005],
                    );
                    poses.push(
                        m.add_object_relative(poses[round % poses.len()], &rel, EntityKind::Pose2)
                            .unwrap(),
                    );
                }
                1 => {
                    let control = gaussian(
                        &[1.0, 0.2 * g(&mut draw), 0.2 * g(&mut draw)],
                        &[0.01, 0.01, 0.004],
                    );
                    m.move_entity(m.anchor(), &control).unwrap();
                }
                2 => {
                    let target = poses[1 + round % (poses.len() - 1)];
                    if target != m.anchor() {
                        let noise = DMatrix::from_diagonal(&dvector![0.01, 0.01, 0.003]);
                        let sensor =
                            sensors::relative_pose_sensor(&m, m.anchor(), target, noise).unwrap();
                        let expected = m.extract_relation(m.anchor(), target).unwrap();
                        let z = DVector::from_fn(3, |i, _| {
                            expected.mean()[i] + 0.05 * g(&mut draw)
                        });
                        m.ekf_update(&sensor, &z).unwrap();
                    }
                }
                _ => {
                    let i = poses[round % poses.len()];
                    let j = poses[(round + 1) % poses.len()];
                    let _ = m.extract_relation(i, j).unwrap();
                }
            }
            assert!(m.symmetry_defect() < 1e-10, "round {round}");
            for idx in m.state_angle_indices() {
                let v = m.mean()[idx];
                assert!(v > -PI && v <= PI, "angle {idx} out of range: {v}");
            }
        }
    }

    #[test]
    fn fully_correlated_pair_extracts_to_zero_covariance() {
        let mut m = StochasticMap::new(MapMode::Planar);
        let a = m
            .add_object_world(&gaussian(&[1.0, 2.0, 0.5], &[0.3, 0.2, 0.1]), EntityKind::Pose2)
            .unwrap();
        // Zero-noise relative insertion makes b a deterministic function
        // of a; their relation must carry no uncertainty.
        let rel = Gaussian::certain(dvector![0.7, -0.3, 0.2]);
        let b = m.add_object_relative(a, &rel, EntityKind::Pose2).unwrap();
        let extracted = m.extract_relation(a, b).unwrap();
        assert_abs_diff_eq!(extracted.mean(), rel.mean(), epsilon = 1e-12);
        assert!(extracted.cov().amax() < 1e-12);
    }

    #[test]
    fn gate_accepts_exact_and_rejects_distant() {
        let expected = gaussian(&[1.0, 2.0, 0.1], &[0.01, 0.01, 0.001]);
        let noise = DMatrix::from_diagonal(&dvector![0.01, 0.01, 0.001]);
        let (ok, d2) =
            mahalanobis_gate(&expected, &dvector![1.0, 2.0, 0.1], &noise, 0.999, &[2]).unwrap();
        assert!(ok);
        assert_abs_diff_eq!(d2, 0.0, epsilon = 1e-12);

        let (ok, d2) =
            mahalanobis_gate(&expected, &dvector![3.0, 2.0, 0.1], &noise, 0.999, &[2]).unwrap();
        assert!(!ok);
        assert!(d2 > 16.266);
    }

    #[test]
    fn gate_threshold_is_chi_square() {
        // d² exactly at the 3-DOF 0.999 quantile is accepted; just above
        // is rejected.
        let q = chi_square_quantile(0.999, 3).unwrap();
        assert_abs_diff_eq!(q, 16.266, epsilon = 1e-3);
        let expected = gaussian(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        let noise = DMatrix::zeros(3, 3);
        let r = (q - 1e-9).sqrt();
        let (ok, _) =
            mahalanobis_gate(&expected, &dvector![r, 0.0, 0.0], &noise, 0.999, &[]).unwrap();
        assert!(ok);
        let r = (q + 1e-6).sqrt();
        let (ok, _) =
            mahalanobis_gate(&expected, &dvector![r, 0.0, 0.0], &noise, 0.999, &[]).unwrap();
        assert!(!ok);
    }

    #[test]
    fn state_serialization_round_trips() {
        let mut m = StochasticMap::new(MapMode::Planar);
        m.add_object_relative(m.anchor(), &gaussian(&[2.0, 1.0, 0.3], &[0.04, 0.04, 0.01]), EntityKind::Pose2)
            .unwrap();
        m.move_entity(m.anchor(), &gaussian(&[1.0, 0.0, PI / 4.0], &[0.02, 0.02, 0.005]))
            .unwrap();
        let state = m.to_state();
        let json = serde_json::to_string(&state).unwrap();
        let back: MapState = serde_json::from_str(&json).unwrap();
        let restored = StochasticMap::from_state(&back).unwrap();
        // Bit-exact equality after the JSON round trip.
        assert_eq!(m.mean().as_slice(), restored.mean().as_slice());
        assert_eq!(m.cov().as_slice(), restored.cov().as_slice());
    }

    #[test]
    fn unknown_entities_are_reported() {
        let m = StochasticMap::new(MapMode::Planar);
        let bogus = EntityId(7);
        assert!(matches!(m.entity_mean(bogus), Err(Error::UnknownEntity(7))));
        assert!(matches!(
            m.extract_relation(m.anchor(), bogus),
            Err(Error::UnknownEntity(7))
        ));
    }

    #[test]
    fn mode_kind_compatibility() {
        let mut m3 = StochasticMap::new(MapMode::Euler3);
        let err = m3.add_object_world(&gaussian(&[0.0, 0.0], &[1.0, 1.0]), EntityKind::Point2);
        assert!(matches!(err, Err(Error::KindMismatch { .. })));
        let mut m2 = StochasticMap::new(MapMode::Planar);
        let err = m2.add_object_world(
            &gaussian(&[0.0; 6], &[1.0; 6]),
            EntityKind::Pose3,
        );
        assert!(matches!(err, Err(Error::KindMismatch { .. })));
    }
}
