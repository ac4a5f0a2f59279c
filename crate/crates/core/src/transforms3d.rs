//! 6-DOF relationship algebra for two orientation conventions.
//!
//! A spatial relationship is (x, y, z, φ, θ, ψ) with the orientation read
//! either as Euler angles
//!
//! ```text
//! Euler(φ, θ, ψ) = Rot(z, φ)·Rot(y′, θ)·Rot(z″, ψ)
//! ```
//!
//! or as roll-pitch-yaw angles
//!
//! ```text
//! RPY(φ, θ, ψ) = Rot(z, φ)·Rot(y′, θ)·Rot(x″, ψ)
//! ```
//!
//! Head-to-tail composition uses T₃ = R₁·t₂ + t₁ and R₃ = R₁·R₂ with the
//! angles recovered by two-argument arctangents (θ in [0, π] for Euler,
//! [−π/2, π/2] for RPY at the extraction branch).
//!
//! Jacobian translation blocks are assembled from the analytic rotation
//! generators; the angle blocks come from the angular-velocity chain rule
//! K₁ = E₃⁻¹·E₁ and K₂ = E₃⁻¹·R₁·E₂, where E maps angle rates to the
//! spatial angular velocity. Published closed-form tables for these blocks
//! are easy to mistranscribe, so every entry produced here is validated
//! against central finite differences in the test suite.
//!
//! Both parameterizations are singular — Euler at sin θ = 0, RPY at
//! cos θ = 0. Jacobian evaluation is refused when [`singularity_margin`]
//! falls below [`SINGULARITY_REJECT`]; accuracy already degrades below
//! [`SINGULARITY_WARN`].

use nalgebra::{Matrix3, SMatrix, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::propagate::{default_fd_steps, finite_difference_jacobian_wrapped};
use crate::transforms2d::{normalize_angle, wrap_angle};

/// Jacobian of a two-operand 6-DOF operation.
pub type Jacobian3Pair = SMatrix<f64, 6, 12>;
/// Jacobian of a single-operand 6-DOF operation.
pub type Jacobian3Single = SMatrix<f64, 6, 6>;

/// Below this margin, Jacobian evaluation is rejected.
pub const SINGULARITY_REJECT: f64 = 1e-6;
/// Below this margin, covariance estimates lose accuracy; callers may warn.
pub const SINGULARITY_WARN: f64 = 0.05;

/// Orientation reading of the three angle variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AngleConvention {
    /// z-y′-z″ Euler angles.
    Euler,
    /// z-y′-x″ roll-pitch-yaw angles.
    Rpy,
}

/// A 6-DOF relationship: translation in meters, three angles in radians
/// normalized to (−π, π], and the convention tag fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    x: f64,
    y: f64,
    z: f64,
    phi: f64,
    theta: f64,
    psi: f64,
    convention: AngleConvention,
}

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot3(Matrix3<f64>);

impl Rot3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Largest deviation from orthonormality, max|RᵀR − I|.
    pub fn orthonormality_defect(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }
}

impl Pose3 {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x: f64,
        y: f64,
        z: f64,
        phi: f64,
        theta: f64,
        psi: f64,
        convention: AngleConvention,
    ) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::InvalidValue(format!("translation ({x}, {y}, {z})")));
        }
        Ok(Pose3 {
            x,
            y,
            z,
            phi: normalize_angle(phi)?,
            theta: normalize_angle(theta)?,
            psi: normalize_angle(psi)?,
            convention,
        })
    }

    pub fn identity(convention: AngleConvention) -> Self {
        Pose3 {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            phi: 0.0,
            theta: 0.0,
            psi: 0.0,
            convention,
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }
    pub fn phi(&self) -> f64 {
        self.phi
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn psi(&self) -> f64 {
        self.psi
    }
    pub fn convention(&self) -> AngleConvention {
        self.convention
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn angles(&self) -> Vector3<f64> {
        Vector3::new(self.phi, self.theta, self.psi)
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.x, self.y, self.z, self.phi, self.theta, self.psi)
    }

    pub fn from_vector(v: &Vector6<f64>, convention: AngleConvention) -> Result<Self> {
        Pose3::new(v[0], v[1], v[2], v[3], v[4], v[5], convention)
    }

    pub fn from_slice(s: &[f64], convention: AngleConvention) -> Result<Self> {
        if s.len() != 6 {
            return Err(Error::ShapeMismatch {
                expected: "6 components".into(),
                got: format!("{}", s.len()),
            });
        }
        Pose3::new(s[0], s[1], s[2], s[3], s[4], s[5], convention)
    }
}

/// Rotation matrix of a pose under its convention.
pub fn rot_of_pose(p: &Pose3) -> Rot3 {
    let (sp, cp) = p.phi.sin_cos();
    let (st, ct) = p.theta.sin_cos();
    let (ss, cs) = p.psi.sin_cos();
    let m = match p.convention {
        AngleConvention::Euler => Matrix3::new(
            cp * ct * cs - sp * ss,
            -cp * ct * ss - sp * cs,
            cp * st,
            sp * ct * cs + cp * ss,
            -sp * ct * ss + cp * cs,
            sp * st,
            -st * cs,
            st * ss,
            ct,
        ),
        AngleConvention::Rpy => Matrix3::new(
            cp * ct,
            cp * st * ss - sp * cs,
            cp * st * cs + sp * ss,
            sp * ct,
            sp * st * ss + cp * cs,
            sp * st * cs - cp * ss,
            -st,
            ct * ss,
            ct * cs,
        ),
    };
    Rot3(m)
}

/// Recover (φ, θ, ψ) from a rotation matrix under the given convention.
/// At the gimbal-locked orientation the φ = 0 representative is returned.
pub fn angles_from_rot(r: &Matrix3<f64>, convention: AngleConvention) -> Vector3<f64> {
    match convention {
        AngleConvention::Euler => {
            // Third column is (cφ·sθ, sφ·sθ, cθ).
            let phi = f64::atan2(r[(1, 2)], r[(0, 2)]);
            let (sp, cp) = phi.sin_cos();
            let theta = f64::atan2(r[(0, 2)] * cp + r[(1, 2)] * sp, r[(2, 2)]);
            let psi = f64::atan2(
                -r[(0, 0)] * sp + r[(1, 0)] * cp,
                -r[(0, 1)] * sp + r[(1, 1)] * cp,
            );
            Vector3::new(phi, theta, psi)
        }
        AngleConvention::Rpy => {
            // First column is (cφ·cθ, sφ·cθ, −sθ).
            let phi = f64::atan2(r[(1, 0)], r[(0, 0)]);
            let (sp, cp) = phi.sin_cos();
            let theta = f64::atan2(-r[(2, 0)], r[(0, 0)] * cp + r[(1, 0)] * sp);
            let psi = f64::atan2(
                r[(0, 2)] * sp - r[(1, 2)] * cp,
                r[(1, 1)] * cp - r[(0, 1)] * sp,
            );
            Vector3::new(phi, theta, psi)
        }
    }
}

fn require_same_convention(a: &Pose3, b: &Pose3) -> Result<AngleConvention> {
    if a.convention != b.convention {
        return Err(Error::ConventionMismatch);
    }
    Ok(a.convention)
}

/// Head-to-tail resultant a ⊕ b: T = R₁·t₂ + t₁ and angles extracted from
/// R₁·R₂.
pub fn compose3(a: &Pose3, b: &Pose3) -> Result<Pose3> {
    let convention = require_same_convention(a, b)?;
    let r1 = rot_of_pose(a).0;
    let r3 = r1 * rot_of_pose(b).0;
    let t = r1 * b.translation() + a.translation();
    let ang = angles_from_rot(&r3, convention);
    Pose3::new(t.x, t.y, t.z, ang.x, ang.y, ang.z, convention)
}

/// Reverse relationship ⊖p: translation −Rᵀ·t, angles (−ψ, −θ, −φ) for
/// Euler and re-extracted from Rᵀ for RPY.
pub fn inverse3(p: &Pose3) -> Pose3 {
    let r = rot_of_pose(p).0;
    let t = -(r.transpose() * p.translation());
    let ang = match p.convention {
        AngleConvention::Euler => Vector3::new(
            wrap_angle(-p.psi),
            wrap_angle(-p.theta),
            wrap_angle(-p.phi),
        ),
        AngleConvention::Rpy => angles_from_rot(&r.transpose(), AngleConvention::Rpy),
    };
    Pose3 {
        x: t.x,
        y: t.y,
        z: t.z,
        phi: wrap_angle(ang.x),
        theta: wrap_angle(ang.y),
        psi: wrap_angle(ang.z),
        convention: p.convention,
    }
}

/// Distance from the parameterization's degenerate orientation:
/// |sin θ| for Euler, |cos θ| for RPY.
pub fn singularity_margin(p: &Pose3) -> f64 {
    match p.convention {
        AngleConvention::Euler => p.theta.sin().abs(),
        AngleConvention::Rpy => p.theta.cos().abs(),
    }
}

// Rotation generators: d/dα Rot(axis, α) = G·Rot(axis, α).
const GX: Matrix3<f64> = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
const GY: Matrix3<f64> = Matrix3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0);
const GZ: Matrix3<f64> = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);

fn rot_y(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_x(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Partial derivatives of the rotation matrix with respect to (φ, θ, ψ).
fn rot_partials(p: &Pose3) -> [Matrix3<f64>; 3] {
    let r = rot_of_pose(p).0;
    let inner = match p.convention {
        AngleConvention::Euler => rot_z(p.psi),
        AngleConvention::Rpy => rot_x(p.psi),
    };
    let d_phi = GZ * r;
    let d_theta = rot_z(p.phi) * GY * rot_y(p.theta) * inner;
    let d_psi = match p.convention {
        AngleConvention::Euler => r * GZ,
        AngleConvention::Rpy => r * GX,
    };
    [d_phi, d_theta, d_psi]
}

/// E(angles): maps angle rates to the spatial angular velocity,
/// ω = E·(φ̇, θ̇, ψ̇). Column 3 is the rotated inner axis.
fn angle_rate_map(phi: f64, theta: f64, convention: AngleConvention) -> Matrix3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    match convention {
        AngleConvention::Euler => {
            Matrix3::new(0.0, -sp, cp * st, 0.0, cp, sp * st, 1.0, 0.0, ct)
        }
        AngleConvention::Rpy => {
            Matrix3::new(0.0, -sp, cp * ct, 0.0, cp, sp * ct, 1.0, 0.0, -st)
        }
    }
}

/// Closed-form inverse of [`angle_rate_map`]. The 1/sin θ (Euler) or
/// 1/cos θ (RPY) denominators are where the singularity lives.
fn angle_rate_map_inv(phi: f64, theta: f64, convention: AngleConvention) -> Matrix3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    match convention {
        AngleConvention::Euler => Matrix3::new(
            -cp * ct / st,
            -sp * ct / st,
            1.0,
            -sp,
            cp,
            0.0,
            cp / st,
            sp / st,
            0.0,
        ),
        AngleConvention::Rpy => Matrix3::new(
            cp * st / ct,
            sp * st / ct,
            1.0,
            -sp,
            cp,
            0.0,
            cp / ct,
            sp / ct,
            0.0,
        ),
    }
}

/// Jacobian of a ⊕ b with respect to (a, b), using the precomputed
/// resultant. Block layout over (t₁, angles₁, t₂, angles₂):
///
/// ```text
/// [ I  M  R₁  0  ]
/// [ 0  K₁  0  K₂ ]
/// ```
pub fn jac_compose3(a: &Pose3, b: &Pose3, result: &Pose3) -> Result<Jacobian3Pair> {
    let convention = require_same_convention(a, b)?;
    let margin = singularity_margin(result);
    if margin < SINGULARITY_REJECT {
        return Err(Error::SingularOrientation { margin });
    }
    let r1 = rot_of_pose(a).0;
    let partials = rot_partials(a);
    let t2 = b.translation();
    let e3_inv = angle_rate_map_inv(result.phi, result.theta, convention);
    let k1 = e3_inv * angle_rate_map(a.phi, a.theta, convention);
    let k2 = e3_inv * r1 * angle_rate_map(b.phi, b.theta, convention);

    let mut j = Jacobian3Pair::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    for (col, dr) in partials.iter().enumerate() {
        j.fixed_view_mut::<3, 1>(0, 3 + col).copy_from(&(dr * t2));
    }
    j.fixed_view_mut::<3, 3>(0, 6).copy_from(&r1);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&k1);
    j.fixed_view_mut::<3, 3>(3, 9).copy_from(&k2);
    Ok(j)
}

/// Jacobian of ⊖p. Euler uses the analytic block form
///
/// ```text
/// [ −Rᵀ  N ]         N·eₐ = −(∂R/∂α)ᵀ·t,   Q = antidiag(−1, −1, −1),
/// [  0   Q ]
/// ```
///
/// which is singularity-free; the RPY reversal re-extracts angles from Rᵀ,
/// so its Jacobian is evaluated by central finite differences and is
/// rejected near the result's singularity.
pub fn jac_inverse3(p: &Pose3, result: &Pose3) -> Result<Jacobian3Single> {
    match p.convention {
        AngleConvention::Euler => {
            let r = rot_of_pose(p).0;
            let t = p.translation();
            let partials = rot_partials(p);
            let mut j = Jacobian3Single::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r.transpose()));
            for (col, dr) in partials.iter().enumerate() {
                j.fixed_view_mut::<3, 1>(0, 3 + col)
                    .copy_from(&(-(dr.transpose() * t)));
            }
            j[(3, 5)] = -1.0;
            j[(4, 4)] = -1.0;
            j[(5, 3)] = -1.0;
            Ok(j)
        }
        AngleConvention::Rpy => {
            let margin = singularity_margin(result);
            if margin < SINGULARITY_REJECT {
                return Err(Error::SingularOrientation { margin });
            }
            let x = nalgebra::DVector::from_column_slice(p.to_vector().as_slice());
            let f = |v: &nalgebra::DVector<f64>| {
                let pose = Pose3 {
                    x: v[0],
                    y: v[1],
                    z: v[2],
                    phi: v[3],
                    theta: v[4],
                    psi: v[5],
                    convention: AngleConvention::Rpy,
                };
                let inv = inverse3(&pose);
                nalgebra::DVector::from_column_slice(inv.to_vector().as_slice())
            };
            let jd = finite_difference_jacobian_wrapped(f, &x, &default_fd_steps(&x), &[3, 4, 5])?;
            let mut j = Jacobian3Single::zeros();
            for r in 0..6 {
                for c in 0..6 {
                    j[(r, c)] = jd[(r, c)];
                }
            }
            Ok(j)
        }
    }
}

/// Tail-to-tail combination ⊖a ⊕ b with its chained Jacobian
/// [J1⊕·J⊖ | J2⊕] over (a, b).
pub fn tail_to_tail3(a_wi: &Pose3, a_wj: &Pose3) -> Result<(Pose3, Jacobian3Pair)> {
    let inv = inverse3(a_wi);
    let rel = compose3(&inv, a_wj)?;
    let j_plus = jac_compose3(&inv, a_wj, &rel)?;
    let j_minus = jac_inverse3(a_wi, &inv)?;
    let left = j_plus.fixed_view::<6, 6>(0, 0) * j_minus;
    let mut j = Jacobian3Pair::zeros();
    j.fixed_view_mut::<6, 6>(0, 0).copy_from(&left);
    j.fixed_view_mut::<6, 6>(0, 6)
        .copy_from(&j_plus.fixed_view::<6, 6>(0, 6).clone_owned());
    Ok((rel, j))
}
