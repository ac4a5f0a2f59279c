//! Exact 3-DOF relationship algebra.
//!
//! A planar relationship between two frames is the vector (x, y, φ).
//! Head-to-tail composition (⊕), reversal (⊖), and the tail-to-tail
//! combination ⊖a ⊕ b are provided together with their analytic Jacobians,
//! which are evaluated from the already-computed resultant:
//!
//! ```text
//! a ⊕ b = [ xb·cos φa − yb·sin φa + xa ]        ⊖a = [ −xa·cos φa − ya·sin φa ]
//!         [ xb·sin φa + yb·cos φa + ya ]             [  xa·sin φa − ya·cos φa ]
//!         [ φa + φb                    ]             [ −φa                    ]
//! ```
//!
//! All angles are kept in the half-open interval (−π, π], with −π mapping
//! to +π.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};

/// Jacobian of a two-operand pose operation (3 outputs × 6 inputs).
pub type Jacobian2Pair = SMatrix<f64, 3, 6>;
/// Jacobian of a single-operand pose operation.
pub type Jacobian2Single = Matrix3<f64>;

/// Wrap a finite angle into (−π, π]; −π maps to +π.
pub fn normalize_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::InvalidValue(format!("angle {theta}")));
    }
    Ok(wrap_angle(theta))
}

/// Wrapping core without the finiteness check, for values already validated.
/// In-range values pass through bit-exactly.
#[inline]
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    PI - (PI - theta).rem_euclid(TAU)
}

/// Difference θ1 − θ2 expressed in (−π, π].
pub fn angle_difference(theta1: f64, theta2: f64) -> Result<f64> {
    normalize_angle(theta1 - theta2)
}

/// A planar relationship: translation (x, y) in meters and heading φ in
/// radians, normalized to (−π, π].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    x: f64,
    y: f64,
    phi: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, phi: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::InvalidValue(format!("pose ({x}, {y}, {phi})")));
        }
        Ok(Pose2 {
            x,
            y,
            phi: normalize_angle(phi)?,
        })
    }

    pub fn identity() -> Self {
        Pose2 {
            x: 0.0,
            y: 0.0,
            phi: 0.0,
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.phi)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Result<Self> {
        Pose2::new(v.x, v.y, v.z)
    }

    /// Slice accessor used when poses live inside a larger state vector.
    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3 components".into(),
                got: format!("{}", s.len()),
            });
        }
        Pose2::new(s[0], s[1], s[2])
    }
}

/// Head-to-tail resultant a ⊕ b.
pub fn compose2(a: Pose2, b: Pose2) -> Pose2 {
    let (s, c) = a.phi.sin_cos();
    Pose2 {
        x: b.x * c - b.y * s + a.x,
        y: b.x * s + b.y * c + a.y,
        phi: wrap_angle(a.phi + b.phi),
    }
}

/// Reverse relationship ⊖a: the same link expressed from the other frame.
pub fn inverse2(a: Pose2) -> Pose2 {
    let (s, c) = a.phi.sin_cos();
    Pose2 {
        x: -a.x * c - a.y * s,
        y: a.x * s - a.y * c,
        phi: wrap_angle(-a.phi),
    }
}

/// Jacobian of a ⊕ b with respect to (a, b), evaluated with the
/// precomputed resultant. Columns 0..3 are the left half (∂/∂a),
/// columns 3..6 the right half (∂/∂b).
pub fn jac_compose2(a: Pose2, _b: Pose2, result: Pose2) -> Jacobian2Pair {
    let (s, c) = a.phi.sin_cos();
    let mut j = Jacobian2Pair::zeros();
    j[(0, 0)] = 1.0;
    j[(1, 1)] = 1.0;
    j[(2, 2)] = 1.0;
    j[(0, 2)] = -(result.y - a.y);
    j[(1, 2)] = result.x - a.x;
    j[(0, 3)] = c;
    j[(0, 4)] = -s;
    j[(1, 3)] = s;
    j[(1, 4)] = c;
    j[(2, 5)] = 1.0;
    j
}

/// Jacobian of ⊖a, evaluated with the precomputed reversed coordinates.
pub fn jac_inverse2(a: Pose2, result: Pose2) -> Jacobian2Single {
    let (s, c) = a.phi.sin_cos();
    Matrix3::new(
        -c, -s, result.y, //
        s, -c, -result.x, //
        0.0, 0.0, -1.0,
    )
}

/// Tail-to-tail combination ⊖a ⊕ b with its chained Jacobian
/// [J1⊕·J⊖ | J2⊕] over (a, b). Both inputs must share a base frame.
pub fn tail_to_tail2(a_wi: Pose2, a_wj: Pose2) -> (Pose2, Jacobian2Pair) {
    let inv = inverse2(a_wi);
    let rel = compose2(inv, a_wj);
    let j_plus = jac_compose2(inv, a_wj, rel);
    let j_minus = jac_inverse2(a_wi, inv);
    let left = j_plus.fixed_view::<3, 3>(0, 0) * j_minus;
    let mut j = Jacobian2Pair::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&left);
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&j_plus.fixed_view::<3, 3>(0, 3).clone_owned());
    (rel, j)
}
