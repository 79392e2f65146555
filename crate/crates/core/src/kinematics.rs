//! Collision kinematics: 3-vectors, the elastic pair collision along a unit
//! direction, and the pair rotations used to build conservative currents.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Tolerance for accepting a direction as a unit vector.
pub const UNIT_TOL: f64 = 1e-12;

/// Relative threshold below which two spatial points count as coincident.
pub const COINCIDENT_TOL: f64 = 1e-12;

/// A point or vector in R^3.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    #[inline]
    pub fn splat(a: f64) -> Self {
        Vec3 { x: a, y: a, z: a }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Component by index 0..=2.
    #[inline]
    pub fn component(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("Vec3 component index out of range: {i}"),
        }
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    /// Unit vector with the same direction; errors on (near-)zero input.
    pub fn normalized(self) -> Result<Vec3> {
        let n = self.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "cannot normalize vector with norm {n}"
            )));
        }
        Ok(self / n)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, a: f64) -> Vec3 {
        Vec3::new(self.x * a, self.y * a, self.z * a)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, a: f64) -> Vec3 {
        Vec3::new(self.x / a, self.y / a, self.z / a)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl SubAssign for Vec3 {
    #[inline]
    fn sub_assign(&mut self, o: Vec3) {
        self.x -= o.x;
        self.y -= o.y;
        self.z -= o.z;
    }
}

/// Symmetric use only: a plain 3x3 matrix of f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);

    pub fn identity() -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Mat3(m)
    }

    pub fn scaled_identity(a: f64) -> Mat3 {
        let mut m = Mat3::identity();
        for i in 0..3 {
            m.0[i][i] *= a;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[i][j]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn scale(&self, a: f64) -> Mat3 {
        let mut m = *self;
        for row in m.0.iter_mut() {
            for v in row.iter_mut() {
                *v *= a;
            }
        }
        m
    }

    pub fn add(&self, o: &Mat3) -> Mat3 {
        let mut m = *self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] += o.0[i][j];
            }
        }
        m
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.0[0][0] * v.x + self.0[0][1] * v.y + self.0[0][2] * v.z,
            self.0[1][0] * v.x + self.0[1][1] * v.y + self.0[1][2] * v.z,
            self.0[2][0] * v.x + self.0[2][1] * v.y + self.0[2][2] * v.z,
        )
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for row in &self.0 {
            for v in row {
                m = m.max(v.abs());
            }
        }
        m
    }

    /// Whether the symmetric part is positive semidefinite, by attempting a
    /// Cholesky factorization with a small diagonal slack.
    pub fn is_psd(&self, slack: f64) -> bool {
        let mut a = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = 0.5 * (self.0[i][j] + self.0[j][i]);
            }
            a[i][i] += slack;
        }
        let mut l = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..=i {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    if s < 0.0 {
                        return false;
                    }
                    l[i][i] = s.sqrt();
                } else if l[j][j] == 0.0 {
                    if s.abs() > slack {
                        return false;
                    }
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        true
    }
}

/// Post-collision velocity pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionPair {
    pub v_prime: Vec3,
    pub w_prime: Vec3,
}

/// Pair rotated in the block plane spanned by its two members.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedPair {
    pub a: Vec3,
    pub b: Vec3,
}

/// Elastic collision exchanging the velocity components along the unit
/// direction `n`:
///
/// `v' = v - (v - w | n) n`,  `w' = w + (v - w | n) n`.
///
/// Errors unless `n` is a unit vector to within [`UNIT_TOL`] and all inputs
/// are finite. The map preserves total momentum and kinetic energy, is an
/// involution, and is invariant under `n -> -n`.
pub fn collide(v: Vec3, w: Vec3, n: Vec3) -> Result<CollisionPair> {
    if !v.is_finite() || !w.is_finite() || !n.is_finite() {
        return Err(Error::InvalidInput("collide: non-finite input".into()));
    }
    if (n.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidInput(format!(
            "collide: |n| = {} is not within {UNIT_TOL} of 1",
            n.norm()
        )));
    }
    Ok(collide_unit(v, w, n))
}

/// Same as [`collide`] but trusts `n` to be unit; used in hot loops where the
/// direction comes from a normalized difference or a sphere rule.
#[inline]
pub(crate) fn collide_unit(v: Vec3, w: Vec3, n: Vec3) -> CollisionPair {
    debug_assert!((n.norm() - 1.0).abs() < 1e-9);
    let z = (v - w).dot(n);
    CollisionPair {
        v_prime: v - n * z,
        w_prime: w + n * z,
    }
}

/// Unit vector from `y` toward `x`: `(x - y)/|x - y|`.
///
/// Errors when the points are coincident relative to their magnitudes
/// (`|x - y| < COINCIDENT_TOL * (1 + |x| + |y|)`).
pub fn unit_between(x: Vec3, y: Vec3) -> Result<Vec3> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::InvalidInput("unit_between: non-finite input".into()));
    }
    let d = x - y;
    let r = d.norm();
    if r < COINCIDENT_TOL * (1.0 + x.norm() + y.norm()) {
        return Err(Error::DegenerateGeometry(format!(
            "unit_between: points coincide (|x - y| = {r})"
        )));
    }
    Ok(d / r)
}

/// Block rotation of the pair `(a, b)` by angle `theta` in the plane that
/// swaps the two slots:
///
/// `a_theta = cos(theta) a + sin(theta) b`,
/// `b_theta = -sin(theta) a + cos(theta) b`.
///
/// As an 6x6 map this is orthogonal, so it preserves `|a|^2 + |b|^2` and the
/// pair `(a_theta, b_theta)` at `-theta` inverts the rotation.
#[inline]
pub fn rotate_pair(a: Vec3, b: Vec3, theta: f64) -> RotatedPair {
    let (s, c) = theta.sin_cos();
    RotatedPair {
        a: a * c + b * s,
        b: b * c - a * s,
    }
}

/// Orthonormal pair completing a unit normal to a right-handed frame.
///
/// The seed axis is the coordinate direction least aligned with `n`, which
/// keeps the construction stable; errors only when `n` is degenerate.
pub fn frame_from(n: Vec3) -> Result<(Vec3, Vec3)> {
    let ax = n.x.abs();
    let ay = n.y.abs();
    let az = n.z.abs();
    let seed = if ax <= ay && ax <= az {
        Vec3::new(1.0, 0.0, 0.0)
    } else if ay <= az {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(0.0, 0.0, 1.0)
    };
    let e1 = n.cross(seed).normalized()?;
    let e2 = n.cross(e1);
    Ok((e1, e2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn collide_axis_example() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        let w = Vec3::new(4.0, 5.0, 6.0);
        let n = Vec3::new(0.0, 0.0, 1.0);
        let out = collide(v, w, n).unwrap();
        assert_eq!(out.v_prime, Vec3::new(1.0, 2.0, 6.0));
        assert_eq!(out.w_prime, Vec3::new(4.0, 5.0, 3.0));
    }

    #[test]
    fn collide_rejects_non_unit_direction() {
        let v = Vec3::new(1.0, 0.0, 0.0);
        let w = Vec3::ZERO;
        let err = collide(v, w, Vec3::new(0.0, 0.0, 1.0 + 1e-6)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn collide_grazing_is_identity() {
        // (v - w) orthogonal to n leaves both velocities unchanged.
        let v = Vec3::new(1.0, 2.0, 0.0);
        let w = Vec3::new(-1.0, 5.0, 0.0);
        let n = Vec3::new(0.0, 0.0, 1.0);
        let out = collide(v, w, n).unwrap();
        assert_eq!(out.v_prime, v);
        assert_eq!(out.w_prime, w);
    }

    #[test]
    fn unit_between_rejects_coincident_points() {
        let x = Vec3::new(1.0, 1.0, 1.0);
        let err = unit_between(x, x).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry(_)));
        // Just above the relative threshold it must succeed.
        let y = x + Vec3::new(1e-9, 0.0, 0.0);
        assert!(unit_between(x, y).is_ok());
    }

    #[test]
    fn rotate_pair_quarter_turn_swaps() {
        let a = Vec3::new(1.0, 0.0, 2.0);
        let b = Vec3::new(0.0, -1.0, 3.0);
        let r = rotate_pair(a, b, std::f64::consts::FRAC_PI_2);
        assert_abs_diff_eq!(r.a.x, b.x, epsilon = 1e-15);
        assert_abs_diff_eq!(r.b.x, -a.x, epsilon = 1e-15);
        assert_abs_diff_eq!(r.a.z, b.z, epsilon = 1e-15);
        assert_abs_diff_eq!(r.b.z, -a.z, epsilon = 1e-15);
    }

    #[test]
    fn psd_check_accepts_identity_rejects_indefinite() {
        assert!(Mat3::identity().is_psd(1e-12));
        let mut m = Mat3::identity();
        m.0[2][2] = -1.0;
        assert!(!m.is_psd(1e-12));
    }

    fn any_vec3(range: f64) -> impl Strategy<Value = Vec3> {
        (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn collide_conserves_momentum_and_energy(
            v in any_vec3(10.0),
            w in any_vec3(10.0),
            dir in any_vec3(1.0),
        ) {
            prop_assume!(dir.norm() > 1e-3);
            let n = dir.normalized().unwrap();
            let out = collide(v, w, n).unwrap();
            let dm = (out.v_prime + out.w_prime) - (v + w);
            prop_assert!(dm.norm() < 1e-12 * (1.0 + v.norm() + w.norm()));
            let de = out.v_prime.norm_sq() + out.w_prime.norm_sq() - v.norm_sq() - w.norm_sq();
            prop_assert!(de.abs() < 1e-10 * (1.0 + v.norm_sq() + w.norm_sq()));
        }

        #[test]
        fn collide_is_involution_and_sign_invariant(
            v in any_vec3(10.0),
            w in any_vec3(10.0),
            dir in any_vec3(1.0),
        ) {
            prop_assume!(dir.norm() > 1e-3);
            let n = dir.normalized().unwrap();
            let once = collide(v, w, n).unwrap();
            let twice = collide(once.v_prime, once.w_prime, n).unwrap();
            prop_assert!((twice.v_prime - v).norm() < 1e-10 * (1.0 + v.norm() + w.norm()));
            prop_assert!((twice.w_prime - w).norm() < 1e-10 * (1.0 + v.norm() + w.norm()));

            let flipped = collide(v, w, -n).unwrap();
            prop_assert!((flipped.v_prime - once.v_prime).norm() < 1e-12 * (1.0 + v.norm()));
            prop_assert!((flipped.w_prime - once.w_prime).norm() < 1e-12 * (1.0 + w.norm()));

            // Normal relative speed flips sign under collision.
            let z = (v - w).dot(n);
            let zp = (once.v_prime - once.w_prime).dot(n);
            prop_assert!((zp + z).abs() < 1e-10 * (1.0 + z.abs()));
        }

        #[test]
        fn rotate_pair_is_orthogonal(
            a in any_vec3(10.0),
            b in any_vec3(10.0),
            theta in 0.0..std::f64::consts::FRAC_PI_2,
        ) {
            let r = rotate_pair(a, b, theta);
            let before = a.norm_sq() + b.norm_sq();
            let after = r.a.norm_sq() + r.b.norm_sq();
            prop_assert!((before - after).abs() < 1e-10 * (1.0 + before));
            let back = rotate_pair(r.a, r.b, -theta);
            prop_assert!((back.a - a).norm() < 1e-10 * (1.0 + a.norm()));
            prop_assert!((back.b - b).norm() < 1e-10 * (1.0 + b.norm()));
        }
    }
}
