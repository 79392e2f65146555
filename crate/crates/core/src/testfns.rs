//! Smooth compactly supported test functions on phase space, with exact
//! gradients, used by the weak-form, current-divergence, and entropy checks.
//!
//! The building block is the standard bump `exp(1 - 1/(1 - t^2))` on
//! `|t| < 1`; products of spatial and velocity bumps against low-degree
//! velocity polynomials give banks that are generic enough to catch sign and
//! index errors while staying closed under the gradients the identities need.

use crate::kinematics::Vec3;

/// `exp(1 - 1/(1 - t^2))` for `|t| < 1`, zero outside; peak value 1 at 0.
#[inline]
pub fn bump(t: f64) -> f64 {
    let t2 = t * t;
    if t2 >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - t2)).exp()
    }
}

/// `bump'(t) / t`, which stays smooth through `t = 0`:
/// `bump'(t) = -2 t bump(t) / (1 - t^2)^2`.
#[inline]
fn bump_slope_over_t(t: f64) -> f64 {
    let t2 = t * t;
    if t2 >= 1.0 {
        0.0
    } else {
        let q = 1.0 - t2;
        -2.0 * bump(t) / (q * q)
    }
}

/// Low-degree velocity polynomial factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VPoly {
    One,
    /// `v_i`
    Vi(usize),
    /// `|v|^2`
    Energy,
    /// `v_i v_j`
    ViVj(usize, usize),
    /// `(1 + a v_i)^2`, nonnegative
    AffineSq(usize, f64),
}

impl VPoly {
    pub fn eval(&self, v: Vec3) -> f64 {
        match *self {
            VPoly::One => 1.0,
            VPoly::Vi(i) => v.component(i),
            VPoly::Energy => v.norm_sq(),
            VPoly::ViVj(i, j) => v.component(i) * v.component(j),
            VPoly::AffineSq(i, a) => {
                let t = 1.0 + a * v.component(i);
                t * t
            }
        }
    }

    pub fn grad(&self, v: Vec3) -> Vec3 {
        match *self {
            VPoly::One => Vec3::ZERO,
            VPoly::Vi(i) => axis(i),
            VPoly::Energy => v * 2.0,
            VPoly::ViVj(i, j) => {
                let mut g = axis(i) * v.component(j);
                g += axis(j) * v.component(i);
                g
            }
            VPoly::AffineSq(i, a) => axis(i) * (2.0 * a * (1.0 + a * v.component(i))),
        }
    }

    fn label(&self) -> String {
        match *self {
            VPoly::One => "1".into(),
            VPoly::Vi(i) => format!("v{}", i + 1),
            VPoly::Energy => "|v|^2".into(),
            VPoly::ViVj(i, j) => format!("v{}v{}", i + 1, j + 1),
            VPoly::AffineSq(i, a) => format!("(1+{a}v{})^2", i + 1),
        }
    }
}

#[inline]
fn axis(i: usize) -> Vec3 {
    match i {
        0 => Vec3::new(1.0, 0.0, 0.0),
        1 => Vec3::new(0.0, 1.0, 0.0),
        _ => Vec3::new(0.0, 0.0, 1.0),
    }
}

/// A test function `phi(x, v)` with exact first derivatives.
#[derive(Clone, Debug)]
pub struct TestFunctionXV {
    pub name: String,
    kind: Kind,
}

#[derive(Clone, Debug)]
enum Kind {
    /// Pure velocity polynomial (no spatial factor, unbounded support).
    Poly(VPoly),
    /// `P(v) * bump(|x - cx|/rx) * bump(|v - cv|/rv)`, optionally periodic
    /// in `x_1` and optionally depending on `x_1` only.
    Product {
        vpoly: VPoly,
        x_center: Vec3,
        x_radius: f64,
        v_center: Vec3,
        v_radius: f64,
        /// Wrap `x_1 - c_1` into `[-L/2, L/2)` before measuring distance.
        wrap: Option<f64>,
        /// Measure spatial distance along `x_1` only (slab symmetry).
        x1_only: bool,
    },
}

impl TestFunctionXV {
    pub fn polynomial(p: VPoly) -> Self {
        TestFunctionXV {
            name: p.label(),
            kind: Kind::Poly(p),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn product(
        vpoly: VPoly,
        x_center: Vec3,
        x_radius: f64,
        v_center: Vec3,
        v_radius: f64,
        wrap: Option<f64>,
        x1_only: bool,
    ) -> Self {
        assert!(x_radius > 0.0 && v_radius > 0.0);
        let name = format!(
            "{}*bx({:.2};{:.2})*bv({:.2})",
            vpoly.label(),
            x_center.x,
            x_radius,
            v_radius
        );
        TestFunctionXV {
            name,
            kind: Kind::Product {
                vpoly,
                x_center,
                x_radius,
                v_center,
                v_radius,
                wrap,
                x1_only,
            },
        }
    }

    fn spatial_offset(x: Vec3, center: Vec3, wrap: Option<f64>, x1_only: bool) -> Vec3 {
        let mut d = x - center;
        if let Some(period) = wrap {
            d = Vec3::new(
                d.x - period * (d.x / period).round(),
                d.y,
                d.z,
            );
        }
        if x1_only {
            d = Vec3::new(d.x, 0.0, 0.0);
        }
        d
    }

    pub fn eval(&self, x: Vec3, v: Vec3) -> f64 {
        match &self.kind {
            Kind::Poly(p) => p.eval(v),
            Kind::Product {
                vpoly,
                x_center,
                x_radius,
                v_center,
                v_radius,
                wrap,
                x1_only,
            } => {
                let dx = Self::spatial_offset(x, *x_center, *wrap, *x1_only);
                let dv = v - *v_center;
                vpoly.eval(v) * bump(dx.norm() / x_radius) * bump(dv.norm() / v_radius)
            }
        }
    }

    pub fn grad_x(&self, x: Vec3, v: Vec3) -> Vec3 {
        match &self.kind {
            Kind::Poly(_) => Vec3::ZERO,
            Kind::Product {
                vpoly,
                x_center,
                x_radius,
                v_center,
                v_radius,
                wrap,
                x1_only,
            } => {
                let dx = Self::spatial_offset(x, *x_center, *wrap, *x1_only);
                let dv = v - *v_center;
                let bv = bump(dv.norm() / v_radius);
                let tx = dx.norm() / x_radius;
                // d/dx bump(|dx|/r) = bump'(t)/t * dx / r^2
                dx * (bump_slope_over_t(tx) / (x_radius * x_radius) * vpoly.eval(v) * bv)
            }
        }
    }

    pub fn grad_v(&self, x: Vec3, v: Vec3) -> Vec3 {
        match &self.kind {
            Kind::Poly(p) => p.grad(v),
            Kind::Product {
                vpoly,
                x_center,
                x_radius,
                v_center,
                v_radius,
                wrap,
                x1_only,
            } => {
                let dx = Self::spatial_offset(x, *x_center, *wrap, *x1_only);
                let dv = v - *v_center;
                let bx = bump(dx.norm() / x_radius);
                let tv = dv.norm() / v_radius;
                let bv = bump(tv);
                let bump_grad = dv * (bump_slope_over_t(tv) / (v_radius * v_radius));
                (vpoly.grad(v) * bv + bump_grad * vpoly.eval(v)) * bx
            }
        }
    }

    /// True when the function vanishes for `|x - c| >= r` (used to bound
    /// spatial sampling windows).
    pub fn spatial_support(&self) -> Option<(Vec3, f64)> {
        match &self.kind {
            Kind::Poly(_) => None,
            Kind::Product {
                x_center, x_radius, ..
            } => Some((*x_center, *x_radius)),
        }
    }
}

/// Generic bank of compactly supported moment-weight test functions.
///
/// `wrap` gives the slab period for periodic states (with `x_1`-only spatial
/// dependence); `None` yields fully 3-D bumps.
pub fn moment_bank(wrap: Option<f64>) -> Vec<TestFunctionXV> {
    let x1_only = wrap.is_some();
    let (c1, r1) = (Vec3::ZERO, 2.0);
    let (c2, r2) = if let Some(period) = wrap {
        (Vec3::new(0.3 * period, 0.0, 0.0), 0.35 * period)
    } else {
        (Vec3::new(0.4, -0.2, 0.3), 1.5)
    };
    let mut bank = Vec::new();
    for p in [
        VPoly::One,
        VPoly::Vi(0),
        VPoly::Vi(1),
        VPoly::Vi(2),
        VPoly::Energy,
    ] {
        bank.push(TestFunctionXV::product(
            p,
            c1,
            r1,
            Vec3::ZERO,
            3.0,
            wrap,
            x1_only,
        ));
    }
    for p in [
        VPoly::One,
        VPoly::Vi(0),
        VPoly::Energy,
        VPoly::ViVj(0, 1),
        VPoly::Vi(2),
    ] {
        bank.push(TestFunctionXV::product(
            p,
            c2,
            r2,
            Vec3::new(0.5, 0.0, -0.3),
            2.5,
            wrap,
            x1_only,
        ));
    }
    bank
}

/// Nonnegative weights for the weighted entropy production functional.
pub fn psi_bank(wrap: Option<f64>) -> Vec<TestFunctionXV> {
    let x1_only = wrap.is_some();
    let (c2, r2) = if let Some(period) = wrap {
        (Vec3::new(0.45 * period, 0.0, 0.0), 0.3 * period)
    } else {
        (Vec3::new(-0.3, 0.5, 0.0), 1.2)
    };
    vec![
        TestFunctionXV::product(VPoly::One, Vec3::ZERO, 2.0, Vec3::ZERO, 3.0, wrap, x1_only),
        TestFunctionXV::product(
            VPoly::Energy,
            Vec3::ZERO,
            1.8,
            Vec3::new(0.2, 0.0, 0.0),
            2.8,
            wrap,
            x1_only,
        ),
        TestFunctionXV::product(
            VPoly::AffineSq(0, 0.3),
            Vec3::ZERO,
            2.2,
            Vec3::ZERO,
            3.2,
            wrap,
            x1_only,
        ),
        TestFunctionXV::product(VPoly::One, c2, r2, Vec3::new(-0.4, 0.3, 0.0), 2.5, wrap, x1_only),
        TestFunctionXV::product(
            VPoly::ViVj(1, 1),
            Vec3::ZERO,
            2.0,
            Vec3::ZERO,
            3.0,
            wrap,
            x1_only,
        ),
    ]
}
