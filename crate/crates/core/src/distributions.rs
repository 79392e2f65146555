//! Phase-space distribution states: anisotropic Gaussians (with their exact
//! free-streaming transport), spatially homogeneous Maxwellians, nonnegative
//! weighted sums, and periodic slab grids with multilinear interpolation.
//!
//! States are immutable values; evaluation is pure and thread-safe.
//! Time-stepping produces new instances rather than mutating in place.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::adaptive_simpson;
use crate::kinematics::{Mat3, Vec3};
use crate::quadrature::{
    gauss_legendre, mc_sweep, label_of, QuadMode, QuadratureSpec, SpatialProposal,
    VelocityProposal,
};

/// Relative density threshold below which bulk quantities are zeroed.
pub const RHO_FLOOR_REL: f64 = 1e-14;

/// Anisotropic Gaussian state
/// `f(x, v) = A exp(-sum_i (x_i-c_i)^2 / sx_i^2) exp(-sum_i (v_i-u_i)^2 / sv_i^2)`.
///
/// Widths follow the `exp(-t^2 / s^2)` convention (standard deviation
/// `s / sqrt(2)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub amplitude: f64,
    pub center: Vec3,
    pub spatial_width: Vec3,
    pub drift: Vec3,
    pub velocity_width: Vec3,
}

impl GaussianState {
    /// Unit isotropic state `exp(-(|x|^2 + |v|^2))`.
    pub fn unit() -> Self {
        GaussianState {
            amplitude: 1.0,
            center: Vec3::ZERO,
            spatial_width: Vec3::splat(1.0),
            drift: Vec3::ZERO,
            velocity_width: Vec3::splat(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::InvalidInput(format!(
                "Gaussian amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        for (name, w) in [
            ("spatial", self.spatial_width),
            ("velocity", self.velocity_width),
        ] {
            for i in 0..3 {
                let wi = w.component(i);
                if !(wi.is_finite() && wi > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "Gaussian {name} width component {i} must be positive, got {wi}"
                    )));
                }
            }
        }
        if !(self.center.is_finite() && self.drift.is_finite()) {
            return Err(Error::InvalidInput(
                "Gaussian center/drift must be finite".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, x: Vec3, v: Vec3) -> f64 {
        let mut expo = 0.0;
        for i in 0..3 {
            let dx = (x.component(i) - self.center.component(i)) / self.spatial_width.component(i);
            let dv = (v.component(i) - self.drift.component(i)) / self.velocity_width.component(i);
            expo += dx * dx + dv * dv;
        }
        self.amplitude * (-expo).exp()
    }

    /// Spatial density `rho(x)` in closed form.
    pub fn density(&self, x: Vec3) -> f64 {
        let mut expo = 0.0;
        let mut vol = 1.0;
        for i in 0..3 {
            let dx = (x.component(i) - self.center.component(i)) / self.spatial_width.component(i);
            expo += dx * dx;
            vol *= self.velocity_width.component(i);
        }
        self.amplitude * PI_3_2 * vol * (-expo).exp()
    }

    /// Density of the free-streamed state `f0(x - t v, v)` in closed form.
    pub fn transported_density(&self, t: f64, x: Vec3) -> f64 {
        let mut out = self.amplitude;
        for i in 0..3 {
            let sx = self.spatial_width.component(i);
            let sv = self.velocity_width.component(i);
            let s2 = sx * sx + t * t * sv * sv;
            let dx = x.component(i) - self.center.component(i) - t * self.drift.component(i);
            out *= PI.sqrt() * sx * sv / s2.sqrt() * (-dx * dx / s2).exp();
        }
        out
    }

    /// Bulk velocity of the free-streamed state in closed form.
    pub fn transported_bulk_velocity(&self, t: f64, x: Vec3) -> Vec3 {
        let mut u = Vec3::ZERO;
        for i in 0..3 {
            let sx = self.spatial_width.component(i);
            let sv = self.velocity_width.component(i);
            let s2 = sx * sx + t * t * sv * sv;
            let dx = x.component(i) - self.center.component(i) - t * self.drift.component(i);
            let ui = self.drift.component(i) + t * sv * sv * dx / s2;
            u = match i {
                0 => Vec3::new(ui, u.y, u.z),
                1 => Vec3::new(u.x, ui, u.z),
                _ => Vec3::new(u.x, u.y, ui),
            };
        }
        u
    }

    /// Pressure tensor of the free-streamed state (diagonal, closed form).
    pub fn transported_pressure(&self, t: f64, x: Vec3) -> Mat3 {
        let rho = self.transported_density(t, x);
        let mut p = Mat3::identity();
        for i in 0..3 {
            let sx = self.spatial_width.component(i);
            let sv = self.velocity_width.component(i);
            let s2 = sx * sx + t * t * sv * sv;
            // Conditional variance of v_i given x_i, times rho.
            p.0[i][i] = rho * 0.5 * sv * sv * sx * sx / s2;
        }
        p
    }

    pub fn total_mass(&self) -> f64 {
        let mut vol = 1.0;
        for i in 0..3 {
            vol *= self.spatial_width.component(i) * self.velocity_width.component(i);
        }
        self.amplitude * PI * PI * PI * vol
    }
}

const PI: f64 = std::f64::consts::PI;
const PI_3_2: f64 = 5.568327996831708; // pi^(3/2)

/// Periodic slab grid: `x` dependence through `x_1 in [0, L)` only, velocity
/// box `[-V, V]^3`, multilinear interpolation, zero outside the box.
#[derive(Debug)]
pub struct GridSlab {
    length: f64,
    n_x: usize,
    v_max: f64,
    n_v: usize,
    /// Row-major, x1 slowest: `((ix * n_v + i1) * n_v + i2) * n_v + i3`.
    values: Vec<f64>,
    nodal_rho: OnceLock<Vec<f64>>,
    nodal_m1: OnceLock<Vec<Vec3>>,
}

impl Clone for GridSlab {
    fn clone(&self) -> Self {
        GridSlab {
            length: self.length,
            n_x: self.n_x,
            v_max: self.v_max,
            n_v: self.n_v,
            values: self.values.clone(),
            nodal_rho: OnceLock::new(),
            nodal_m1: OnceLock::new(),
        }
    }
}

impl PartialEq for GridSlab {
    fn eq(&self, other: &Self) -> bool {
        self.length == other.length
            && self.n_x == other.n_x
            && self.v_max == other.v_max
            && self.n_v == other.n_v
            && self.values == other.values
    }
}

impl GridSlab {
    pub fn new(length: f64, n_x: usize, v_max: f64, n_v: usize, values: Vec<f64>) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidInput(format!(
                "slab length must be positive, got {length}"
            )));
        }
        if n_x < 1 || n_v < 2 {
            return Err(Error::InvalidInput(format!(
                "slab needs n_x >= 1 and n_v >= 2, got {n_x}, {n_v}"
            )));
        }
        if !(v_max.is_finite() && v_max > 0.0) {
            return Err(Error::InvalidInput(format!(
                "velocity box half-width must be positive, got {v_max}"
            )));
        }
        if values.len() != n_x * n_v * n_v * n_v {
            return Err(Error::InvalidInput(format!(
                "slab expects {} nodal values, got {}",
                n_x * n_v * n_v * n_v,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "slab nodal values must be finite and nonnegative".into(),
            ));
        }
        Ok(GridSlab {
            length,
            n_x,
            v_max,
            n_v,
            values,
            nodal_rho: OnceLock::new(),
            nodal_m1: OnceLock::new(),
        })
    }

    pub fn from_fn(
        length: f64,
        n_x: usize,
        v_max: f64,
        n_v: usize,
        f: impl Fn(f64, Vec3) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(n_x * n_v * n_v * n_v);
        for ix in 0..n_x {
            let x1 = length * ix as f64 / n_x as f64;
            for i1 in 0..n_v {
                for i2 in 0..n_v {
                    for i3 in 0..n_v {
                        let v = Vec3::new(
                            node_v(v_max, n_v, i1),
                            node_v(v_max, n_v, i2),
                            node_v(v_max, n_v, i3),
                        );
                        values.push(f(x1, v).max(0.0));
                    }
                }
            }
        }
        GridSlab::new(length, n_x, v_max, n_v, values)
    }

    pub fn length(&self) -> f64 {
        self.length
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn v_max(&self) -> f64 {
        self.v_max
    }
    pub fn n_v(&self) -> usize {
        self.n_v
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, ix: usize, i1: usize, i2: usize, i3: usize) -> usize {
        ((ix * self.n_v + i1) * self.n_v + i2) * self.n_v + i3
    }

    pub fn x1_node(&self, j: usize) -> f64 {
        self.length * j as f64 / self.n_x as f64
    }

    pub fn v_node(&self, k: usize) -> f64 {
        node_v(self.v_max, self.n_v, k)
    }

    /// Multilinear interpolation; `x` enters through `x_1` only (periodic),
    /// zero outside the velocity box.
    pub fn eval(&self, x: Vec3, v: Vec3) -> f64 {
        let (j0, j1, tx) = self.x_bracket(x.x);
        let Some((k, tv)) = self.v_bracket(v) else {
            return 0.0;
        };
        let fx0 = self.corner_interp(j0, k, tv);
        if self.n_x == 1 {
            return fx0;
        }
        let fx1 = self.corner_interp(j1, k, tv);
        fx0 * (1.0 - tx) + fx1 * tx
    }

    #[inline]
    fn x_bracket(&self, x1: f64) -> (usize, usize, f64) {
        if self.n_x == 1 {
            return (0, 0, 0.0);
        }
        let h = self.length / self.n_x as f64;
        let xw = x1.rem_euclid(self.length);
        let t = xw / h;
        let j = (t as usize).min(self.n_x - 1);
        ((j) % self.n_x, (j + 1) % self.n_x, t - j as f64)
    }

    #[inline]
    fn v_bracket(&self, v: Vec3) -> Option<([usize; 3], [f64; 3])> {
        let mut k = [0usize; 3];
        let mut t = [0.0f64; 3];
        let hv = 2.0 * self.v_max / (self.n_v - 1) as f64;
        for i in 0..3 {
            let vi = v.component(i);
            if vi < -self.v_max || vi > self.v_max {
                return None;
            }
            let s = (vi + self.v_max) / hv;
            let ki = (s as usize).min(self.n_v - 2);
            k[i] = ki;
            t[i] = s - ki as f64;
        }
        Some((k, t))
    }

    #[inline]
    fn corner_interp(&self, ix: usize, k: [usize; 3], t: [f64; 3]) -> f64 {
        let mut acc = 0.0;
        for d1 in 0..2 {
            for d2 in 0..2 {
                for d3 in 0..2 {
                    let w = wlin(t[0], d1) * wlin(t[1], d2) * wlin(t[2], d3);
                    if w != 0.0 {
                        acc += w * self.values[self.index(ix, k[0] + d1, k[1] + d2, k[2] + d3)];
                    }
                }
            }
        }
        acc
    }

    /// Trapezoid weight for velocity node `k` (half at box faces).
    #[inline]
    fn v_weight(&self, k: usize) -> f64 {
        let h = 2.0 * self.v_max / (self.n_v - 1) as f64;
        if k == 0 || k == self.n_v - 1 {
            0.5 * h
        } else {
            h
        }
    }

    /// Nodal densities `rho_j = integral of the interpolant over the box`
    /// (trapezoid sums are exact for the multilinear interpolant).
    pub fn nodal_density(&self) -> &[f64] {
        self.nodal_rho.get_or_init(|| {
            (0..self.n_x)
                .map(|ix| {
                    let mut acc = 0.0;
                    for i1 in 0..self.n_v {
                        let w1 = self.v_weight(i1);
                        for i2 in 0..self.n_v {
                            let w12 = w1 * self.v_weight(i2);
                            for i3 in 0..self.n_v {
                                acc += w12
                                    * self.v_weight(i3)
                                    * self.values[self.index(ix, i1, i2, i3)];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
    }

    /// Density at arbitrary `x_1` (periodic linear interpolation of nodal
    /// densities; exact for the interpolant).
    pub fn density(&self, x1: f64) -> f64 {
        let rho = self.nodal_density();
        let (j0, j1, t) = self.x_bracket(x1);
        rho[j0] * (1.0 - t) + rho[j1] * t
    }

    /// Mass per unit cross-sectional area: `integral of rho over [0, L)`.
    pub fn mass_per_area(&self) -> f64 {
        let h = self.length / self.n_x as f64;
        self.nodal_density().iter().sum::<f64>() * h
    }

    /// Nodal momentum densities `(rho u)_j = integral of v f over the box`
    /// (trapezoid sums, cached like the nodal densities).
    pub fn nodal_momentum(&self) -> &[Vec3] {
        self.nodal_m1.get_or_init(|| {
            (0..self.n_x)
                .map(|ix| {
                    let mut acc = Vec3::ZERO;
                    for i1 in 0..self.n_v {
                        let w1 = self.v_weight(i1);
                        for i2 in 0..self.n_v {
                            let w12 = w1 * self.v_weight(i2);
                            for i3 in 0..self.n_v {
                                let fw = w12
                                    * self.v_weight(i3)
                                    * self.values[self.index(ix, i1, i2, i3)];
                                if fw != 0.0 {
                                    acc += Vec3::new(
                                        self.v_node(i1),
                                        self.v_node(i2),
                                        self.v_node(i3),
                                    ) * fw;
                                }
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
    }

    /// Momentum density `(rho u)(x_1)` (periodic linear interpolation of the
    /// nodal momenta).
    pub fn momentum_density_at(&self, x1: f64) -> Vec3 {
        let m1 = self.nodal_momentum();
        let (j0, j1, t) = self.x_bracket(x1);
        m1[j0] * (1.0 - t) + m1[j1] * t
    }

    /// Mass-weighted mean velocity and per-axis standard deviation over the
    /// whole slab (trapezoid node weights). Used to fit importance proposals;
    /// falls back to the box scale for (near-)empty grids or collapsed axes.
    pub fn velocity_stats(&self) -> (Vec3, Vec3) {
        let mut mass = 0.0;
        let mut mean = Vec3::ZERO;
        let mut second = Vec3::ZERO;
        for ix in 0..self.n_x {
            for i1 in 0..self.n_v {
                let w1 = self.v_weight(i1);
                for i2 in 0..self.n_v {
                    let w12 = w1 * self.v_weight(i2);
                    for i3 in 0..self.n_v {
                        let fw =
                            w12 * self.v_weight(i3) * self.values[self.index(ix, i1, i2, i3)];
                        if fw == 0.0 {
                            continue;
                        }
                        let v = Vec3::new(self.v_node(i1), self.v_node(i2), self.v_node(i3));
                        mass += fw;
                        mean += v * fw;
                        second += Vec3::new(v.x * v.x, v.y * v.y, v.z * v.z) * fw;
                    }
                }
            }
        }
        if mass <= 0.0 {
            return (Vec3::ZERO, Vec3::splat(0.6 * self.v_max));
        }
        mean = mean / mass;
        let floor = 0.05 * self.v_max;
        let sigma = Vec3::new(
            (second.x / mass - mean.x * mean.x).max(0.0).sqrt().max(floor),
            (second.y / mass - mean.y * mean.y).max(0.0).sqrt().max(floor),
            (second.z / mass - mean.z * mean.z).max(0.0).sqrt().max(floor),
        );
        (mean, sigma)
    }

    /// Raw velocity moments `(M0, M1, M2, N)` of the interpolant at node `j`:
    /// `M0 = int f`, `M1 = int v f`, `M2 = int v (x) v f`, `N = int v|v|^2 f`.
    pub fn raw_moments_at_node(&self, j: usize) -> (f64, Vec3, Mat3, Vec3) {
        let mut m0 = 0.0;
        let mut m1 = Vec3::ZERO;
        let mut m2 = Mat3::scaled_identity(0.0);
        let mut n3 = Vec3::ZERO;
        for i1 in 0..self.n_v {
            let v1 = self.v_node(i1);
            let w1 = self.v_weight(i1);
            for i2 in 0..self.n_v {
                let v2 = self.v_node(i2);
                let w12 = w1 * self.v_weight(i2);
                for i3 in 0..self.n_v {
                    let v3 = self.v_node(i3);
                    let w = w12 * self.v_weight(i3);
                    let f = self.values[self.index(j, i1, i2, i3)];
                    if f == 0.0 {
                        continue;
                    }
                    let wf = w * f;
                    let v = Vec3::new(v1, v2, v3);
                    m0 += wf;
                    m1 += v * wf;
                    let vv = v.norm_sq();
                    for a in 0..3 {
                        for b in 0..3 {
                            m2.0[a][b] += wf * v.component(a) * v.component(b);
                        }
                    }
                    n3 += v * (wf * vv);
                }
            }
        }
        (m0, m1, m2, n3)
    }

    /// CSV nodal dump: header line `L,N_x,V,N_v`, then one value per line in
    /// row-major order, x1 slowest.
    pub fn to_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{:.17e},{},{:.17e},{}", self.length, self.n_x, self.v_max, self.n_v)?;
        for v in &self.values {
            writeln!(w, "{v:.17e}")?;
        }
        Ok(())
    }

    pub fn from_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty slab CSV".into()))??;
        let parts: Vec<&str> = header.trim().split(',').collect();
        if parts.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "slab CSV header needs 4 fields L,N_x,V,N_v, got {}",
                parts.len()
            )));
        }
        let length: f64 = parts[0]
            .parse()
            .map_err(|e| Error::InvalidInput(format!("bad slab length: {e}")))?;
        let n_x: usize = parts[1]
            .parse()
            .map_err(|e| Error::InvalidInput(format!("bad slab n_x: {e}")))?;
        let v_max: f64 = parts[2]
            .parse()
            .map_err(|e| Error::InvalidInput(format!("bad slab v_max: {e}")))?;
        let n_v: usize = parts[3]
            .parse()
            .map_err(|e| Error::InvalidInput(format!("bad slab n_v: {e}")))?;
        let mut values = Vec::with_capacity(n_x * n_v * n_v * n_v);
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            values.push(
                t.parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("bad slab value: {e}")))?,
            );
        }
        GridSlab::new(length, n_x, v_max, n_v, values)
    }
}

#[inline]
fn node_v(v_max: f64, n_v: usize, k: usize) -> f64 {
    -v_max + 2.0 * v_max * k as f64 / (n_v - 1) as f64
}

#[inline]
fn wlin(t: f64, d: usize) -> f64 {
    if d == 0 {
        1.0 - t
    } else {
        t
    }
}

/// A phase-space state `f(x, v) >= 0`.
#[derive(Clone, Debug, PartialEq)]
pub enum Distribution {
    Gaussian(GaussianState),
    /// Spatially homogeneous Maxwellian
    /// `A exp(-|v - u|^2 / s^2)` (isotropic width).
    Maxwellian {
        amplitude: f64,
        drift: Vec3,
        velocity_width: f64,
    },
    /// Exact free-streaming transport of a Gaussian: `f0(x - t v, v)`.
    Transported { base: GaussianState, t: f64 },
    /// Nonnegative weighted sum.
    Sum(Vec<(f64, Distribution)>),
    Slab(Arc<GridSlab>),
}

impl Distribution {
    pub fn unit_gaussian() -> Self {
        Distribution::Gaussian(GaussianState::unit())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Distribution::Gaussian(g) => g.validate(),
            Distribution::Maxwellian {
                amplitude,
                velocity_width,
                drift,
            } => {
                if !(amplitude.is_finite() && *amplitude > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "Maxwellian amplitude must be positive, got {amplitude}"
                    )));
                }
                if !(velocity_width.is_finite() && *velocity_width > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "Maxwellian width must be positive, got {velocity_width}"
                    )));
                }
                if !drift.is_finite() {
                    return Err(Error::InvalidInput("Maxwellian drift must be finite".into()));
                }
                Ok(())
            }
            Distribution::Transported { base, t } => {
                if !t.is_finite() {
                    return Err(Error::InvalidInput("transport time must be finite".into()));
                }
                base.validate()
            }
            Distribution::Sum(terms) => {
                for (w, d) in terms {
                    if !(w.is_finite() && *w >= 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "sum weights must be nonnegative, got {w}"
                        )));
                    }
                    d.validate()?;
                }
                Ok(())
            }
            Distribution::Slab(_) => Ok(()),
        }
    }

    /// Pointwise evaluation `f(x, v)`.
    pub fn eval_f(&self, x: Vec3, v: Vec3) -> f64 {
        match self {
            Distribution::Gaussian(g) => g.eval(x, v),
            Distribution::Maxwellian {
                amplitude,
                drift,
                velocity_width,
            } => {
                let d = v - *drift;
                amplitude * (-d.norm_sq() / (velocity_width * velocity_width)).exp()
            }
            Distribution::Transported { base, t } => base.eval(x - v * *t, v),
            Distribution::Sum(terms) => terms.iter().map(|(w, d)| w * d.eval_f(x, v)).sum(),
            Distribution::Slab(s) => s.eval(x, v),
        }
    }

    /// `ln(max(f, floor))`; clipping events are counted into `clips`.
    pub fn log_eval(&self, x: Vec3, v: Vec3, floor: f64, clips: &AtomicU64) -> f64 {
        debug_assert!(floor > 0.0);
        let f = self.eval_f(x, v);
        if f > floor {
            f.ln()
        } else {
            clips.fetch_add(1, Ordering::Relaxed);
            floor.ln()
        }
    }

    /// Spatial density `rho(x)`: closed form for analytic states, nodal
    /// trapezoid + interpolation for slabs.
    pub fn density(&self, x: Vec3) -> f64 {
        match self {
            Distribution::Gaussian(g) => g.density(x),
            Distribution::Maxwellian {
                amplitude,
                velocity_width,
                ..
            } => {
                let s = *velocity_width;
                amplitude * PI_3_2 * s * s * s
            }
            Distribution::Transported { base, t } => base.transported_density(*t, x),
            Distribution::Sum(terms) => terms.iter().map(|(w, d)| w * d.density(x)).sum(),
            Distribution::Slab(s) => s.density(x.x),
        }
    }

    /// Momentum density `(rho u)(x) = integral of v f(x, v) dv`, in closed
    /// form for analytic states and by cached nodal sums for slabs.
    pub fn momentum_density(&self, x: Vec3) -> Vec3 {
        match self {
            Distribution::Gaussian(g) => g.drift * g.density(x),
            Distribution::Maxwellian { drift, .. } => *drift * self.density(x),
            Distribution::Transported { base, t } => {
                base.transported_bulk_velocity(*t, x) * base.transported_density(*t, x)
            }
            Distribution::Sum(terms) => {
                let mut acc = Vec3::ZERO;
                for (w, d) in terms {
                    acc += d.momentum_density(x) * *w;
                }
                acc
            }
            Distribution::Slab(s) => s.momentum_density_at(x.x),
        }
    }

    /// Peak density scale used for relative floors.
    pub fn density_scale(&self) -> f64 {
        match self {
            Distribution::Gaussian(g) => g.density(g.center),
            Distribution::Maxwellian { .. } => self.density(Vec3::ZERO),
            Distribution::Transported { base, t } => {
                base.transported_density(*t, base.center + base.drift * *t)
            }
            Distribution::Sum(terms) => terms.iter().map(|(w, d)| w * d.density_scale()).sum(),
            Distribution::Slab(s) => s
                .nodal_density()
                .iter()
                .cloned()
                .fold(0.0f64, f64::max),
        }
    }

    /// Natural importance proposal for velocity integrals against this state.
    pub fn velocity_proposal(&self) -> VelocityProposal {
        match self {
            Distribution::Gaussian(g) => VelocityProposal::Gaussian {
                center: g.drift,
                sigma: g.velocity_width * std::f64::consts::FRAC_1_SQRT_2,
            },
            Distribution::Maxwellian {
                drift,
                velocity_width,
                ..
            } => VelocityProposal::Gaussian {
                center: *drift,
                sigma: Vec3::splat(velocity_width * std::f64::consts::FRAC_1_SQRT_2),
            },
            Distribution::Transported { base, .. } => VelocityProposal::Gaussian {
                center: base.drift,
                sigma: base.velocity_width * std::f64::consts::FRAC_1_SQRT_2,
            },
            Distribution::Sum(terms) => {
                // Conservative cover: centroid of drifts, width reaching the
                // farthest component proposal.
                let mut center = Vec3::ZERO;
                let mut total = 0.0;
                for (w, d) in terms {
                    if let VelocityProposal::Gaussian { center: c, .. } = d.velocity_proposal() {
                        center += c * *w;
                        total += *w;
                    }
                }
                if total > 0.0 {
                    center = center / total;
                }
                let mut sigma = Vec3::splat(0.0);
                let mut boxed: Option<f64> = None;
                for (_, d) in terms {
                    match d.velocity_proposal() {
                        VelocityProposal::Gaussian { center: c, sigma: s } => {
                            for i in 0..3 {
                                let reach = (c.component(i) - center.component(i)).abs()
                                    + s.component(i);
                                if reach > sigma.component(i) {
                                    sigma = set_component(sigma, i, reach);
                                }
                            }
                        }
                        VelocityProposal::Box { half } => {
                            boxed = Some(boxed.map_or(half, |b: f64| b.max(half)));
                        }
                    }
                }
                if let Some(half) = boxed {
                    VelocityProposal::Box { half }
                } else {
                    VelocityProposal::Gaussian { center, sigma }
                }
            }
            Distribution::Slab(s) => {
                // Fitted Gaussian cover: far tighter than the raw velocity
                // box; the extra width keeps importance ratios bounded for
                // the compactly supported interpolant.
                let (center, sigma) = s.velocity_stats();
                VelocityProposal::Gaussian {
                    center,
                    sigma: sigma * 1.3,
                }
            }
        }
    }

    /// Natural proposal for spatial integrals against this state's density.
    pub fn spatial_proposal(&self) -> SpatialProposal {
        match self {
            Distribution::Gaussian(g) => SpatialProposal::Gaussian {
                center: g.center,
                sigma: g.spatial_width * std::f64::consts::FRAC_1_SQRT_2,
            },
            // Homogeneous in x: a unit Gaussian window; callers integrate
            // compactly supported integrands and widen as needed.
            Distribution::Maxwellian { .. } => SpatialProposal::Gaussian {
                center: Vec3::ZERO,
                sigma: Vec3::splat(std::f64::consts::FRAC_1_SQRT_2),
            },
            Distribution::Transported { base, t } => {
                let mut sigma = Vec3::ZERO;
                for i in 0..3 {
                    let sx = base.spatial_width.component(i);
                    let sv = base.velocity_width.component(i);
                    sigma = set_component(
                        sigma,
                        i,
                        ((sx * sx + t * t * sv * sv) * 0.5).sqrt(),
                    );
                }
                SpatialProposal::Gaussian {
                    center: base.center + base.drift * *t,
                    sigma,
                }
            }
            Distribution::Sum(terms) => {
                let mut center = Vec3::ZERO;
                let mut total = 0.0;
                let mut slab: Option<f64> = None;
                for (w, d) in terms {
                    match d.spatial_proposal() {
                        SpatialProposal::Gaussian { center: c, .. } => {
                            center += c * *w;
                            total += *w;
                        }
                        SpatialProposal::SlabPeriod { length } => {
                            slab = Some(slab.map_or(length, |l: f64| l.max(length)));
                        }
                    }
                }
                if let Some(length) = slab {
                    return SpatialProposal::SlabPeriod { length };
                }
                if total > 0.0 {
                    center = center / total;
                }
                let mut sigma = Vec3::splat(0.0);
                for (_, d) in terms {
                    if let SpatialProposal::Gaussian { center: c, sigma: s } = d.spatial_proposal()
                    {
                        for i in 0..3 {
                            let reach =
                                (c.component(i) - center.component(i)).abs() + s.component(i);
                            if reach > sigma.component(i) {
                                sigma = set_component(sigma, i, reach);
                            }
                        }
                    }
                }
                SpatialProposal::Gaussian { center, sigma }
            }
            Distribution::Slab(s) => SpatialProposal::SlabPeriod { length: s.length() },
        }
    }

    /// Slab grid behind this state, if any (periodic functionals are taken
    /// per unit cross-sectional area for slab states).
    pub fn as_slab(&self) -> Option<&Arc<GridSlab>> {
        match self {
            Distribution::Slab(s) => Some(s),
            _ => None,
        }
    }
}

fn set_component(v: Vec3, i: usize, value: f64) -> Vec3 {
    match i {
        0 => Vec3::new(value, v.y, v.z),
        1 => Vec3::new(v.x, value, v.z),
        _ => Vec3::new(v.x, v.y, value),
    }
}

/// Bulk observables at a point: density, bulk velocity, pressure tensor,
/// and heat flux.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MomentSet {
    pub rho: f64,
    pub u: Vec3,
    pub p: Mat3,
    pub q: Vec3,
}

impl MomentSet {
    pub fn zero() -> Self {
        MomentSet {
            rho: 0.0,
            u: Vec3::ZERO,
            p: Mat3::scaled_identity(0.0),
            q: Vec3::ZERO,
        }
    }
}

/// Raw moments `(M0, M1, M2, N)` -> centered `MomentSet`, zeroing bulk
/// quantities when `M0` falls below `floor`.
fn centralize(m0: f64, m1: Vec3, m2: Mat3, n3: Vec3, floor: f64) -> MomentSet {
    if m0 < floor || m0 <= 0.0 {
        return MomentSet::zero();
    }
    let u = m1 / m0;
    let mut p = Mat3::scaled_identity(0.0);
    for a in 0..3 {
        for b in 0..3 {
            p.0[a][b] = m2.0[a][b] - m0 * u.component(a) * u.component(b);
        }
    }
    let tr_m2 = m2.trace();
    let m2u = m2.mul_vec(u);
    let q = (n3 - m2u * 2.0 - u * tr_m2 + u * (2.0 * m0 * u.norm_sq())) * 0.5;
    MomentSet { rho: m0, u, p, q }
}

/// Bulk observables of `dist` at `x`:
/// `rho = int f dv`, `u = rho^{-1} int v f dv`,
/// `P = int (v-u)(x)(v-u) f dv`, `Q = 1/2 int (v-u)|v-u|^2 f dv`.
///
/// Slab states use their exact nodal trapezoid sums (interpolated in `x_1`);
/// analytic states integrate with `spec` (tensor rule scaled to the state's
/// own width, or importance-sampled Monte Carlo).
pub fn macro_moments(dist: &Distribution, x: Vec3, spec: &QuadratureSpec) -> Result<MomentSet> {
    let floor = RHO_FLOOR_REL * dist.density_scale();
    let (m0, m1, m2, n3) = raw_moments(dist, x, spec)?;
    Ok(centralize(m0, m1, m2, n3, floor))
}

fn raw_moments(dist: &Distribution, x: Vec3, spec: &QuadratureSpec) -> Result<(f64, Vec3, Mat3, Vec3)> {
    match dist {
        Distribution::Sum(terms) => {
            let mut m0 = 0.0;
            let mut m1 = Vec3::ZERO;
            let mut m2 = Mat3::scaled_identity(0.0);
            let mut n3 = Vec3::ZERO;
            for (w, d) in terms {
                let (a0, a1, a2, a3) = raw_moments(d, x, spec)?;
                m0 += w * a0;
                m1 += a1 * *w;
                m2 = m2.add(&a2.scale(*w));
                n3 += a3 * *w;
            }
            Ok((m0, m1, m2, n3))
        }
        Distribution::Slab(s) => {
            let (j0, j1, t) = s.x_bracket(x.x);
            let (a0, a1, a2, a3) = s.raw_moments_at_node(j0);
            if t == 0.0 || j0 == j1 {
                return Ok((a0, a1, a2, a3));
            }
            let (b0, b1, b2, b3) = s.raw_moments_at_node(j1);
            Ok((
                a0 * (1.0 - t) + b0 * t,
                a1 * (1.0 - t) + b1 * t,
                a2.scale(1.0 - t).add(&b2.scale(t)),
                a3 * (1.0 - t) + b3 * t,
            ))
        }
        _ => raw_moments_quadrature(dist, x, spec),
    }
}

/// 13-component sweep: `[M0, M1 (3), M2 upper triangle (6), N (3)]`.
fn raw_moments_quadrature(
    dist: &Distribution,
    x: Vec3,
    spec: &QuadratureSpec,
) -> Result<(f64, Vec3, Mat3, Vec3)> {
    let proposal = dist.velocity_proposal();
    let fill = |v: Vec3, weight: f64, out: &mut [f64]| {
        let f = dist.eval_f(x, v) * weight;
        out[0] += f;
        out[1] += f * v.x;
        out[2] += f * v.y;
        out[3] += f * v.z;
        out[4] += f * v.x * v.x;
        out[5] += f * v.x * v.y;
        out[6] += f * v.x * v.z;
        out[7] += f * v.y * v.y;
        out[8] += f * v.y * v.z;
        out[9] += f * v.z * v.z;
        let vv = v.norm_sq();
        out[10] += f * v.x * vv;
        out[11] += f * v.y * vv;
        out[12] += f * v.z * vv;
    };
    let acc: Vec<f64> = match spec.mode {
        QuadMode::Tensor => {
            // Per-axis Gauss-Legendre scaled to the proposal width.
            let (center, scale) = match proposal {
                VelocityProposal::Gaussian { center, sigma } => {
                    (center, sigma * std::f64::consts::SQRT_2)
                }
                VelocityProposal::Box { half } => {
                    (Vec3::ZERO, Vec3::splat(half / spec.v_box))
                }
            };
            let (nodes, weights) = gauss_legendre(spec.w_nodes);
            let mut acc = vec![0.0; 13];
            for (i1, &t1) in nodes.iter().enumerate() {
                let v1 = center.x + spec.v_box * scale.x * t1;
                let w1 = spec.v_box * scale.x * weights[i1];
                for (i2, &t2) in nodes.iter().enumerate() {
                    let v2 = center.y + spec.v_box * scale.y * t2;
                    let w2 = w1 * spec.v_box * scale.y * weights[i2];
                    for (i3, &t3) in nodes.iter().enumerate() {
                        let v3 = center.z + spec.v_box * scale.z * t3;
                        let w = w2 * spec.v_box * scale.z * weights[i3];
                        fill(Vec3::new(v1, v2, v3), w, &mut acc);
                    }
                }
            }
            acc
        }
        QuadMode::MonteCarlo => {
            let est = mc_sweep(
                13,
                spec.mc_samples,
                spec.seed,
                label_of("macro_moments"),
                |_, rng, out| {
                    let (v, inv_pdf) = proposal.sample(rng);
                    fill(v, inv_pdf, out);
                    Ok(())
                },
            )?;
            est.value
        }
    };
    if acc.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numerical("non-finite moment accumulation".into()));
    }
    let m1 = Vec3::new(acc[1], acc[2], acc[3]);
    let m2 = Mat3([
        [acc[4], acc[5], acc[6]],
        [acc[5], acc[7], acc[8]],
        [acc[6], acc[8], acc[9]],
    ]);
    let n3 = Vec3::new(acc[10], acc[11], acc[12]);
    Ok((acc[0], m1, m2, n3))
}

/// Mass fraction of a Gaussian state lost to velocity-box truncation at
/// half-width `v_max` (reported alongside slab projections).
pub fn box_mass_fraction_lost(state: &GaussianState, v_max: f64) -> Result<f64> {
    if !(v_max > 0.0) {
        return Err(Error::InvalidInput(format!(
            "velocity box half-width must be positive, got {v_max}"
        )));
    }
    let mut kept = 1.0;
    for i in 0..3 {
        let s = state.velocity_width.component(i);
        let u = state.drift.component(i);
        let g = |t: f64| (-(t - u) * (t - u) / (s * s)).exp();
        let inside = adaptive_simpson(&g, -v_max, v_max, 1e-13, 48) / (s * PI.sqrt());
        kept *= inside.min(1.0);
    }
    Ok((1.0 - kept).max(0.0))
}

/// Project an analytic state onto a slab grid (values sampled at nodes).
pub fn project_to_slab(
    dist: &Distribution,
    length: f64,
    n_x: usize,
    v_max: f64,
    n_v: usize,
) -> Result<GridSlab> {
    GridSlab::from_fn(length, n_x, v_max, n_v, |x1, v| {
        dist.eval_f(Vec3::new(x1, 0.0, 0.0), v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    #[test]
    fn unit_gaussian_at_origin() {
        let f = Distribution::unit_gaussian();
        assert_eq!(f.eval_f(Vec3::ZERO, Vec3::ZERO), 1.0);
        let x = Vec3::new(0.5, -0.25, 1.0);
        let v = Vec3::new(-1.0, 0.0, 2.0);
        assert_relative_eq!(
            f.eval_f(x, v),
            (-(x.norm_sq() + v.norm_sq())).exp(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn weighted_sum_linearity() {
        let one = Distribution::unit_gaussian();
        let sum = Distribution::Sum(vec![(2.0, one.clone()), (3.0, one.clone())]);
        assert_eq!(sum.eval_f(Vec3::ZERO, Vec3::ZERO), 5.0);
        assert_relative_eq!(
            sum.density(Vec3::ZERO),
            5.0 * one.density(Vec3::ZERO),
            max_relative = 1e-15
        );
    }

    #[test]
    fn log_eval_and_clipping() {
        let clips = AtomicU64::new(0);
        let f = Distribution::unit_gaussian();
        assert_eq!(f.log_eval(Vec3::ZERO, Vec3::ZERO, 1e-30, &clips), 0.0);
        // Amplitude e at center evaluates to ln e = 1.
        let g = Distribution::Gaussian(GaussianState {
            amplitude: std::f64::consts::E,
            ..GaussianState::unit()
        });
        assert_relative_eq!(
            g.log_eval(Vec3::ZERO, Vec3::ZERO, 1e-30, &clips),
            1.0,
            max_relative = 1e-15
        );
        assert_eq!(clips.load(Ordering::Relaxed), 0);
        // Far in the tail the floor engages and the counter ticks.
        let far = Vec3::new(50.0, 0.0, 0.0);
        let l = f.log_eval(far, Vec3::ZERO, 1e-30, &clips);
        assert_relative_eq!(l, (1e-30f64).ln(), max_relative = 1e-12);
        assert_abs_diff_eq!(l, -69.0775527898, epsilon = 1e-6);
        assert_eq!(clips.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn gaussian_moments_closed_form() {
        let f = Distribution::unit_gaussian();
        let x = Vec3::new(0.3, -0.2, 0.1);
        let spec = QuadratureSpec {
            w_nodes: 24,
            ..QuadratureSpec::tensor()
        };
        let m = macro_moments(&f, x, &spec).unwrap();
        let rho = PI_3_2 * (-x.norm_sq()).exp();
        // GL-24 over +-5 widths carries ~1e-8 interior error per axis.
        assert_relative_eq!(m.rho, rho, max_relative = 5e-8);
        assert!(m.u.norm() < 1e-10);
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 0.5 * rho } else { 0.0 };
                assert_abs_diff_eq!(m.p.0[a][b], expect, epsilon = 5e-7 * rho);
            }
        }
        assert!(m.q.norm() < 1e-9, "even in v: Q = 0, got {:?}", m.q);
        assert!(m.p.is_psd(1e-12));
    }

    #[test]
    fn drifting_anisotropic_moments() {
        let g = GaussianState {
            amplitude: 0.7,
            center: Vec3::new(0.1, 0.0, -0.4),
            spatial_width: Vec3::new(1.0, 2.0, 0.5),
            drift: Vec3::new(0.5, -1.0, 0.25),
            velocity_width: Vec3::new(1.0, 0.8, 1.3),
        };
        let f = Distribution::Gaussian(g.clone());
        let x = Vec3::new(0.2, 0.3, -0.1);
        let spec = QuadratureSpec {
            w_nodes: 24,
            ..QuadratureSpec::tensor()
        };
        let m = macro_moments(&f, x, &spec).unwrap();
        assert_relative_eq!(m.rho, g.density(x), max_relative = 5e-8);
        assert!((m.u - g.drift).norm() < 1e-8);
        for a in 0..3 {
            let sv = g.velocity_width.component(a);
            assert_relative_eq!(m.p.0[a][a], 0.5 * m.rho * sv * sv, max_relative = 5e-7);
        }
        // Centered odd moment vanishes despite the drift.
        assert!(m.q.norm() < 1e-7 * m.rho);
    }

    #[test]
    fn mc_moments_agree_with_tensor() {
        let f = Distribution::unit_gaussian();
        let x = Vec3::new(0.3, -0.2, 0.1);
        let tensor = macro_moments(
            &f,
            x,
            &QuadratureSpec {
                w_nodes: 24,
                ..QuadratureSpec::tensor()
            },
        )
        .unwrap();
        let mc = macro_moments(&f, x, &QuadratureSpec::monte_carlo(200_000, 7)).unwrap();
        assert_relative_eq!(mc.rho, tensor.rho, max_relative = 5e-3);
        assert_abs_diff_eq!(mc.p.0[0][0], tensor.p.0[0][0], epsilon = 5e-3 * tensor.rho);
    }

    #[test]
    fn transported_density_matches_closed_form() {
        let base = GaussianState::unit();
        let t = 0.7;
        let f = Distribution::Transported { base: base.clone(), t };
        for x in [Vec3::ZERO, Vec3::new(0.5, -0.3, 0.2)] {
            let expect = PI_3_2 / (1.0 + t * t).powf(1.5) * (-x.norm_sq() / (1.0 + t * t)).exp();
            assert_relative_eq!(f.density(x), expect, max_relative = 1e-12);
            // Quadrature cross-check of the closed form.
            let m = macro_moments(
                &f,
                x,
                &QuadratureSpec {
                    w_nodes: 48,
                    v_box: 6.0,
                    ..QuadratureSpec::tensor()
                },
            )
            .unwrap();
            assert_relative_eq!(m.rho, expect, max_relative = 1e-6);
            let u_expect = base.transported_bulk_velocity(t, x);
            assert!((m.u - u_expect).norm() <= 1e-6 * (1.0 + u_expect.norm()));
            let p_expect = base.transported_pressure(t, x);
            for a in 0..3 {
                assert_relative_eq!(m.p.0[a][a], p_expect.0[a][a], max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn slab_interpolation_and_box_extension() {
        let slab = GridSlab::from_fn(4.0, 8, 3.0, 9, |x1, v| {
            (2.0 + (2.0 * PI * x1 / 4.0).cos()) * (1.0 + 0.1 * v.x) * (1.0 - 0.05 * v.y)
        })
        .unwrap();
        let f = Distribution::Slab(Arc::new(slab.clone()));
        // Outside the velocity box: zero.
        assert_eq!(f.eval_f(Vec3::ZERO, Vec3::new(0.0, 0.0, 3.1)), 0.0);
        assert_eq!(f.eval_f(Vec3::ZERO, Vec3::new(-3.5, 0.0, 0.0)), 0.0);
        // Exact at nodes.
        let xn = slab.x1_node(3);
        let vn = Vec3::new(slab.v_node(2), slab.v_node(4), slab.v_node(7));
        assert_relative_eq!(
            f.eval_f(Vec3::new(xn, 7.0, -2.0), vn),
            (2.0 + (2.0 * PI * xn / 4.0).cos()) * (1.0 + 0.1 * vn.x) * (1.0 - 0.05 * vn.y),
            max_relative = 1e-13
        );
        // Multilinear interpolation is exact for per-axis affine data at
        // fixed x1 node (interior cell midpoint).
        let vm = Vec3::new(
            0.5 * (slab.v_node(2) + slab.v_node(3)),
            0.5 * (slab.v_node(4) + slab.v_node(5)),
            slab.v_node(6),
        );
        assert_relative_eq!(
            f.eval_f(Vec3::new(xn, 0.0, 0.0), vm),
            (2.0 + (2.0 * PI * xn / 4.0).cos()) * (1.0 + 0.1 * vm.x) * (1.0 - 0.05 * vm.y),
            max_relative = 1e-13
        );
        // Periodic wrap: x1 = L + t matches x1 = t.
        let p = Vec3::new(4.0 + 0.37, 0.0, 0.0);
        let q = Vec3::new(0.37, 0.0, 0.0);
        assert_relative_eq!(f.eval_f(p, vn), f.eval_f(q, vn), max_relative = 1e-12);
    }

    #[test]
    fn slab_moments_match_projected_maxwellian() {
        // rho(x1) = (2 + cos(2 pi x1 / L)) * pi^{3/2} s^3 for a local
        // Maxwellian profile; trapezoid error on the velocity grid is small.
        let s = 1.0;
        let slab = GridSlab::from_fn(4.0, 8, 5.0, 33, |x1, v| {
            (2.0 + (2.0 * PI * x1 / 4.0).cos()) * (-v.norm_sq() / (s * s)).exp()
        })
        .unwrap();
        let dist = Distribution::Slab(Arc::new(slab));
        let spec = QuadratureSpec::tensor();
        for x1 in [0.0, 0.5, 1.25, 3.9] {
            let m = macro_moments(&dist, Vec3::new(x1, 0.0, 0.0), &spec).unwrap();
            let analytic = (2.0 + (2.0 * PI * x1 / 4.0).cos()) * PI_3_2;
            // x1 linear interpolation of the cosine adds O(h^2) ~ 2e-2 error
            // at off-node points; node points see only the velocity trapezoid.
            let tol = if (x1 / 0.5).fract() == 0.0 { 1e-3 } else { 3e-2 };
            assert_relative_eq!(m.rho, analytic, max_relative = tol);
            assert!(m.u.norm() < 1e-12);
            assert!(m.q.norm() < 1e-10);
        }
    }

    #[test]
    fn slab_csv_round_trip() {
        let slab = GridSlab::from_fn(2.5, 4, 2.0, 5, |x1, v| {
            ((x1 - 1.0) * 0.3 + 1.0) * (-v.norm_sq()).exp()
        })
        .unwrap();
        let mut buf = Vec::new();
        slab.to_csv(&mut buf).unwrap();
        let back = GridSlab::from_csv(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(slab, back);
    }

    #[test]
    fn truncation_loss_oracle() {
        let g = GaussianState::unit();
        // Per-axis kept fraction is erf(V/s); for V = s = 1 the cube leaves
        // 1 - erf(1)^3 ~ 0.40156.
        let lost = box_mass_fraction_lost(&g, 1.0).unwrap();
        assert_relative_eq!(lost, 0.4015605601916524, max_relative = 1e-9);
        let tiny = box_mass_fraction_lost(&g, 5.0).unwrap();
        assert!(tiny < 5e-12, "5-sigma box loses {tiny}");
    }

    #[test]
    fn zero_distribution_moments() {
        let slab = GridSlab::new(1.0, 2, 1.0, 2, vec![0.0; 16]).unwrap();
        let m = macro_moments(
            &Distribution::Slab(Arc::new(slab)),
            Vec3::ZERO,
            &QuadratureSpec::tensor(),
        )
        .unwrap();
        assert_eq!(m.rho, 0.0);
        assert_eq!(m.u, Vec3::ZERO);
        assert_eq!(m.p.max_abs(), 0.0);
        assert_eq!(m.q, Vec3::ZERO);
    }

    #[test]
    fn slab_rejects_bad_input() {
        assert!(GridSlab::new(1.0, 2, 1.0, 2, vec![0.0; 5]).is_err());
        assert!(GridSlab::new(1.0, 2, 1.0, 2, vec![-1.0; 16]).is_err());
        assert!(GridSlab::new(-1.0, 2, 1.0, 2, vec![0.0; 16]).is_err());
        assert!(GridSlab::new(1.0, 2, 1.0, 1, vec![0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn pressure_tensor_psd(
            ax in 0.2f64..2.0, sx in 0.4f64..1.6, sy in 0.4f64..1.6, sz in 0.4f64..1.6,
            ux in -1.0f64..1.0, uy in -1.0f64..1.0,
            px in -0.8f64..0.8, py in -0.8f64..0.8,
        ) {
            let g = GaussianState {
                amplitude: ax,
                center: Vec3::ZERO,
                spatial_width: Vec3::splat(1.0),
                drift: Vec3::new(ux, uy, 0.3),
                velocity_width: Vec3::new(sx, sy, sz),
            };
            let m = macro_moments(
                &Distribution::Gaussian(g),
                Vec3::new(px, py, 0.0),
                &QuadratureSpec { w_nodes: 16, ..QuadratureSpec::tensor() },
            ).unwrap();
            prop_assert!(m.p.is_psd(1e-9 * (1.0 + m.p.max_abs())));
            prop_assert!(m.rho >= 0.0);
        }

        #[test]
        fn eval_nonnegative(
            x1 in -3.0f64..3.0, v1 in -3.0f64..3.0, v2 in -3.0f64..3.0,
        ) {
            let slab = GridSlab::from_fn(2.0, 4, 2.5, 7, |x, v| {
                ((x * 1.1).sin().abs() + 0.1) * (-v.norm_sq() * 0.7).exp()
            }).unwrap();
            let f = Distribution::Sum(vec![
                (0.5, Distribution::unit_gaussian()),
                (1.5, Distribution::Slab(Arc::new(slab))),
            ]);
            prop_assert!(f.eval_f(Vec3::new(x1, 0.0, 0.0), Vec3::new(v1, v2, 0.0)) >= 0.0);
        }
    }
}
