//! Collision kernels: Povzner (smeared), soft-sphere (mollified shell),
//! Enskog shell, and revised Enskog (density-enhanced shell), together with
//! the radial tail integral used by the entropy functionals.
//!
//! Density-mode kernels are plain functions `B(x, y, dv)` supported in
//! `|x - y| <= R`; Shell-mode kernels carry a Dirac shell at distance `2r`,
//! which is never represented numerically: operators integrate over contact
//! directions `n` with weight `4 r^2` instead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{collide_unit, unit_between, Vec3};
use crate::quadrature::{label_of, sample_rng, sweep_rng, QuadratureSpec};

/// Which of the four kernel families a kernel belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Povzner,
    SoftSphere,
    EnskogShell,
    RevisedEnskog,
}

/// How the spatial delocalization integral is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelEvalMode {
    /// `B` is a function; partners range over the ball `|x - y| <= R`.
    Density,
    /// `B` carries a Dirac shell; partners sit at `x +- 2 r n`, `n` on S^2,
    /// with surface weight `4 r^2`.
    Shell,
}

/// Nonnegative compactly supported radial profile `b` on `[0, inf)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum RadialProfile {
    /// `amplitude` on `[0, radius)`, zero beyond.
    Indicator { radius: f64, amplitude: f64 },
    /// `amplitude * (1 - s/radius)` on `[0, radius)`.
    Triangle { radius: f64, amplitude: f64 },
    /// `amplitude * exp(1 - 1/(1 - (s/radius)^2))`: smooth, compact support.
    SmoothBump { radius: f64, amplitude: f64 },
    /// Piecewise-linear table; zero beyond the last abscissa.
    Table { xs: Vec<f64>, ys: Vec<f64> },
}

impl RadialProfile {
    pub fn validate(&self) -> Result<()> {
        match self {
            RadialProfile::Indicator { radius, amplitude }
            | RadialProfile::Triangle { radius, amplitude }
            | RadialProfile::SmoothBump { radius, amplitude } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "radial profile radius must be positive, got {radius}"
                    )));
                }
                if !(amplitude.is_finite() && *amplitude >= 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "radial profile amplitude must be nonnegative, got {amplitude}"
                    )));
                }
                Ok(())
            }
            RadialProfile::Table { xs, ys } => {
                if xs.len() < 2 || xs.len() != ys.len() {
                    return Err(Error::InvalidInput(
                        "tabulated profile needs matching xs/ys with at least 2 points".into(),
                    ));
                }
                if xs.windows(2).any(|w| !(w[1] > w[0])) || xs[0] != 0.0 {
                    return Err(Error::InvalidInput(
                        "tabulated profile abscissas must start at 0 and increase".into(),
                    ));
                }
                if ys.iter().any(|y| !y.is_finite() || *y < 0.0) {
                    return Err(Error::InvalidInput(
                        "tabulated profile values must be finite and nonnegative".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Largest `s` with `b(s) != 0`.
    pub fn support_radius(&self) -> f64 {
        match self {
            RadialProfile::Indicator { radius, .. }
            | RadialProfile::Triangle { radius, .. }
            | RadialProfile::SmoothBump { radius, .. } => *radius,
            RadialProfile::Table { xs, .. } => *xs.last().unwrap(),
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        if s < 0.0 {
            return 0.0;
        }
        match self {
            RadialProfile::Indicator { radius, amplitude } => {
                if s < *radius {
                    *amplitude
                } else {
                    0.0
                }
            }
            RadialProfile::Triangle { radius, amplitude } => {
                if s < *radius {
                    amplitude * (1.0 - s / radius)
                } else {
                    0.0
                }
            }
            RadialProfile::SmoothBump { radius, amplitude } => {
                let q = s / radius;
                if q < 1.0 {
                    amplitude * (1.0 - 1.0 / (1.0 - q * q)).exp()
                } else {
                    0.0
                }
            }
            RadialProfile::Table { xs, ys } => {
                let last = *xs.last().unwrap();
                if s >= last {
                    return 0.0;
                }
                let i = xs.partition_point(|&x| x <= s).min(xs.len() - 1);
                if i == 0 {
                    return ys[0];
                }
                let (x0, x1) = (xs[i - 1], xs[i]);
                let t = (s - x0) / (x1 - x0);
                ys[i - 1] * (1.0 - t) + ys[i] * t
            }
        }
    }
}

/// Mollifier `zeta`: nonnegative, supported on [-1, 1], unit integral.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Mollifier {
    /// `(15/16) (1 - s^2)^2` on [-1, 1].
    Quartic,
    /// Piecewise-linear table on [-1, 1]; must integrate to 1.
    Table { xs: Vec<f64>, ys: Vec<f64> },
}

impl Mollifier {
    pub fn validate(&self) -> Result<()> {
        match self {
            Mollifier::Quartic => Ok(()),
            Mollifier::Table { xs, ys } => {
                if xs.len() < 2 || xs.len() != ys.len() {
                    return Err(Error::InvalidInput(
                        "tabulated mollifier needs matching xs/ys with at least 2 points".into(),
                    ));
                }
                if xs.windows(2).any(|w| !(w[1] > w[0]))
                    || (xs[0] - (-1.0)).abs() > 1e-12
                    || (xs[xs.len() - 1] - 1.0).abs() > 1e-12
                {
                    return Err(Error::InvalidInput(
                        "tabulated mollifier abscissas must increase from -1 to 1".into(),
                    ));
                }
                if ys.iter().any(|y| !y.is_finite() || *y < 0.0) {
                    return Err(Error::InvalidInput(
                        "tabulated mollifier values must be finite and nonnegative".into(),
                    ));
                }
                // Trapezoid integral of the piecewise-linear table is exact.
                let mut total = 0.0;
                for i in 1..xs.len() {
                    total += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
                }
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidInput(format!(
                        "tabulated mollifier integrates to {total}, expected 1"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        if !(-1.0..1.0).contains(&t) {
            return 0.0;
        }
        match self {
            Mollifier::Quartic => {
                let q = 1.0 - t * t;
                15.0 / 16.0 * q * q
            }
            Mollifier::Table { xs, ys } => {
                let i = xs.partition_point(|&x| x <= t).min(xs.len() - 1);
                if i == 0 {
                    return ys[0];
                }
                let (x0, x1) = (xs[i - 1], xs[i]);
                let u = (t - x0) / (x1 - x0);
                ys[i - 1] * (1.0 - u) + ys[i] * u
            }
        }
    }
}

/// Max observed deviations from the three structural kernel properties:
/// pair-swap symmetry, collisional invariance, and compact support.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub max_violation_swap: f64,
    pub max_violation_collision: f64,
    pub max_violation_support: f64,
    pub sample_count: usize,
}

impl SymmetryReport {
    pub fn max_violation(&self) -> f64 {
        self.max_violation_swap
            .max(self.max_violation_collision)
            .max(self.max_violation_support)
    }
}

/// One of the four delocalized collision kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionKernel {
    kind: KernelKind,
    profile: Option<RadialProfile>,
    shell_radius: f64,
    mollifier_width: f64,
    mollifier: Option<Mollifier>,
    y_coefficient: f64,
    support_radius: f64,
    /// Test hook: adds `defect * x_1` to density values to break pair-swap
    /// symmetry on purpose (negative controls only).
    symmetry_defect: f64,
    /// Opt-in definition of the radial tail for Shell kernels.
    shell_beta: bool,
}

impl CollisionKernel {
    /// Povzner kernel `B = b(|x-y|) |(dv | n_{x,y})|`.
    pub fn povzner(profile: RadialProfile) -> Result<Self> {
        profile.validate()?;
        let support = profile.support_radius();
        Ok(CollisionKernel {
            kind: KernelKind::Povzner,
            profile: Some(profile),
            shell_radius: 0.0,
            mollifier_width: 0.0,
            mollifier: None,
            y_coefficient: 0.0,
            support_radius: support,
            symmetry_defect: 0.0,
            shell_beta: false,
        })
    }

    /// Soft-sphere kernel `B = zeta_eps(|x-y| - 2r) |(dv | n_{x,y})|`,
    /// supported on the annulus `2r - eps <= |x-y| <= 2r + eps`.
    pub fn soft_sphere(r: f64, eps: f64, mollifier: Mollifier) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidInput(format!(
                "soft-sphere radius must be positive, got {r}"
            )));
        }
        if !(eps.is_finite() && eps > 0.0 && eps <= 2.0 * r) {
            return Err(Error::InvalidInput(format!(
                "soft-sphere width must satisfy 0 < eps <= 2r, got {eps}"
            )));
        }
        mollifier.validate()?;
        Ok(CollisionKernel {
            kind: KernelKind::SoftSphere,
            profile: None,
            shell_radius: r,
            mollifier_width: eps,
            mollifier: Some(mollifier),
            y_coefficient: 0.0,
            support_radius: 2.0 * r + eps,
            symmetry_defect: 0.0,
            shell_beta: false,
        })
    }

    /// Enskog shell kernel: contact at distance `2r`, weight `4 r^2`.
    pub fn enskog_shell(r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidInput(format!(
                "shell radius must be positive, got {r}"
            )));
        }
        Ok(CollisionKernel {
            kind: KernelKind::EnskogShell,
            profile: None,
            shell_radius: r,
            mollifier_width: 0.0,
            mollifier: None,
            y_coefficient: 0.0,
            support_radius: 2.0 * r,
            symmetry_defect: 0.0,
            shell_beta: false,
        })
    }

    /// Revised Enskog kernel: shell contact enhanced by
    /// `Y(rho1, rho2) = 1 + c (rho1 + rho2)/2`.
    pub fn revised_enskog(r: f64, c: f64) -> Result<Self> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "enhancement coefficient must be nonnegative, got {c}"
            )));
        }
        let mut k = Self::enskog_shell(r)?;
        k.kind = KernelKind::RevisedEnskog;
        k.y_coefficient = c;
        Ok(k)
    }

    /// Negative-control builder: perturbs density values by `defect * x_1`,
    /// deliberately breaking pair-swap symmetry.
    pub fn with_symmetry_defect(mut self, defect: f64) -> Self {
        self.symmetry_defect = defect;
        self
    }

    /// Opt in to the formal shell tail `beta(s) = 4 r^2 1_{s < 2r}`.
    pub fn with_shell_beta(mut self, enabled: bool) -> Self {
        self.shell_beta = enabled;
        self
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn mode(&self) -> KernelEvalMode {
        match self.kind {
            KernelKind::Povzner | KernelKind::SoftSphere => KernelEvalMode::Density,
            KernelKind::EnskogShell | KernelKind::RevisedEnskog => KernelEvalMode::Shell,
        }
    }

    /// Radius of the sphere of influence: `B(x, y, .) = 0` for `|x-y| > R`.
    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn shell_radius(&self) -> f64 {
        self.shell_radius
    }

    pub fn mollifier_width(&self) -> f64 {
        self.mollifier_width
    }

    pub fn symmetry_defect(&self) -> f64 {
        self.symmetry_defect
    }

    /// Density enhancement factor; 1 for every kernel except RevisedEnskog.
    #[inline]
    pub fn enhancement(&self, rho1: f64, rho2: f64) -> f64 {
        match self.kind {
            KernelKind::RevisedEnskog => 1.0 + self.y_coefficient * 0.5 * (rho1 + rho2),
            _ => 1.0,
        }
    }

    /// The radial factor `b(s)` (Povzner) or `theta_{eps,r}(s)` (soft
    /// sphere). Errors for Shell kernels, which have no radial density.
    pub fn radial_b(&self, s: f64) -> Result<f64> {
        match self.kind {
            KernelKind::Povzner => Ok(self.profile.as_ref().unwrap().eval(s)),
            KernelKind::SoftSphere => {
                let eps = self.mollifier_width;
                let t = (s - 2.0 * self.shell_radius) / eps;
                Ok(self.mollifier.as_ref().unwrap().eval(t) / eps)
            }
            _ => Err(Error::ModeMismatch(
                "Shell kernels have no radial density b".into(),
            )),
        }
    }

    /// Density-mode kernel value `B(x, y, dv)`; zero outside the support.
    ///
    /// `rho_at_x`/`varpi_at_y` are accepted for signature uniformity with
    /// [`CollisionKernel::eval_shell`]; the two density-mode kernels do not
    /// depend on them.
    pub fn eval_density(
        &self,
        rho_at_x: f64,
        varpi_at_y: f64,
        x: Vec3,
        y: Vec3,
        dv: Vec3,
    ) -> Result<f64> {
        if self.mode() != KernelEvalMode::Density {
            return Err(Error::ModeMismatch(format!(
                "eval_density called on Shell-mode kernel {:?}",
                self.kind
            )));
        }
        if !(rho_at_x >= 0.0 && varpi_at_y >= 0.0) {
            return Err(Error::InvalidInput("densities must be nonnegative".into()));
        }
        let s = (x - y).norm();
        if s > self.support_radius {
            return Ok(0.0);
        }
        let n = unit_between(x, y)?;
        let radial = self.radial_b(s)?;
        Ok(radial * dv.dot(n).abs() + self.symmetry_defect * x.x)
    }

    /// Shell-mode kernel value `Y(rho, varpi) * 4 r^2 * |(dv | n)|`; the
    /// caller applies directional positive parts and picks the contact point
    /// `x -+ 2 r n` per gain/loss term.
    pub fn eval_shell(
        &self,
        rho_at_x: f64,
        varpi_at_contact: f64,
        dv: Vec3,
        n: Vec3,
    ) -> Result<f64> {
        if self.mode() != KernelEvalMode::Shell {
            return Err(Error::ModeMismatch(format!(
                "eval_shell called on Density-mode kernel {:?}",
                self.kind
            )));
        }
        if !(rho_at_x >= 0.0 && varpi_at_contact >= 0.0) {
            return Err(Error::InvalidInput("densities must be nonnegative".into()));
        }
        if (n.norm() - 1.0).abs() > crate::kinematics::UNIT_TOL {
            return Err(Error::InvalidInput(format!(
                "eval_shell: |n| = {} is not a unit vector",
                n.norm()
            )));
        }
        let r = self.shell_radius;
        Ok(self.enhancement(rho_at_x, varpi_at_contact) * 4.0 * r * r * dv.dot(n).abs())
    }

    /// Radial tail `beta(rr) = integral of b over [rr, inf)`, evaluated by
    /// adaptive Simpson quadrature (even where a closed form exists).
    ///
    /// Shell kernels have no radial density; the formal tail
    /// `4 r^2 1_{rr < 2r}` is available only after opting in with
    /// [`CollisionKernel::with_shell_beta`].
    pub fn beta_tail(&self, rr: f64) -> Result<f64> {
        if !(rr >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "beta_tail takes a nonnegative radius, got {rr}"
            )));
        }
        match self.mode() {
            KernelEvalMode::Density => {
                if rr >= self.support_radius {
                    return Ok(0.0);
                }
                let f = |s: f64| self.radial_b(s).unwrap_or(0.0);
                Ok(adaptive_simpson(&f, rr, self.support_radius, 1e-11, 48))
            }
            KernelEvalMode::Shell => {
                if self.shell_beta {
                    let r = self.shell_radius;
                    Ok(if rr < 2.0 * r { 4.0 * r * r } else { 0.0 })
                } else {
                    Err(Error::Unsupported(
                        "radial tail for Shell kernels requires with_shell_beta(true)".into(),
                    ))
                }
            }
        }
    }

    /// Precompute `beta` on a uniform grid for fast interpolation in sweeps.
    pub fn beta_table(&self, n: usize) -> Result<BetaTable> {
        if n < 2 {
            return Err(Error::InvalidInput("beta table needs >= 2 nodes".into()));
        }
        let r_max = self.support_radius;
        let mut vals = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let s = r_max * i as f64 / n as f64;
            vals.push(self.beta_tail(s)?);
        }
        Ok(BetaTable { r_max, vals })
    }

    /// Randomized audit of the three structural kernel properties.
    pub fn symmetry_report(&self, spec: &QuadratureSpec) -> SymmetryReport {
        let n = spec.mc_samples.max(1);
        let base = sweep_rng(spec.seed, label_of("symmetry_report"));
        let mut report = SymmetryReport {
            sample_count: n,
            ..SymmetryReport::default()
        };
        let scale = self.support_radius.max(1.0);
        for i in 0..n {
            let mut rng = sample_rng(&base, i as u64);
            let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng, a: f64| {
                Vec3::new(
                    a * (2.0 * rng.random::<f64>() - 1.0),
                    a * (2.0 * rng.random::<f64>() - 1.0),
                    a * (2.0 * rng.random::<f64>() - 1.0),
                )
            };
            let x = rand_vec(&mut rng, scale);
            let v = rand_vec(&mut rng, 3.0);
            let w = rand_vec(&mut rng, 3.0);
            let rho1 = rng.random::<f64>();
            let rho2 = rng.random::<f64>();
            match self.mode() {
                KernelEvalMode::Density => {
                    // Partner inside the support for (i)-(ii), outside for (iii).
                    let dir = match rand_vec(&mut rng, 1.0).normalized() {
                        Ok(d) => d,
                        Err(_) => continue,
                    };
                    let y = x + dir * (0.05 * scale + 0.9 * rng.random::<f64>() * self.support_radius);
                    let b_fwd = self.eval_density(rho1, rho2, x, y, v - w).unwrap_or(0.0);
                    let b_swp = self.eval_density(rho2, rho1, y, x, w - v).unwrap_or(0.0);
                    report.max_violation_swap =
                        report.max_violation_swap.max((b_fwd - b_swp).abs());
                    if let Ok(nxy) = unit_between(x, y) {
                        let post = collide_unit(v, w, nxy);
                        let b_post = self
                            .eval_density(rho1, rho2, x, y, post.v_prime - post.w_prime)
                            .unwrap_or(0.0);
                        report.max_violation_collision =
                            report.max_violation_collision.max((b_post - b_fwd).abs());
                    }
                    let y_out =
                        x + dir * (self.support_radius * (1.0 + 1e-9) + rng.random::<f64>());
                    let b_out = self.eval_density(rho1, rho2, x, y_out, v - w).unwrap_or(0.0);
                    report.max_violation_support = report.max_violation_support.max(b_out.abs());
                }
                KernelEvalMode::Shell => {
                    let dir = match rand_vec(&mut rng, 1.0).normalized() {
                        Ok(d) => d,
                        Err(_) => continue,
                    };
                    // Swap x <-> y = x + 2 r n flips the contact normal and
                    // the density arguments.
                    let b_fwd = self.eval_shell(rho1, rho2, v - w, dir).unwrap_or(0.0);
                    let b_swp = self.eval_shell(rho2, rho1, w - v, -dir).unwrap_or(0.0);
                    report.max_violation_swap =
                        report.max_violation_swap.max((b_fwd - b_swp).abs());
                    let post = collide_unit(v, w, dir);
                    let b_post = self
                        .eval_shell(rho1, rho2, post.v_prime - post.w_prime, dir)
                        .unwrap_or(0.0);
                    report.max_violation_collision =
                        report.max_violation_collision.max((b_post - b_fwd).abs());
                    // Support is exact by construction in Shell mode.
                }
            }
        }
        report
    }
}

/// Linear-interpolation table of the radial tail `beta` on `[0, r_max]`.
#[derive(Clone, Debug)]
pub struct BetaTable {
    r_max: f64,
    vals: Vec<f64>,
}

impl BetaTable {
    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return self.vals[0];
        }
        if s >= self.r_max {
            return 0.0;
        }
        let n = self.vals.len() - 1;
        let t = s / self.r_max * n as f64;
        let i = (t as usize).min(n - 1);
        let frac = t - i as f64;
        self.vals[i] * (1.0 - frac) + self.vals[i + 1] * frac
    }

    pub fn at_zero(&self) -> f64 {
        self.vals[0]
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
}

fn adaptive_simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let left = simpson(f, a, m);
    let right = simpson(f, m, b);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson_rec(f, a, m, left, 0.5 * tol, depth - 1)
        + adaptive_simpson_rec(f, m, b, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub(crate) fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    adaptive_simpson_rec(f, a, b, simpson(f, a, b), tol, depth)
}
