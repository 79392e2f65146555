//! Quadrature building blocks: Gauss-Legendre segments, a degree-7 26-point
//! spherical rule, tensor ball/box rules, and seeded Monte Carlo sweeps.
//!
//! Determinism contract: every Monte Carlo sample owns a counter-indexed
//! ChaCha8 stream derived from `(seed, label, sample index)`, and all parallel
//! reductions accumulate partial sums in fixed index order. Results are
//! therefore bit-identical for any rayon worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as RandDist, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::kinematics::Vec3;

/// Evaluation strategy for integral operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadMode {
    /// Deterministic tensor-product rules (no standard error).
    Tensor,
    /// Seeded Monte Carlo with importance sampling (reports standard errors).
    MonteCarlo,
}

/// Node counts, sample counts, and seeds for all integral operators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureSpec {
    pub mode: QuadMode,
    /// Radial Gauss-Legendre nodes for ball rules.
    pub radial_nodes: usize,
    /// Spherical rule selector: 26 and 6 are native, other values use a
    /// product rule of comparable size.
    pub angular_nodes: usize,
    /// Per-axis Gauss-Legendre nodes for velocity boxes.
    pub w_nodes: usize,
    /// Gauss-Legendre nodes on finite segments (the `s` integrals).
    pub s_nodes: usize,
    /// Gauss-Legendre nodes on the rotation angle interval [0, pi/2].
    pub theta_nodes: usize,
    /// Monte Carlo sample count.
    pub mc_samples: usize,
    /// Base seed for all Monte Carlo streams.
    pub seed: u64,
    /// Half-width of the velocity box used by tensor velocity rules.
    pub v_box: f64,
    /// Widening factor applied to importance proposals derived from states.
    pub proposal_widen: f64,
    /// Optional override for the Gaussian reference width of velocity
    /// proposals; `None` derives the width from the integrated state.
    pub w_reference_width: Option<f64>,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            mode: QuadMode::Tensor,
            radial_nodes: 8,
            angular_nodes: 26,
            w_nodes: 12,
            s_nodes: 8,
            theta_nodes: 8,
            mc_samples: 4096,
            seed: 0,
            v_box: 5.0,
            proposal_widen: 1.25,
            w_reference_width: None,
        }
    }
}

impl QuadratureSpec {
    pub fn tensor() -> Self {
        Self::default()
    }

    pub fn monte_carlo(mc_samples: usize, seed: u64) -> Self {
        QuadratureSpec {
            mode: QuadMode::MonteCarlo,
            mc_samples,
            seed,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.mc_samples = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.radial_nodes == 0
            || self.angular_nodes == 0
            || self.w_nodes == 0
            || self.s_nodes == 0
            || self.theta_nodes == 0
        {
            return Err(Error::InvalidInput(
                "quadrature node counts must be positive".into(),
            ));
        }
        if self.mode == QuadMode::MonteCarlo && self.mc_samples < 2 {
            return Err(Error::InvalidInput(
                "Monte Carlo mode needs at least 2 samples".into(),
            ));
        }
        if !(self.v_box > 0.0) {
            return Err(Error::InvalidInput("v_box must be positive".into()));
        }
        Ok(())
    }
}

/// A scalar value with its Monte Carlo standard error (0 for tensor rules).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0 }
    }

    /// Standard error of a difference/sum of two independent estimates.
    pub fn combined_stderr(a: &Estimate, b: &Estimate) -> f64 {
        a.stderr.hypot(b.stderr)
    }
}

/// A vector of correlated estimates produced by one shared-sample sweep.
#[derive(Clone, Debug, Default)]
pub struct VecEstimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
}

impl VecEstimate {
    pub fn get(&self, k: usize) -> Estimate {
        Estimate {
            value: self.value[k],
            stderr: self.stderr[k],
        }
    }
}

// ---------------------------------------------------------------------------
// Seeded streams
// ---------------------------------------------------------------------------

/// FNV-1a combination of integer parts into one stream label.
pub fn stream_label(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for p in parts {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Label for a named integral family.
pub fn label_of(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Label mixing a family name with evaluation-point data, so estimates at
/// distinct points draw independent streams.
pub fn label_with(name: &str, data: &[f64]) -> u64 {
    let mut parts = Vec::with_capacity(data.len() + 1);
    parts.push(label_of(name));
    parts.extend(data.iter().map(|d| d.to_bits()));
    stream_label(&parts)
}

/// Van der Corput radical inverse of `i` in the given base.
pub fn halton(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Low-discrepancy points in the box `center +- half` (Halton bases 2, 3, 5,
/// starting at index 1).
pub fn halton_points3(n: usize, center: Vec3, half: Vec3) -> Vec<Vec3> {
    (1..=n as u64)
        .map(|i| {
            Vec3::new(
                center.x + half.x * (2.0 * halton(i, 2) - 1.0),
                center.y + half.y * (2.0 * halton(i, 3) - 1.0),
                center.z + half.z * (2.0 * halton(i, 5) - 1.0),
            )
        })
        .collect()
}

/// Base generator for a `(seed, label)` pair; per-sample generators are
/// derived by selecting the ChaCha stream equal to the sample index.
pub fn sweep_rng(seed: u64, label: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&label.to_le_bytes());
    key[16..24].copy_from_slice(&0x9e3779b97f4a7c15u64.to_le_bytes());
    key[24..32].copy_from_slice(&0x2545f4914f6cdd1du64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Generator for one sample: the base generator on its own counter stream.
#[inline]
pub fn sample_rng(base: &ChaCha8Rng, index: u64) -> ChaCha8Rng {
    let mut rng = base.clone();
    rng.set_stream(index);
    rng
}

// ---------------------------------------------------------------------------
// Gauss-Legendre
// ---------------------------------------------------------------------------

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn gauss_legendre_cache() -> &'static Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1],
/// computed by Newton iteration on the Legendre polynomial and cached.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre needs at least one node");
    if let Some(hit) = gauss_legendre_cache().lock().unwrap().get(&n) {
        return hit.clone();
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, dp) = legendre_and_derivative(n, 0.0);
        weights[n / 2] = 2.0 / (dp * dp);
    }
    gauss_legendre_cache()
        .lock()
        .unwrap()
        .insert(n, (nodes.clone(), weights.clone()));
    (nodes, weights)
}

/// Gauss-Legendre rule mapped to [a, b], as (node, weight) pairs.
pub fn gl_nodes(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let (xs, ws) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    xs.iter()
        .zip(ws.iter())
        .map(|(&x, &w)| (mid + half * x, half * w))
        .collect()
}

// ---------------------------------------------------------------------------
// Spherical rules
// ---------------------------------------------------------------------------

/// Points and weights of a rule on the unit sphere; weights sum to 4*pi.
///
/// `n = 26`: the classical 26-point rule exact for polynomials of degree 7
/// (octahedron vertices 1/21, edge midpoints 4/105, cube vertices 9/280).
/// `n = 6`: octahedron vertices, exact to degree 3. Other `n`: a
/// Gauss-Legendre (polar) x uniform (azimuth) product rule of similar size.
pub fn sphere_nodes(n: usize) -> Vec<(Vec3, f64)> {
    let four_pi = 4.0 * std::f64::consts::PI;
    match n {
        6 => {
            let w = four_pi / 6.0;
            axis_points().into_iter().map(|p| (p, w)).collect()
        }
        26 => {
            let mut out = Vec::with_capacity(26);
            let w1 = four_pi / 21.0;
            for p in axis_points() {
                out.push((p, w1));
            }
            let w2 = four_pi * 4.0 / 105.0;
            let r = std::f64::consts::FRAC_1_SQRT_2;
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                for si in [-1.0, 1.0] {
                    for sj in [-1.0, 1.0] {
                        let mut c = [0.0; 3];
                        c[i] = si * r;
                        c[j] = sj * r;
                        out.push((Vec3::new(c[0], c[1], c[2]), w2));
                    }
                }
            }
            let w3 = four_pi * 9.0 / 280.0;
            let t = 1.0 / 3.0f64.sqrt();
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        out.push((Vec3::new(sx * t, sy * t, sz * t), w3));
                    }
                }
            }
            out
        }
        _ => {
            let polar = ((n as f64 / 2.0).sqrt().round() as usize).max(1);
            let az = 2 * polar;
            let mut out = Vec::with_capacity(polar * az);
            for (c, wc) in gl_nodes(-1.0, 1.0, polar) {
                let s = (1.0 - c * c).max(0.0).sqrt();
                for k in 0..az {
                    let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / az as f64;
                    out.push((
                        Vec3::new(s * phi.cos(), s * phi.sin(), c),
                        wc * 2.0 * std::f64::consts::PI / az as f64,
                    ));
                }
            }
            out
        }
    }
}

fn axis_points() -> Vec<Vec3> {
    vec![
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(-1.0, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, -1.0, 0.0),
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::new(0.0, 0.0, -1.0),
    ]
}

/// Tensor rule for a ball: radial Gauss-Legendre (with the r^2 Jacobian
/// folded into the weights) times a spherical rule. Weights sum to the ball
/// volume.
pub fn ball_nodes(spec: &QuadratureSpec, center: Vec3, radius: f64) -> Vec<(Vec3, f64)> {
    if radius <= 0.0 {
        return Vec::new();
    }
    let sph = sphere_nodes(spec.angular_nodes);
    let mut out = Vec::with_capacity(spec.radial_nodes * sph.len());
    for (r, wr) in gl_nodes(0.0, radius, spec.radial_nodes) {
        for &(dir, wd) in &sph {
            out.push((center + dir * r, wr * r * r * wd));
        }
    }
    out
}

/// Tensor rule for the cube [-half, half]^3.
pub fn box3_nodes(half: f64, n_per_axis: usize) -> Vec<(Vec3, f64)> {
    let axis = gl_nodes(-half, half, n_per_axis);
    let mut out = Vec::with_capacity(axis.len().pow(3));
    for &(x, wx) in &axis {
        for &(y, wy) in &axis {
            for &(z, wz) in &axis {
                out.push((Vec3::new(x, y, z), wx * wy * wz));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sampling primitives
// ---------------------------------------------------------------------------

/// Standard normal 3-vector.
#[inline]
pub fn sample_normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    let z: f64 = StandardNormal.sample(rng);
    Vec3::new(x, y, z)
}

/// Uniform point in the unit ball (direction from normals, radius by the
/// cube-root trick; a fixed number of draws per sample).
#[inline]
pub fn sample_unit_ball(rng: &mut ChaCha8Rng) -> Vec3 {
    use rand::Rng;
    let mut dir = sample_normal3(rng);
    let mut n = dir.norm();
    // A zero normal triple has probability zero; fall back deterministically.
    if n == 0.0 {
        dir = Vec3::new(1.0, 0.0, 0.0);
        n = 1.0;
    }
    let u: f64 = rng.random();
    dir * (u.cbrt() / n)
}

/// Importance proposal for velocity-like integrals over R^3.
#[derive(Clone, Copy, Debug)]
pub enum VelocityProposal {
    /// Independent per-axis normals centered at `center`.
    Gaussian { center: Vec3, sigma: Vec3 },
    /// Uniform on the cube [-half, half]^3.
    Box { half: f64 },
}

impl VelocityProposal {
    /// Draw a point and the importance weight `1/pdf`.
    #[inline]
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, f64) {
        use rand::Rng;
        match *self {
            VelocityProposal::Gaussian { center, sigma } => {
                let z = sample_normal3(rng);
                let p = Vec3::new(
                    center.x + sigma.x * z.x,
                    center.y + sigma.y * z.y,
                    center.z + sigma.z * z.z,
                );
                let norm = (2.0 * std::f64::consts::PI).powf(1.5) * sigma.x * sigma.y * sigma.z;
                let q = (-0.5 * z.norm_sq()).exp() / norm;
                (p, 1.0 / q)
            }
            VelocityProposal::Box { half } => {
                let u = Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
                let p = Vec3::new(
                    half * (2.0 * u.x - 1.0),
                    half * (2.0 * u.y - 1.0),
                    half * (2.0 * u.z - 1.0),
                );
                (p, (2.0 * half).powi(3))
            }
        }
    }

    /// Widen the proposal by a scalar factor (covers rotated supports).
    pub fn widened(&self, factor: f64) -> VelocityProposal {
        match *self {
            VelocityProposal::Gaussian { center, sigma } => VelocityProposal::Gaussian {
                center,
                sigma: sigma * factor,
            },
            VelocityProposal::Box { half } => VelocityProposal::Box { half: half * factor },
        }
    }
}

/// Importance proposal for spatial integrals.
///
/// `SlabPeriod` encodes the per-unit-cross-section convention for slab
/// states: points are drawn on the periodic segment with weight `length`.
#[derive(Clone, Copy, Debug)]
pub enum SpatialProposal {
    Gaussian { center: Vec3, sigma: Vec3 },
    SlabPeriod { length: f64 },
}

impl SpatialProposal {
    #[inline]
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, f64) {
        use rand::Rng;
        match *self {
            SpatialProposal::Gaussian { center, sigma } => {
                let z = sample_normal3(rng);
                let p = Vec3::new(
                    center.x + sigma.x * z.x,
                    center.y + sigma.y * z.y,
                    center.z + sigma.z * z.z,
                );
                let norm = (2.0 * std::f64::consts::PI).powf(1.5) * sigma.x * sigma.y * sigma.z;
                let q = (-0.5 * z.norm_sq()).exp() / norm;
                (p, 1.0 / q)
            }
            SpatialProposal::SlabPeriod { length } => {
                let u: f64 = rng.random();
                (Vec3::new(u * length, 0.0, 0.0), length)
            }
        }
    }

    pub fn widened(&self, factor: f64) -> SpatialProposal {
        match *self {
            SpatialProposal::Gaussian { center, sigma } => SpatialProposal::Gaussian {
                center,
                sigma: sigma * factor,
            },
            s @ SpatialProposal::SlabPeriod { .. } => s,
        }
    }
}

// ---------------------------------------------------------------------------
// Deterministic parallel sweeps
// ---------------------------------------------------------------------------

const CHUNK: usize = 1024;

struct ChunkAcc {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

/// Monte Carlo sweep evaluating `dim` correlated integrands on `n` shared
/// samples. `eval(index, rng, out)` fills `out` with the weighted integrand
/// values of sample `index`. Returns componentwise means and standard errors.
///
/// Deterministic: sample `i` always sees the same generator, and partial sums
/// combine in fixed chunk order regardless of the rayon worker count.
pub fn mc_sweep<F>(dim: usize, n: usize, seed: u64, label: u64, eval: F) -> Result<VecEstimate>
where
    F: Fn(usize, &mut ChaCha8Rng, &mut [f64]) -> Result<()> + Sync,
{
    if n < 2 {
        return Err(Error::InvalidInput(
            "mc_sweep needs at least 2 samples".into(),
        ));
    }
    let base = sweep_rng(seed, label);
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Result<ChunkAcc>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut acc = ChunkAcc {
                sum: vec![0.0; dim],
                sumsq: vec![0.0; dim],
            };
            let mut buf = vec![0.0; dim];
            for i in lo..hi {
                buf.iter_mut().for_each(|v| *v = 0.0);
                let mut rng = sample_rng(&base, i as u64);
                eval(i, &mut rng, &mut buf)?;
                for (k, &v) in buf.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite integrand value {v} at sample {i}, component {k}"
                        )));
                    }
                    acc.sum[k] += v;
                    acc.sumsq[k] += v * v;
                }
            }
            Ok(acc)
        })
        .collect();

    let mut sum = vec![0.0; dim];
    let mut sumsq = vec![0.0; dim];
    for p in partials {
        let acc = p?;
        for k in 0..dim {
            sum[k] += acc.sum[k];
            sumsq[k] += acc.sumsq[k];
        }
    }
    let nf = n as f64;
    let mut value = vec![0.0; dim];
    let mut stderr = vec![0.0; dim];
    for k in 0..dim {
        let mean = sum[k] / nf;
        let var = ((sumsq[k] - nf * mean * mean) / (nf - 1.0)).max(0.0);
        value[k] = mean;
        stderr[k] = (var / nf).sqrt();
    }
    Ok(VecEstimate {
        value,
        stderr,
        samples: n,
    })
}

/// Deterministic parallel sum over `n_nodes` tensor nodes; `eval(i, out)`
/// adds node `i`'s weighted contribution into `out`.
pub fn tensor_sweep<F>(dim: usize, n_nodes: usize, eval: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let n_chunks = n_nodes.div_ceil(CHUNK).max(1);
    let partials: Vec<Result<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n_nodes);
            let mut acc = vec![0.0; dim];
            let mut buf = vec![0.0; dim];
            for i in lo..hi {
                buf.iter_mut().for_each(|v| *v = 0.0);
                eval(i, &mut buf)?;
                for (k, &v) in buf.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite integrand value {v} at node {i}, component {k}"
                        )));
                    }
                    acc[k] += v;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; dim];
    for p in partials {
        let acc = p?;
        for k in 0..dim {
            total[k] += acc[k];
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Integral operators
// ---------------------------------------------------------------------------

/// Integral of `f` over the ball B(center, radius).
pub fn integrate_ball<F>(
    spec: &QuadratureSpec,
    center: Vec3,
    radius: f64,
    f: F,
) -> Result<Estimate>
where
    F: Fn(Vec3) -> f64 + Sync,
{
    spec.validate()?;
    if !(radius >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "ball radius must be nonnegative, got {radius}"
        )));
    }
    if radius == 0.0 {
        return Ok(Estimate::exact(0.0));
    }
    match spec.mode {
        QuadMode::Tensor => {
            let nodes = ball_nodes(spec, center, radius);
            let total = tensor_sweep(1, nodes.len(), |i, out| {
                let (p, w) = nodes[i];
                out[0] = w * f(p);
                Ok(())
            })?;
            Ok(Estimate::exact(total[0]))
        }
        QuadMode::MonteCarlo => {
            let vol = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
            let est = mc_sweep(
                1,
                spec.mc_samples,
                spec.seed,
                label_of("integrate_ball"),
                |_, rng, out| {
                    let p = center + sample_unit_ball(rng) * radius;
                    out[0] = vol * f(p);
                    Ok(())
                },
            )?;
            Ok(est.get(0))
        }
    }
}

/// Integral of `f` over velocity space, with an explicit importance proposal
/// in Monte Carlo mode and the `[-v_box, v_box]^3` Gauss box otherwise.
pub fn integrate_velocity_with<F>(
    spec: &QuadratureSpec,
    proposal: &VelocityProposal,
    f: F,
) -> Result<Estimate>
where
    F: Fn(Vec3) -> f64 + Sync,
{
    spec.validate()?;
    match spec.mode {
        QuadMode::Tensor => {
            let nodes = box3_nodes(spec.v_box, spec.w_nodes);
            let total = tensor_sweep(1, nodes.len(), |i, out| {
                let (p, w) = nodes[i];
                out[0] = w * f(p);
                Ok(())
            })?;
            Ok(Estimate::exact(total[0]))
        }
        QuadMode::MonteCarlo => {
            let est = mc_sweep(
                1,
                spec.mc_samples,
                spec.seed,
                label_of("integrate_velocity"),
                |_, rng, out| {
                    let (p, w) = proposal.sample(rng);
                    out[0] = w * f(p);
                    Ok(())
                },
            )?;
            Ok(est.get(0))
        }
    }
}

/// Velocity integral with the default proposal (standard normal scaled by
/// `w_reference_width` when set).
pub fn integrate_velocity<F>(spec: &QuadratureSpec, f: F) -> Result<Estimate>
where
    F: Fn(Vec3) -> f64 + Sync,
{
    let sigma = spec.w_reference_width.unwrap_or(1.0);
    integrate_velocity_with(
        spec,
        &VelocityProposal::Gaussian {
            center: Vec3::ZERO,
            sigma: Vec3::splat(sigma),
        },
        f,
    )
}

/// Gauss-Legendre integral of `f` over [0, upper]; zero when `upper <= 0`.
/// Deterministic in both modes.
pub fn integrate_segment<F>(spec: &QuadratureSpec, upper: f64, f: F) -> f64
where
    F: Fn(f64) -> f64,
{
    if !(upper > 0.0) {
        return 0.0;
    }
    gl_nodes(0.0, upper, spec.s_nodes)
        .into_iter()
        .map(|(s, w)| w * f(s))
        .sum()
}

/// Gauss-Legendre integral of `f` over the angle interval [0, pi/2].
pub fn integrate_angle<F>(spec: &QuadratureSpec, f: F) -> f64
where
    F: Fn(f64) -> f64,
{
    gl_nodes(0.0, std::f64::consts::FRAC_PI_2, spec.theta_nodes)
        .into_iter()
        .map(|(t, w)| w * f(t))
        .sum()
}
