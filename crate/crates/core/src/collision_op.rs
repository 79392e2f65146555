//! Strong and weak evaluation of the delocalized collision operator
//! `St[f, g]`, plus local-mass and global momentum/energy conservation
//! residuals.
//!
//! Strong evaluation at a phase-space point `(x, v)` integrates partner
//! positions and velocities directly. Weak forms apply the pre/post-collision
//! change of variables and integrate a test function against the loss-side
//! measure only; they are evaluated by importance-sampled Monte Carlo (the
//! flattened integral is 12-dimensional, out of reach of tensor rules).

use rand_chacha::ChaCha8Rng;

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::kernels::{CollisionKernel, KernelEvalMode};
use crate::kinematics::{collide_unit, unit_between, Vec3};
use crate::quadrature::{
    ball_nodes, gauss_legendre, halton_points3, label_with, mc_sweep, sample_unit_ball,
    sphere_nodes, Estimate, QuadMode, QuadratureSpec, SpatialProposal, VecEstimate,
    VelocityProposal,
};
use crate::testfns::TestFunctionXV;

/// Gain/loss split of a strong evaluation at one phase-space point.
#[derive(Clone, Copy, Debug)]
pub struct StEvaluation {
    /// `gain - loss`.
    pub value: f64,
    pub gain: f64,
    pub loss: f64,
    /// Standard error of `value` (0 in Tensor mode).
    pub stderr: f64,
}

/// Conservation residuals for `St[f, f]`.
#[derive(Clone, Debug)]
pub struct ConservationResiduals {
    /// Max over probe points of `|int St dv| / int |St| dv`.
    pub mass_local_max: f64,
    /// Max over probe points of the same ratio's standard error.
    pub mass_stderr_max: f64,
    /// Raw residuals of the symmetrized weak form with `phi = v_i`.
    pub momentum_global: Vec3,
    pub momentum_stderr: Vec3,
    /// Raw residual with `phi = |v|^2`.
    pub energy_global: f64,
    pub energy_stderr: f64,
    /// Gain + loss L1 norms normalizing the global residuals.
    pub momentum_normalizer: f64,
    pub energy_normalizer: f64,
}

/// One sampled partner configuration with everything the weak/strong forms
/// reuse: the phase points of both legs and the post-collision velocities.
pub(crate) struct PairSample {
    pub(crate) x: Vec3,
    pub(crate) v: Vec3,
    pub(crate) y: Vec3,
    pub(crate) w: Vec3,
    pub(crate) v_prime: Vec3,
    pub(crate) w_prime: Vec3,
    /// Product of importance weights for the sampled variables (includes the
    /// kernel magnitude `B`).
    pub(crate) weight: f64,
}

/// Weak-form rows evaluated in a single shared-sample sweep.
pub enum WeakForm<'a> {
    /// `[phi(x, v') - phi(x, v)] f(x,v) g(y,w)` on the loss-side measure.
    Loss(&'a TestFunctionXV),
    /// `1/2 [phi(x,v') + phi(y,w') - phi(x,v) - phi(y,w)] f f` (needs g = f).
    Symmetric(&'a TestFunctionXV),
    /// L1 normalizer `1/2 [|phi(x,v')| + |phi(y,w')| + |phi(x,v)| + |phi(y,w)|] f f`.
    SymmetricNorm(&'a TestFunctionXV),
    /// L1 normalizer `[|phi(x,v')| + |phi(x,v)|] f g` for the Loss row.
    LossNorm(&'a TestFunctionXV),
}

fn needs_densities(kernel: &CollisionKernel) -> bool {
    // Only the revised Enskog enhancement reads densities; skip the lookups
    // otherwise.
    matches!(kernel.kind(), crate::kernels::KernelKind::RevisedEnskog)
}

/// Strong evaluation of `St[f, g]` at `(x, v)`.
///
/// Density mode integrates partners over the support ball; Shell mode
/// integrates contact directions with the gain partner at `x - 2 r n` and
/// the loss partner at `x + 2 r n`.
pub fn st_strong(
    f: &Distribution,
    g: &Distribution,
    kernel: &CollisionKernel,
    x: Vec3,
    v: Vec3,
    spec: &QuadratureSpec,
) -> Result<StEvaluation> {
    spec.validate()?;
    match spec.mode {
        QuadMode::Tensor => st_strong_tensor(f, g, kernel, x, v, spec),
        QuadMode::MonteCarlo => st_strong_mc(f, g, kernel, x, v, spec),
    }
}

fn w_grid(proposal: &VelocityProposal, spec: &QuadratureSpec) -> Vec<(Vec3, f64)> {
    // Per-axis Gauss-Legendre nodes scaled to the proposal width; the box
    // spans `v_box` width-units (or the literal box for slab proposals).
    let (center, scale) = match *proposal {
        VelocityProposal::Gaussian { center, sigma } => {
            (center, sigma * std::f64::consts::SQRT_2)
        }
        VelocityProposal::Box { half } => (Vec3::ZERO, Vec3::splat(half / spec.v_box)),
    };
    let (nodes, weights) = gauss_legendre(spec.w_nodes);
    let mut out = Vec::with_capacity(nodes.len().pow(3));
    for (i1, &t1) in nodes.iter().enumerate() {
        let w1 = spec.v_box * scale.x * weights[i1];
        for (i2, &t2) in nodes.iter().enumerate() {
            let w2 = w1 * spec.v_box * scale.y * weights[i2];
            for (i3, &t3) in nodes.iter().enumerate() {
                let w3 = w2 * spec.v_box * scale.z * weights[i3];
                out.push((
                    Vec3::new(
                        center.x + spec.v_box * scale.x * t1,
                        center.y + spec.v_box * scale.y * t2,
                        center.z + spec.v_box * scale.z * t3,
                    ),
                    w3,
                ));
            }
        }
    }
    out
}

fn st_strong_tensor(
    f: &Distribution,
    g: &Distribution,
    kernel: &CollisionKernel,
    x: Vec3,
    v: Vec3,
    spec: &QuadratureSpec,
) -> Result<StEvaluation> {
    let needs_rho = needs_densities(kernel);
    let rho_fx = if needs_rho { f.density(x) } else { 0.0 };
    let wg = w_grid(&g.velocity_proposal().widened(spec.proposal_widen), spec);
    let mut gain = 0.0;
    let mut loss = 0.0;
    match kernel.mode() {
        KernelEvalMode::Density => {
            for (y, wy) in ball_nodes(spec, x, kernel.support_radius()) {
                let Ok(n) = unit_between(x, y) else { continue };
                let rho_gy = if needs_rho { g.density(y) } else { 0.0 };
                for (w, ww) in &wg {
                    let z = (v - *w).dot(n);
                    if z == 0.0 {
                        continue;
                    }
                    let b = kernel.eval_density(rho_fx, rho_gy, x, y, v - *w)?;
                    if b == 0.0 {
                        continue;
                    }
                    let weight = wy * ww * b;
                    if z > 0.0 {
                        let pair = collide_unit(v, *w, n);
                        gain += weight * f.eval_f(x, pair.v_prime) * g.eval_f(y, pair.w_prime);
                    } else {
                        loss += weight * f.eval_f(x, v) * g.eval_f(y, *w);
                    }
                }
            }
        }
        KernelEvalMode::Shell => {
            let r2 = 2.0 * kernel.shell_radius();
            for (n, wn) in sphere_nodes(spec.angular_nodes) {
                let y_gain = x - n * r2;
                let y_loss = x + n * r2;
                let (rho_g_gain, rho_g_loss) = if needs_rho {
                    (g.density(y_gain), g.density(y_loss))
                } else {
                    (0.0, 0.0)
                };
                for (w, ww) in &wg {
                    let z = (v - *w).dot(n);
                    if z <= 0.0 {
                        continue;
                    }
                    // eval_shell returns Y * 4 r^2 |z|; the indicator z > 0
                    // selects the positive part shared by both terms.
                    let b_gain = kernel.eval_shell(rho_fx, rho_g_gain, v - *w, n)?;
                    let b_loss = kernel.eval_shell(rho_fx, rho_g_loss, v - *w, n)?;
                    let pair = collide_unit(v, *w, n);
                    gain += wn * ww * b_gain * f.eval_f(x, pair.v_prime)
                        * g.eval_f(y_gain, pair.w_prime);
                    loss += wn * ww * b_loss * f.eval_f(x, v) * g.eval_f(y_loss, *w);
                }
            }
        }
    }
    if !(gain.is_finite() && loss.is_finite()) {
        return Err(Error::Numerical("non-finite strong evaluation".into()));
    }
    Ok(StEvaluation {
        value: gain - loss,
        gain,
        loss,
        stderr: 0.0,
    })
}

fn st_strong_mc(
    f: &Distribution,
    g: &Distribution,
    kernel: &CollisionKernel,
    x: Vec3,
    v: Vec3,
    spec: &QuadratureSpec,
) -> Result<StEvaluation> {
    let needs_rho = needs_densities(kernel);
    let rho_fx = if needs_rho { f.density(x) } else { 0.0 };
    let proposal = g.velocity_proposal().widened(spec.proposal_widen);
    let label = label_with("st_strong", &[x.x, x.y, x.z, v.x, v.y, v.z]);
    let shell = kernel.mode() == KernelEvalMode::Shell;
    let radius = kernel.support_radius();
    let ball_vol = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
    let est = mc_sweep(3, spec.mc_samples, spec.seed, label, |_, rng, out| {
        let (w, w_weight) = proposal.sample(rng);
        if shell {
            let n = sample_sphere(rng);
            let z = (v - w).dot(n);
            if z <= 0.0 {
                return Ok(());
            }
            let angular = 4.0 * std::f64::consts::PI;
            let y_gain = x - n * (2.0 * kernel.shell_radius());
            let y_loss = x + n * (2.0 * kernel.shell_radius());
            let (rg, rl) = if needs_rho {
                (g.density(y_gain), g.density(y_loss))
            } else {
                (0.0, 0.0)
            };
            let b_gain = kernel.eval_shell(rho_fx, rg, v - w, n)?;
            let b_loss = kernel.eval_shell(rho_fx, rl, v - w, n)?;
            let pair = collide_unit(v, w, n);
            let gain =
                w_weight * angular * b_gain * f.eval_f(x, pair.v_prime) * g.eval_f(y_gain, pair.w_prime);
            let loss = w_weight * angular * b_loss * f.eval_f(x, v) * g.eval_f(y_loss, w);
            out[0] += gain;
            out[1] += loss;
            out[2] += gain - loss;
        } else {
            let y = x + sample_unit_ball(rng) * radius;
            let Ok(n) = unit_between(x, y) else {
                return Ok(());
            };
            let z = (v - w).dot(n);
            let rho_gy = if needs_rho { g.density(y) } else { 0.0 };
            let b = kernel.eval_density(rho_fx, rho_gy, x, y, v - w)?;
            if b == 0.0 {
                return Ok(());
            }
            let weight = w_weight * ball_vol * b;
            if z > 0.0 {
                let pair = collide_unit(v, w, n);
                let gain = weight * f.eval_f(x, pair.v_prime) * g.eval_f(y, pair.w_prime);
                out[0] += gain;
                out[2] += gain;
            } else if z < 0.0 {
                let loss = weight * f.eval_f(x, v) * g.eval_f(y, w);
                out[1] += loss;
                out[2] -= loss;
            }
        }
        Ok(())
    })?;
    Ok(StEvaluation {
        value: est.value[2],
        gain: est.value[0],
        loss: est.value[1],
        stderr: est.stderr[2],
    })
}

/// Uniform direction on the unit sphere.
pub(crate) fn sample_sphere(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let p = crate::quadrature::sample_normal3(rng);
        if let Ok(n) = p.normalized() {
            return n;
        }
    }
}

/// Draw one loss-side partner configuration for the weak forms.
///
/// Variables: `x ~ spatial(f)`, `v ~ velocity(f)`, partner position from the
/// kernel geometry, `w ~ velocity(g)`. Returns `None` for samples with zero
/// contribution (wrong indicator side, degenerate geometry, vanishing B).
pub(crate) fn draw_pair(
    f: &Distribution,
    g: &Distribution,
    kernel: &CollisionKernel,
    spec: &QuadratureSpec,
    rng: &mut ChaCha8Rng,
    needs_rho: bool,
) -> Result<Option<PairSample>> {
    draw_pair_from(f.spatial_proposal(), f, g, kernel, spec, rng, needs_rho)
}

/// As [`draw_pair`] with an explicit proposal for the base point `x`.
///
/// Sweeps that pair a spatially non-decaying state with compactly supported
/// test functions integrate `x` over all of space; there the proposal must
/// cover the support of the test functions rather than follow the state's
/// own sampling convention.
pub(crate) fn draw_pair_from(
    x_prop: SpatialProposal,
    f: &Distribution,
    g: &Distribution,
    kernel: &CollisionKernel,
    spec: &QuadratureSpec,
    rng: &mut ChaCha8Rng,
    needs_rho: bool,
) -> Result<Option<PairSample>> {
    let (x, x_weight) = x_prop.sample(rng);
    let (v, v_weight) = f
        .velocity_proposal()
        .widened(spec.proposal_widen)
        .sample(rng);
    let (w, w_weight) = g
        .velocity_proposal()
        .widened(spec.proposal_widen)
        .sample(rng);
    let base_weight = x_weight * v_weight * w_weight;
    match kernel.mode() {
        KernelEvalMode::Density => {
            let radius = kernel.support_radius();
            let ball_vol = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
            let y = x + sample_unit_ball(rng) * radius;
            let Ok(n) = unit_between(x, y) else {
                return Ok(None);
            };
            let z = (v - w).dot(n);
            // Loss-side measure: 1_{(v - w | n_{x,y}) < 0}.
            if z >= 0.0 {
                return Ok(None);
            }
            let rho_fx = if needs_rho { f.density(x) } else { 0.0 };
            let rho_gy = if needs_rho { g.density(y) } else { 0.0 };
            let b = kernel.eval_density(rho_fx, rho_gy, x, y, v - w)?;
            if b == 0.0 {
                return Ok(None);
            }
            let pair = collide_unit(v, w, n);
            Ok(Some(PairSample {
                x,
                v,
                y,
                w,
                v_prime: pair.v_prime,
                w_prime: pair.w_prime,
                weight: base_weight * ball_vol * b,
            }))
        }
        KernelEvalMode::Shell => {
            // Loss-side partner sits at y = x + 2 r n with (v - w | n) > 0
            // (n_{x,y} = -n flips the indicator).
            let n_dir = sample_sphere(rng);
            let z_dir = (v - w).dot(n_dir);
            if z_dir <= 0.0 {
                return Ok(None);
            }
            let y = x + n_dir * (2.0 * kernel.shell_radius());
            let rho_fx = if needs_rho { f.density(x) } else { 0.0 };
            let rho_gy = if needs_rho { g.density(y) } else { 0.0 };
            // Y * 4 r^2 |z|; together with the 4 pi direction weight this is
            // the full loss-side density against dn dw.
            let b = kernel.eval_shell(rho_fx, rho_gy, v - w, n_dir)?;
            let pair = collide_unit(v, w, n_dir);
            Ok(Some(PairSample {
                x,
                v,
                y,
                w,
                v_prime: pair.v_prime,
                w_prime: pair.w_prime,
                weight: base_weight * 4.0 * std::f64::consts::PI * b,
            }))
        }
    }
}

/// Evaluate several weak-form rows on one shared sample stream.
///
/// Monte Carlo only: the flattened loss-side integral is 12-dimensional.
pub fn weak_sweep(
    f: &Distribution,
    g: &Distribution,
    kernel: &CollisionKernel,
    spec: &QuadratureSpec,
    rows: &[WeakForm<'_>],
) -> Result<VecEstimate> {
    spec.validate()?;
    if spec.mode != QuadMode::MonteCarlo {
        return Err(Error::Unsupported(
            "weak forms are Monte Carlo only (12-dimensional integral)".into(),
        ));
    }
    let needs_rho = needs_densities(kernel);
    let label = label_with("weak_sweep", &[rows.len() as f64]);
    mc_sweep(rows.len(), spec.mc_samples, spec.seed, label, |_, rng, out| {
        let Some(s) = draw_pair(f, g, kernel, spec, rng, needs_rho)? else {
            return Ok(());
        };
        let f_xv = f.eval_f(s.x, s.v);
        let g_yw = g.eval_f(s.y, s.w);
        let pair_weight = s.weight * f_xv * g_yw;
        if pair_weight == 0.0 {
            return Ok(());
        }
        for (k, row) in rows.iter().enumerate() {
            match row {
                WeakForm::Loss(phi) => {
                    out[k] += pair_weight * (phi.eval(s.x, s.v_prime) - phi.eval(s.x, s.v));
                }
                WeakForm::Symmetric(phi) => {
                    out[k] += 0.5
                        * pair_weight
                        * (phi.eval(s.x, s.v_prime) + phi.eval(s.y, s.w_prime)
                            - phi.eval(s.x, s.v)
                            - phi.eval(s.y, s.w));
                }
                WeakForm::SymmetricNorm(phi) => {
                    out[k] += 0.5
                        * pair_weight
                        * (phi.eval(s.x, s.v_prime).abs()
                            + phi.eval(s.y, s.w_prime).abs()
                            + phi.eval(s.x, s.v).abs()
                            + phi.eval(s.y, s.w).abs());
                }
                WeakForm::LossNorm(phi) => {
                    out[k] += pair_weight
                        * (phi.eval(s.x, s.v_prime).abs() + phi.eval(s.x, s.v).abs());
                }
            }
        }
        Ok(())
    })
}

/// Loss-side weak form
/// `int (phi(x,v') - phi(x,v)) f(x,v) g(y,w) 1_{(v-w|n_{x,y})<0} B`.
pub fn st_weak(
    f: &Distribution,
    g: &Distribution,
    kernel: &CollisionKernel,
    phi: &TestFunctionXV,
    spec: &QuadratureSpec,
) -> Result<Estimate> {
    let est = weak_sweep(f, g, kernel, spec, &[WeakForm::Loss(phi)])?;
    Ok(est.get(0))
}

/// Symmetrized weak form (requires `g = f`):
/// `1/2 int (phi(x,v') + phi(y,w') - phi(x,v) - phi(y,w)) f f 1_{z<0} B`.
pub fn st_weak_symmetric(
    f: &Distribution,
    kernel: &CollisionKernel,
    phi: &TestFunctionXV,
    spec: &QuadratureSpec,
) -> Result<Estimate> {
    let est = weak_sweep(f, f, kernel, spec, &[WeakForm::Symmetric(phi)])?;
    Ok(est.get(0))
}

/// `int St[f, g](x, v) dv` at fixed `x`, together with the L1 norm of the
/// integrand for relative comparison. Monte Carlo only.
pub fn local_mass_residual(
    f: &Distribution,
    g: &Distribution,
    kernel: &CollisionKernel,
    x: Vec3,
    spec: &QuadratureSpec,
) -> Result<(Estimate, f64)> {
    spec.validate()?;
    if spec.mode != QuadMode::MonteCarlo {
        return Err(Error::Unsupported(
            "local mass residual is Monte Carlo only (9-dimensional integral)".into(),
        ));
    }
    let needs_rho = needs_densities(kernel);
    let rho_fx = if needs_rho { f.density(x) } else { 0.0 };
    let v_prop = f.velocity_proposal().widened(spec.proposal_widen);
    let w_prop = g.velocity_proposal().widened(spec.proposal_widen);
    let shell = kernel.mode() == KernelEvalMode::Shell;
    let radius = kernel.support_radius();
    let ball_vol = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
    let label = label_with("local_mass", &[x.x, x.y, x.z]);
    let est = mc_sweep(2, spec.mc_samples, spec.seed, label, |_, rng, out| {
        let (v, v_weight) = v_prop.sample(rng);
        let (w, w_weight) = w_prop.sample(rng);
        let vw = v_weight * w_weight;
        if shell {
            let n = sample_sphere(rng);
            let z = (v - w).dot(n);
            if z <= 0.0 {
                return Ok(());
            }
            let angular = 4.0 * std::f64::consts::PI;
            let y_gain = x - n * (2.0 * kernel.shell_radius());
            let y_loss = x + n * (2.0 * kernel.shell_radius());
            let (rg, rl) = if needs_rho {
                (g.density(y_gain), g.density(y_loss))
            } else {
                (0.0, 0.0)
            };
            let b_gain = kernel.eval_shell(rho_fx, rg, v - w, n)?;
            let b_loss = kernel.eval_shell(rho_fx, rl, v - w, n)?;
            let pair = collide_unit(v, w, n);
            let gain =
                vw * angular * b_gain * f.eval_f(x, pair.v_prime) * g.eval_f(y_gain, pair.w_prime);
            let loss = vw * angular * b_loss * f.eval_f(x, v) * g.eval_f(y_loss, w);
            out[0] += gain - loss;
            out[1] += gain.abs() + loss.abs();
        } else {
            let y = x + sample_unit_ball(rng) * radius;
            let Ok(n) = unit_between(x, y) else {
                return Ok(());
            };
            let z = (v - w).dot(n);
            let rho_gy = if needs_rho { g.density(y) } else { 0.0 };
            let b = kernel.eval_density(rho_fx, rho_gy, x, y, v - w)?;
            if b == 0.0 {
                return Ok(());
            }
            let weight = vw * ball_vol * b;
            if z > 0.0 {
                let pair = collide_unit(v, w, n);
                let gain = weight * f.eval_f(x, pair.v_prime) * g.eval_f(y, pair.w_prime);
                out[0] += gain;
                out[1] += gain.abs();
            } else if z < 0.0 {
                let loss = weight * f.eval_f(x, v) * g.eval_f(y, w);
                out[0] -= loss;
                out[1] += loss.abs();
            }
        }
        Ok(())
    })?;
    Ok((est.get(0), est.value[1]))
}

/// Default probe points: 8 Halton points inside the state's core spatial box.
pub fn default_probes(f: &Distribution) -> Vec<Vec3> {
    let (center, half) = match f.spatial_proposal() {
        SpatialProposal::Gaussian { center, sigma } => (center, sigma * 1.5),
        SpatialProposal::SlabPeriod { length } => (
            Vec3::new(0.5 * length, 0.0, 0.0),
            Vec3::new(0.5 * length, 0.0, 0.0),
        ),
    };
    halton_points3(8, center, half)
}

/// Conservation residual suite for `St[f, f]`: local mass at the probe
/// points, global momentum and energy through the symmetrized weak form.
pub fn conservation_residuals(
    f: &Distribution,
    kernel: &CollisionKernel,
    spec: &QuadratureSpec,
    probes: &[Vec3],
) -> Result<ConservationResiduals> {
    let mut mass_local_max = 0.0f64;
    let mut mass_stderr_max = 0.0f64;
    for (i, &x) in probes.iter().enumerate() {
        let probe_spec = QuadratureSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..spec.clone()
        };
        let (net, norm) = local_mass_residual(f, f, kernel, x, &probe_spec)?;
        if norm > 0.0 {
            mass_local_max = mass_local_max.max(net.value.abs() / norm);
            mass_stderr_max = mass_stderr_max.max(net.stderr / norm);
        }
    }
    let v1 = TestFunctionXV::polynomial(crate::testfns::VPoly::Vi(0));
    let v2 = TestFunctionXV::polynomial(crate::testfns::VPoly::Vi(1));
    let v3 = TestFunctionXV::polynomial(crate::testfns::VPoly::Vi(2));
    let en = TestFunctionXV::polynomial(crate::testfns::VPoly::Energy);
    let rows = [
        WeakForm::Symmetric(&v1),
        WeakForm::Symmetric(&v2),
        WeakForm::Symmetric(&v3),
        WeakForm::Symmetric(&en),
        WeakForm::SymmetricNorm(&v1),
        WeakForm::SymmetricNorm(&en),
    ];
    let est = weak_sweep(f, f, kernel, spec, &rows)?;
    Ok(ConservationResiduals {
        mass_local_max,
        mass_stderr_max,
        momentum_global: Vec3::new(est.value[0], est.value[1], est.value[2]),
        momentum_stderr: Vec3::new(est.stderr[0], est.stderr[1], est.stderr[2]),
        energy_global: est.value[3],
        energy_stderr: est.stderr[3],
        momentum_normalizer: est.value[4],
        energy_normalizer: est.value[5],
    })
}
