//! Conditional ensembles at fixed CG coordinates and the estimators built on them.
//!
//! Two samplers are available. A quadratic force field under a linear map is conditioned exactly
//! (the conditional law is Gaussian on the null space of `Ξ_r`). Everything else goes through a
//! stiff harmonic restraint `½ k |ξ(r) − R|²` sampled with a position-preconditioned
//! Metropolis-adjusted Langevin algorithm.

use rayon::prelude::*;

use crate::aa_system::{AtomisticFrame, ForceField};
use crate::cg_map::{CGMap, LinearCGMap, NonlinearCGMap};
use crate::numerics::{cross_covariance, gauss_legendre, mean_matrix, mean_vector, sym_eig, symmetrize, Matrix, RngState, SpdFactor, Vector};
use crate::{Error, Result};

/// Smallest restraint stiffness accepted by the restraint sampler.
pub const MIN_RESTRAINT: f64 = 1e3;

const QUADRATURE_NODES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalEnsemble {
    pub target: Vector,
    pub frames: Vec<AtomisticFrame>,
    /// `f64::INFINITY` for the exact sampler.
    pub restraint_stiffness: f64,
    pub beta: f64,
    /// Metropolis acceptance after burn-in (1 for the exact sampler).
    pub acceptance: f64,
}

impl ConditionalEnsemble {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    /// Exact Gaussian conditioning when possible, restraint otherwise.
    Auto,
    Restraint,
}

#[derive(Clone, Debug)]
pub struct ConditionalOptions {
    pub stiffness: f64,
    pub burn_in: usize,
    pub thinning: usize,
    /// Initial MALA step; adapted during burn-in only.
    pub initial_step: f64,
    /// Eigenvalue floor of the curvature used as preconditioner.
    pub curvature_floor: f64,
    pub method: SamplerKind,
}

impl Default for ConditionalOptions {
    fn default() -> Self {
        ConditionalOptions {
            stiffness: 1e4,
            burn_in: 2000,
            thinning: 5,
            initial_step: 1.0,
            curvature_floor: 1.0,
            method: SamplerKind::Auto,
        }
    }
}

/// Minimum-norm point `Ξ⁺ R` and an orthonormal basis of the null space of `Ξ_r`.
struct NullSpace {
    pinv: Matrix,
    basis: Matrix,
}

impl NullSpace {
    fn new(map: &LinearCGMap) -> Result<Self> {
        let pinv = map.xi_f().transpose();
        let aa = map.aa_len();
        let proj = Matrix::identity(aa, aa) - &pinv * map.xi_r();
        let (_, vecs) = sym_eig(&proj)?;
        let basis = vecs.columns(0, aa - map.cg_len()).into_owned();
        Ok(NullSpace { pinv, basis })
    }

    fn dims(&self) -> usize {
        self.basis.ncols()
    }

    fn point(&self, target: &Vector, y: &Vector) -> Vector {
        &self.pinv * target + &self.basis * y
    }
}

fn check_target(map: &CGMap, target: &Vector) -> Result<()> {
    if target.len() != map.cg_len() {
        return Err(Error::mismatch(map.cg_len(), target.len(), "CG target length"));
    }
    Ok(())
}

fn frame_with_forces(ff: &ForceField, index: usize, r: Vector) -> Result<AtomisticFrame> {
    let (_, forces) = ff.energy_and_forces(&r)?;
    Ok(AtomisticFrame { frame_index: index, positions: r, forces: Some(forces) })
}

/// Draws `count` frames from the ensemble conditioned on `ξ(r) = R`.
///
/// `initial` seeds the restraint sampler and supplies the pinned particles of nonlinear maps.
#[allow(clippy::too_many_arguments)]
pub fn sample_conditional(
    ff: &ForceField,
    map: &CGMap,
    target: &Vector,
    beta: f64,
    count: usize,
    options: &ConditionalOptions,
    initial: &Vector,
    rng: &mut RngState,
) -> Result<ConditionalEnsemble> {
    check_target(map, target)?;
    if map.aa_len() != ff.len() || initial.len() != ff.len() {
        return Err(Error::mismatch(ff.len(), map.aa_len().max(initial.len()), "map/force-field/initial length"));
    }
    if !(beta > 0.0) || count == 0 {
        return Err(Error::InvalidArgument("conditional sampling needs beta > 0 and count ≥ 1".into()));
    }
    if let (SamplerKind::Auto, Some(k), CGMap::Linear(lin)) = (options.method, ff.as_quadratic(), map) {
        let frames = sample_exact_gaussian(ff, k, lin, target, beta, count, rng)?;
        return Ok(ConditionalEnsemble {
            target: target.clone(),
            frames,
            restraint_stiffness: f64::INFINITY,
            beta,
            acceptance: 1.0,
        });
    }
    if !(options.stiffness >= MIN_RESTRAINT) {
        return Err(Error::InvalidArgument(format!(
            "restraint stiffness {} is below {MIN_RESTRAINT}",
            options.stiffness
        )));
    }
    if !beta.is_finite() {
        return Err(Error::InvalidArgument("the restraint sampler needs a finite beta".into()));
    }
    let (frames, acceptance) = sample_restrained(ff, map, target, beta, count, options, initial, rng)?;
    Ok(ConditionalEnsemble { target: target.clone(), frames, restraint_stiffness: options.stiffness, beta, acceptance })
}

fn sample_exact_gaussian(
    ff: &ForceField,
    k: &Matrix,
    map: &LinearCGMap,
    target: &Vector,
    beta: f64,
    count: usize,
    rng: &mut RngState,
) -> Result<Vec<AtomisticFrame>> {
    let null = NullSpace::new(map)?;
    let r0 = null.point(target, &Vector::zeros(null.dims()));
    if null.dims() == 0 {
        return (0..count).map(|t| frame_with_forces(ff, t, r0.clone())).collect();
    }
    let n = &null.basis;
    let kn = n.transpose() * k * n;
    let factor = SpdFactor::new(&kn)?;
    let mean = -factor.solve(&(n.transpose() * k * &r0));
    let scaled = SpdFactor::new(&(&kn * beta)).ok();
    let mut frames = Vec::with_capacity(count);
    for t in 0..count {
        let mut y = mean.clone();
        if let Some(f) = &scaled {
            let z = rng.normal_vector(null.dims());
            y += f.lower().tr_solve_lower_triangular(&z).expect("Cholesky diagonal is positive");
        }
        frames.push(frame_with_forces(ff, t, &r0 + n * y)?);
    }
    Ok(frames)
}

/// Log-density, forces and local metric of the restrained target at one configuration.
struct MalaState {
    r: Vector,
    forces: Vector,
    log_pi: f64,
    lower: Matrix,
    log_det: f64,
    drift: Vector,
}

struct Restrained<'a> {
    ff: &'a ForceField,
    map: &'a CGMap,
    target: &'a Vector,
    beta: f64,
    stiffness: f64,
    mobile: Vec<usize>,
    curvature: Matrix,
}

impl Restrained<'_> {
    fn evaluate(&self, r: Vector) -> Result<MalaState> {
        let (u, forces) = self.ff.energy_and_forces(&r)?;
        let residual = self.map.project_positions(&r)? - self.target;
        let jac = self.map.jacobian(&r)?;
        let log_pi = -self.beta * (u + 0.5 * self.stiffness * residual.norm_squared());
        let full = (&forces - self.stiffness * jac.transpose() * &residual) * self.beta;
        let grad = Vector::from_iterator(self.mobile.len(), self.mobile.iter().map(|&c| full[c]));
        let jm = jac.select_columns(&self.mobile);
        let metric = (&self.curvature + jm.transpose() * &jm * self.stiffness) * self.beta;
        let factor = SpdFactor::new(&metric)?;
        let log_det = 2.0 * factor.lower().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let drift = factor.solve(&grad);
        Ok(MalaState { r, forces, log_pi, lower: factor.lower().clone(), log_det, drift })
    }

    fn mobile_part(&self, r: &Vector) -> Vector {
        Vector::from_iterator(self.mobile.len(), self.mobile.iter().map(|&c| r[c]))
    }

    /// `log q(to | from)` up to a constant.
    fn log_proposal(&self, from: &MalaState, to: &Vector, step: f64) -> f64 {
        let delta = self.mobile_part(to) - self.mobile_part(&from.r) - &from.drift * (0.5 * step);
        let w = from.lower.transpose() * delta;
        -w.norm_squared() / (2.0 * step) + 0.5 * from.log_det
    }
}

fn recoverable(err: &Error) -> bool {
    matches!(err, Error::DivergentGeometry(_) | Error::SingularGeometry(_) | Error::NotPositiveDefinite { .. })
}

#[allow(clippy::too_many_arguments)]
fn sample_restrained(
    ff: &ForceField,
    map: &CGMap,
    target: &Vector,
    beta: f64,
    count: usize,
    options: &ConditionalOptions,
    initial: &Vector,
    rng: &mut RngState,
) -> Result<(Vec<AtomisticFrame>, f64)> {
    if options.thinning == 0 || !(options.initial_step > 0.0) {
        return Err(Error::InvalidArgument("thinning and initial step must be positive".into()));
    }
    let dim = ff.dim();
    let frozen = map.frozen_particles();
    let mobile: Vec<usize> = (0..ff.len()).filter(|c| !frozen.contains(&(c / dim))).collect();
    if mobile.is_empty() {
        return Err(Error::InvalidArgument("every particle is frozen".into()));
    }
    let (vals, vecs) = sym_eig(&ff.hessian(initial)?.select_rows(&mobile).select_columns(&mobile))?;
    let floored = vals.map(|l| l.abs().max(options.curvature_floor));
    let curvature = &vecs * Matrix::from_diagonal(&floored) * vecs.transpose();
    let problem = Restrained { ff, map, target, beta, stiffness: options.stiffness, mobile, curvature };

    let mut state = problem.evaluate(initial.clone())?;
    let mut log_step = options.initial_step.ln();
    let mut frames = Vec::with_capacity(count);
    let mut accepted = 0usize;
    let total = options.burn_in + count * options.thinning;
    for step_index in 1..=total {
        let step = log_step.exp();
        let z = rng.normal_vector(problem.mobile.len());
        let noise = state.lower.tr_solve_lower_triangular(&z).expect("Cholesky diagonal is positive");
        let moved = &state.drift * (0.5 * step) + noise * step.sqrt();
        let mut proposal = state.r.clone();
        for (a, &c) in problem.mobile.iter().enumerate() {
            proposal[c] += moved[a];
        }
        let u = rng.uniform();
        let accept = match problem.evaluate(proposal) {
            Ok(next) => {
                let log_ratio = next.log_pi + problem.log_proposal(&next, &state.r, step)
                    - state.log_pi
                    - problem.log_proposal(&state, &next.r, step);
                if u.ln() < log_ratio {
                    state = next;
                    true
                } else {
                    false
                }
            }
            Err(e) if recoverable(&e) => false,
            Err(e) => return Err(e),
        };
        if step_index <= options.burn_in {
            log_step += 0.05 * (f64::from(u8::from(accept)) - 0.574);
            continue;
        }
        accepted += usize::from(accept);
        if (step_index - options.burn_in) % options.thinning == 0 {
            frames.push(AtomisticFrame {
                frame_index: frames.len(),
                positions: state.r.clone(),
                forces: Some(state.forces.clone()),
            });
        }
    }
    let acceptance = accepted as f64 / (count * options.thinning) as f64;
    log::debug!("restraint sampler: step {:.3e}, acceptance {acceptance:.3}", log_step.exp());
    Ok((frames, acceptance))
}

fn frame_forces(ff: &ForceField, frame: &AtomisticFrame) -> Result<Vector> {
    match &frame.forces {
        Some(f) => Ok(f.clone()),
        None => Ok(ff.energy_and_forces(&frame.positions)?.1),
    }
}

/// `⟨Ξ_F F + β⁻¹ ∇_r·Ξ_F⟩`; the divergence is identically zero for linear maps.
pub fn cg_mean_force(ens: &ConditionalEnsemble, ff: &ForceField, map: &CGMap) -> Result<Vector> {
    if ens.is_empty() {
        return Err(Error::EmptyEnsemble(0));
    }
    let per_frame: Vec<Vector> = ens
        .frames
        .par_iter()
        .map(|frame| {
            let r = &frame.positions;
            let mut f = map.force_projection(Some(r))? * frame_forces(ff, frame)?;
            if !map.is_linear() {
                f += map.xi_divergence(r)? / ens.beta;
            }
            Ok(f)
        })
        .collect::<Result<_>>()?;
    Ok(mean_vector(&per_frame))
}

/// Term-by-term breakdown of the CG Hessian estimate.
#[derive(Clone, Debug)]
pub struct HessianEstimate {
    /// `(H + Hᵀ)/2` of the raw estimate.
    pub hessian: Matrix,
    pub raw: Matrix,
    /// `⟨Ξ_F H_AA Ξ_Fᵀ⟩`.
    pub projected_hessian: Matrix,
    /// `β Σ(Ξ_F F, Ξ_F F)`.
    pub force_covariance: Matrix,
    /// `⟨𝒯⟩` as returned by [`CGMap::xi_t_matrix`].
    pub t_mean: Matrix,
    /// `Σ(Ξ_F F, ∇·Ξ_F) + Σ(∇·Ξ_F, Ξ_F F)`.
    pub mixed_covariance: Matrix,
    /// `β⁻¹ [⟨∇(∇·Ξ_F) Ξ_Fᵀ⟩ + Σ(∇·Ξ_F, ∇·Ξ_F)]`.
    pub divergence_term: Matrix,
    /// `max |H − Hᵀ|` of the raw estimate.
    pub asymmetry: f64,
    /// Batch-means standard error of the entry attaining `asymmetry`.
    pub asymmetry_se: f64,
}

struct FrameTerms {
    projected_force: Vector,
    projected_hessian: Matrix,
    divergence: Vector,
    t: Matrix,
    div_grad: Matrix,
}

fn frame_terms(ff: &ForceField, map: &CGMap, frame: &AtomisticFrame) -> Result<FrameTerms> {
    let r = &frame.positions;
    let xi = map.force_projection(Some(r))?;
    let forces = frame_forces(ff, frame)?;
    let h = ff.hessian(r)?;
    let cg = map.cg_len();
    let (divergence, t, div_grad) = if map.is_linear() {
        (Vector::zeros(cg), Matrix::zeros(cg, cg), Matrix::zeros(cg, cg))
    } else {
        (map.xi_divergence(r)?, map.xi_t_matrix(r, &forces)?, map.divergence_gradient(r)? * xi.transpose())
    };
    Ok(FrameTerms { projected_force: &xi * forces, projected_hessian: &xi * h * xi.transpose(), divergence, t, div_grad })
}

/// CG Hessian from the conditional ensemble; all six terms for nonlinear maps.
///
/// The raw estimate is
/// `⟨Ξ H Ξᵀ⟩ − βΣ(ΞF, ΞF) − ⟨𝒯⟩ᵀ − [Σ(ΞF, div) + Σ(div, ΞF)] − β⁻¹[⟨∇div Ξᵀ⟩ + Σ(div, div)]`,
/// which is symmetric in expectation.
pub fn cg_hessian_estimate(ens: &ConditionalEnsemble, ff: &ForceField, map: &CGMap) -> Result<HessianEstimate> {
    if ens.len() < 2 {
        return Err(Error::EmptyEnsemble(ens.len()));
    }
    let terms: Vec<FrameTerms> = ens.frames.par_iter().map(|f| frame_terms(ff, map, f)).collect::<Result<_>>()?;
    let beta = ens.beta;
    let pf: Vec<Vector> = terms.iter().map(|t| t.projected_force.clone()).collect();
    let projected_hessian = mean_matrix(&terms.iter().map(|t| t.projected_hessian.clone()).collect::<Vec<_>>());
    let force_covariance = cross_covariance(&pf, &pf) * beta;
    let cg = map.cg_len();
    let (t_mean, mixed_covariance, divergence_term, per_frame_asym) = if map.is_linear() {
        (Matrix::zeros(cg, cg), Matrix::zeros(cg, cg), Matrix::zeros(cg, cg), None)
    } else {
        let div: Vec<Vector> = terms.iter().map(|t| t.divergence.clone()).collect();
        let t_mean = mean_matrix(&terms.iter().map(|t| t.t.clone()).collect::<Vec<_>>());
        let mixed = cross_covariance(&pf, &div) + cross_covariance(&div, &pf);
        let grad_mean = mean_matrix(&terms.iter().map(|t| t.div_grad.clone()).collect::<Vec<_>>());
        let divergence_term = (grad_mean + cross_covariance(&div, &div)) / beta;
        // Per-frame contributions of the two non-symmetric terms.
        let asym: Vec<Matrix> = terms.iter().map(|t| -t.t.transpose() - &t.div_grad / beta).collect();
        (t_mean, mixed, divergence_term, Some(asym))
    };
    let raw = &projected_hessian - &force_covariance - t_mean.transpose() - &mixed_covariance - &divergence_term;
    let (asymmetry, (i, j)) = crate::numerics::asymmetry(&raw);
    let asymmetry_se = match per_frame_asym {
        Some(contrib) if cg > 1 => {
            let samples: Vec<f64> = contrib.iter().map(|c| c[(i, j)] - c[(j, i)]).collect();
            batch_means_se(&samples)
        }
        _ => 0.0,
    };
    Ok(HessianEstimate {
        hessian: symmetrize(&raw),
        raw,
        projected_hessian,
        force_covariance,
        t_mean,
        mixed_covariance,
        divergence_term,
        asymmetry,
        asymmetry_se,
    })
}

/// Linear-map estimate `⟨Ξ_F H Ξ_Fᵀ⟩ − βΣ(Ξ_F F, Ξ_F F)`, symmetrized.
pub fn cg_hessian_linear(ens: &ConditionalEnsemble, ff: &ForceField, map: &LinearCGMap) -> Result<Matrix> {
    if ens.len() < 2 {
        return Err(Error::EmptyEnsemble(ens.len()));
    }
    let wrapped = CGMap::Linear(map.clone());
    let terms: Vec<FrameTerms> = ens.frames.par_iter().map(|f| frame_terms(ff, &wrapped, f)).collect::<Result<_>>()?;
    let pf: Vec<Vector> = terms.iter().map(|t| t.projected_force.clone()).collect();
    let projected = mean_matrix(&terms.iter().map(|t| t.projected_hessian.clone()).collect::<Vec<_>>());
    Ok(symmetrize(&(projected - cross_covariance(&pf, &pf) * ens.beta)))
}

/// Standard error of the mean from up to 20 contiguous batches.
fn batch_means_se(samples: &[f64]) -> f64 {
    let batches = samples.len().min(20);
    if batches < 2 {
        return 0.0;
    }
    let size = samples.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| samples[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Hessian estimates across restraint stiffnesses, to expose restraint broadening.
#[allow(clippy::too_many_arguments)]
pub fn stiffness_sensitivity(
    ff: &ForceField,
    map: &CGMap,
    target: &Vector,
    beta: f64,
    count: usize,
    stiffnesses: &[f64],
    options: &ConditionalOptions,
    initial: &Vector,
    rng: &mut RngState,
) -> Result<Vec<(f64, HessianEstimate)>> {
    stiffnesses
        .iter()
        .map(|&k| {
            let opts = ConditionalOptions { stiffness: k, method: SamplerKind::Restraint, ..options.clone() };
            let ens = sample_conditional(ff, map, target, beta, count, &opts, initial, rng)?;
            Ok((k, cg_hessian_estimate(&ens, ff, map)?))
        })
        .collect()
}

/// `−β⁻¹ log Σ w exp(−β U)` over quadrature nodes, skipping configurations the force field rejects.
fn log_sum_exp(terms: &[(f64, f64)]) -> f64 {
    let max = terms.iter().map(|&(_, e)| e).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|&(w, e)| w * (e - max).exp()).sum::<f64>().ln()
}

fn energy_or_infinite(ff: &ForceField, r: &Vector) -> Result<f64> {
    match ff.energy_and_forces(r) {
        Ok((e, _)) => Ok(e),
        Err(Error::DivergentGeometry(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Minimizes `U(Ξ⁺R + N y)` over `y` by damped Newton.
fn constrained_minimum(ff: &ForceField, null: &NullSpace, target: &Vector, start: Vector) -> Result<Vector> {
    let n = &null.basis;
    let mut y = start;
    for _ in 0..200 {
        let r = null.point(target, &y);
        let (e, f) = ff.energy_and_forces(&r)?;
        let g = -(n.transpose() * f);
        if g.norm() < 1e-12 * (1.0 + e.abs()) {
            break;
        }
        let h = n.transpose() * ff.hessian(&r)? * n;
        let step = match SpdFactor::new(&h) {
            Ok(fac) => -fac.solve(&g),
            Err(_) => -&g / h.amax().max(1.0),
        };
        let mut t = 1.0;
        loop {
            let trial = &y + &step * t;
            if energy_or_infinite(ff, &null.point(target, &trial))? <= e || t < 1e-12 {
                break;
            }
            t *= 0.5;
        }
        let moved = &step * t;
        y += &moved;
        if moved.norm() < 1e-14 * (1.0 + y.norm()) {
            break;
        }
    }
    Ok(y)
}

/// Free energy `ℱ(R) = −β⁻¹ log Z(R)` (up to a constant) by Gauss–Legendre quadrature.
///
/// Linear maps integrate over the null space of `Ξ_r` (at most 3 dimensions) in a box of
/// ±8 standard deviations around the constrained minimum. `RadialFromPinned` integrates over
/// directions of the free particle, with the other particles held at `reference`.
pub fn free_energy_quadrature(
    ff: &ForceField,
    map: &CGMap,
    grid: &[Vector],
    beta: f64,
    reference: &Vector,
) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("free-energy grid".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument("quadrature needs a finite positive beta".into()));
    }
    for r in grid {
        check_target(map, r)?;
    }
    if map.cg_len() == 1 && grid.windows(2).any(|w| !(w[1][0] > w[0][0])) {
        return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
    }
    match map {
        CGMap::Linear(lin) => linear_quadrature(ff, lin, grid, beta),
        CGMap::Nonlinear(NonlinearCGMap::RadialFromPinned { particle, dim, .. }) => {
            if reference.len() != ff.len() {
                return Err(Error::mismatch(ff.len(), reference.len(), "reference configuration"));
            }
            radial_quadrature(ff, *particle, *dim, grid, beta, reference)
        }
        CGMap::Nonlinear(_) => Err(Error::Unsupported("quadrature is available for linear and radial maps".into())),
    }
}

fn linear_quadrature(ff: &ForceField, map: &LinearCGMap, grid: &[Vector], beta: f64) -> Result<Vec<f64>> {
    let null = NullSpace::new(map)?;
    let m = null.dims();
    if m > 3 {
        return Err(Error::DimensionTooLarge(m));
    }
    let (nodes, weights) = gauss_legendre(QUADRATURE_NODES);
    let mut y_min = Vector::zeros(m);
    let mut out = Vec::with_capacity(grid.len());
    for target in grid {
        if m == 0 {
            out.push(energy_or_infinite(ff, &null.point(target, &y_min))?);
            continue;
        }
        y_min = constrained_minimum(ff, &null, target, y_min)?;
        let h = null.basis.transpose() * ff.hessian(&null.point(target, &y_min))? * &null.basis;
        let (vals, vecs) = sym_eig(&h)?;
        if vals[m - 1] <= 0.0 {
            return Err(Error::NotPositiveDefinite { row: m - 1, pivot: vals[m - 1], threshold: 0.0 });
        }
        let half_width: Vec<f64> = vals.iter().map(|l| 8.0 / (beta * l).sqrt()).collect();
        let mut terms = Vec::with_capacity(QUADRATURE_NODES.pow(m as u32));
        let mut idx = vec![0usize; m];
        loop {
            let mut y = y_min.clone();
            let mut w = 1.0;
            for a in 0..m {
                y += vecs.column(a) * (nodes[idx[a]] * half_width[a]);
                w *= weights[idx[a]];
            }
            let e = energy_or_infinite(ff, &null.point(target, &y))?;
            terms.push((w, -beta * e));
            if !advance(&mut idx, QUADRATURE_NODES) {
                break;
            }
        }
        let log_z = log_sum_exp(&terms) + half_width.iter().map(|s| s.ln()).sum::<f64>();
        out.push(-log_z / beta);
    }
    Ok(out)
}

fn advance(idx: &mut [usize], base: usize) -> bool {
    for i in idx.iter_mut() {
        *i += 1;
        if *i < base {
            return true;
        }
        *i = 0;
    }
    false
}

fn radial_quadrature(
    ff: &ForceField,
    particle: usize,
    dim: usize,
    grid: &[Vector],
    beta: f64,
    reference: &Vector,
) -> Result<Vec<f64>> {
    let (nodes, weights) = gauss_legendre(QUADRATURE_NODES);
    let pi = std::f64::consts::PI;
    // Unit directions with their solid-angle weights.
    let mut directions: Vec<(f64, Vec<f64>)> = Vec::new();
    match dim {
        1 => directions.extend([(1.0, vec![1.0]), (1.0, vec![-1.0])]),
        2 => {
            for (x, w) in nodes.iter().zip(&weights) {
                let theta = pi * (x + 1.0);
                directions.push((w * pi, vec![theta.cos(), theta.sin()]));
            }
        }
        3 => {
            for (x, wx) in nodes.iter().zip(&weights) {
                let theta = 0.5 * pi * (x + 1.0);
                for (y, wy) in nodes.iter().zip(&weights) {
                    let phi = pi * (y + 1.0);
                    let w = wx * wy * 0.5 * pi * pi * theta.sin();
                    directions.push((w, vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]));
                }
            }
        }
        _ => return Err(Error::DimensionTooLarge(dim - 1)),
    }
    let mut out = Vec::with_capacity(grid.len());
    for target in grid {
        let radius = target[0];
        if !(radius > 0.0) {
            return Err(Error::SingularGeometry(format!("radial coordinate {radius} is not positive")));
        }
        let mut terms = Vec::with_capacity(directions.len());
        for (w, u) in &directions {
            let mut r = reference.clone();
            for a in 0..dim {
                r[particle * dim + a] = radius * u[a];
            }
            terms.push((*w, -beta * energy_or_infinite(ff, &r)?));
        }
        let log_z = log_sum_exp(&terms) + (dim as f64 - 1.0) * radius.ln();
        out.push(-log_z / beta);
    }
    Ok(out)
}
