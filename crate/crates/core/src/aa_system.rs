//! Toy fine-grained ("all-atom") configurational potentials.
//!
//! Every term provides an analytic energy, force and Hessian. The Hessian is only used as an
//! oracle; the training pipeline touches curvature exclusively through [`aa_hvp_fd`].

use crate::numerics::{Matrix, RngState, Vector};
use crate::{Error, Result};

const MIN_PAIR_DISTANCE: f64 = 1e-8;

/// A configuration of the fine-grained system.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomisticFrame {
    pub frame_index: usize,
    /// `n * dim` coordinates, particle-major.
    pub positions: Vector,
    /// Forces at `positions`, when they have been evaluated.
    pub forces: Option<Vector>,
}

impl AtomisticFrame {
    pub fn new(frame_index: usize, positions: Vector) -> Self {
        AtomisticFrame { frame_index, positions, forces: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Term {
    /// `½ k (|r_i − r_j| − r0)²`
    HarmonicBond { i: usize, j: usize, k: f64, r0: f64 },
    /// `½ k (θ − θ0)²` with `θ` the angle at vertex `j` between `i` and `l`.
    HarmonicAngle { i: usize, j: usize, l: usize, k: f64, theta0: f64 },
    /// `4ε[(σ/r)¹² − (σ/r)⁶]`
    LennardJones { i: usize, j: usize, epsilon: f64, sigma: f64 },
    /// `½ k |r_i − center|²`
    HarmonicWell { i: usize, k: f64, center: Vec<f64> },
    /// `½ rᵀ K r` over the full coordinate vector.
    QuadraticForm { k: Matrix },
}

/// A sum of [`Term`]s acting on `n` particles in `dim` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceField {
    n: usize,
    dim: usize,
    terms: Vec<Term>,
}

impl ForceField {
    pub fn new(n: usize, dim: usize, terms: Vec<Term>) -> Result<Self> {
        if n == 0 || !(1..=3).contains(&dim) {
            return Err(Error::InvalidArgument(format!("need n ≥ 1 and dim in 1..=3, got n={n} dim={dim}")));
        }
        let check = |idx: usize| {
            if idx >= n {
                Err(Error::InvalidArgument(format!("particle index {idx} out of range for n={n}")))
            } else {
                Ok(())
            }
        };
        let non_negative = |x: f64, what: &str| {
            if x >= 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} must be finite and ≥ 0, got {x}")))
            }
        };
        for term in &terms {
            match term {
                Term::HarmonicBond { i, j, k, .. } => {
                    check(*i)?;
                    check(*j)?;
                    non_negative(*k, "bond stiffness")?;
                }
                Term::HarmonicAngle { i, j, l, k, .. } => {
                    check(*i)?;
                    check(*j)?;
                    check(*l)?;
                    non_negative(*k, "angle stiffness")?;
                }
                Term::LennardJones { i, j, epsilon, sigma } => {
                    check(*i)?;
                    check(*j)?;
                    non_negative(*epsilon, "LJ epsilon")?;
                    non_negative(*sigma, "LJ sigma")?;
                }
                Term::HarmonicWell { i, k, center } => {
                    check(*i)?;
                    non_negative(*k, "well stiffness")?;
                    if center.len() != dim {
                        return Err(Error::mismatch(dim, center.len(), "well center"));
                    }
                }
                Term::QuadraticForm { k } => {
                    let len = n * dim;
                    if k.nrows() != len || k.ncols() != len {
                        return Err(Error::mismatch(len, k.nrows(), "quadratic form size"));
                    }
                    if crate::numerics::asymmetry(k).0 > 1e-12 * k.amax().max(1.0) {
                        return Err(Error::InvalidArgument("quadratic form must be symmetric".into()));
                    }
                }
            }
        }
        Ok(ForceField { n, dim, terms })
    }

    pub fn quadratic(dim: usize, k: Matrix) -> Result<Self> {
        let n = k.nrows() / dim;
        ForceField::new(n, dim, vec![Term::QuadraticForm { k }])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.n * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// The matrix `K` when the field is a single quadratic form.
    pub fn as_quadratic(&self) -> Option<&Matrix> {
        match self.terms.as_slice() {
            [Term::QuadraticForm { k }] => Some(k),
            _ => None,
        }
    }

    fn check_frame(&self, r: &Vector) -> Result<()> {
        if r.len() != self.len() {
            return Err(Error::mismatch(self.len(), r.len(), "frame length"));
        }
        Ok(())
    }

    fn particle<'a>(&self, r: &'a Vector, i: usize) -> &'a [f64] {
        &r.as_slice()[i * self.dim..(i + 1) * self.dim]
    }

    fn separation(&self, r: &Vector, i: usize, j: usize) -> Result<(Vec<f64>, f64)> {
        let x: Vec<f64> = self.particle(r, i).iter().zip(self.particle(r, j)).map(|(a, b)| a - b).collect();
        let dist = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok((x, dist))
    }

    /// Energy and forces in one pass.
    pub fn energy_and_forces(&self, r: &Vector) -> Result<(f64, Vector)> {
        self.check_frame(r)?;
        let dim = self.dim;
        let mut energy = 0.0;
        let mut forces = Vector::zeros(self.len());
        for term in &self.terms {
            match term {
                Term::HarmonicBond { i, j, k, r0 } => {
                    let (x, d) = self.separation(r, *i, *j)?;
                    let stretch = d - r0;
                    energy += 0.5 * k * stretch * stretch;
                    if d < MIN_PAIR_DISTANCE {
                        if k * stretch != 0.0 {
                            return Err(Error::DivergentGeometry(format!("bond {i}-{j} collapsed")));
                        }
                        continue;
                    }
                    let scale = -k * stretch / d;
                    for a in 0..dim {
                        forces[i * dim + a] += scale * x[a];
                        forces[j * dim + a] -= scale * x[a];
                    }
                }
                Term::LennardJones { i, j, epsilon, sigma } => {
                    let (x, d) = self.separation(r, *i, *j)?;
                    let (e, de, _) = lj_profile(*epsilon, *sigma, d, *i, *j)?;
                    energy += e;
                    let scale = -de / d;
                    for a in 0..dim {
                        forces[i * dim + a] += scale * x[a];
                        forces[j * dim + a] -= scale * x[a];
                    }
                }
                Term::HarmonicWell { i, k, center } => {
                    for a in 0..dim {
                        let dx = r[i * dim + a] - center[a];
                        energy += 0.5 * k * dx * dx;
                        forces[i * dim + a] -= k * dx;
                    }
                }
                Term::HarmonicAngle { i, j, l, k, theta0 } => {
                    let (e, grad) = self.angle_energy_gradient(r, *i, *j, *l, *k, *theta0)?;
                    energy += e;
                    for a in 0..dim {
                        forces[i * dim + a] -= grad[0][a];
                        forces[j * dim + a] -= grad[1][a];
                        forces[l * dim + a] -= grad[2][a];
                    }
                }
                Term::QuadraticForm { k } => {
                    let kr = k * r;
                    energy += 0.5 * r.dot(&kr);
                    forces -= kr;
                }
            }
        }
        Ok((energy, forces))
    }

    fn angle_energy_gradient(
        &self,
        r: &Vector,
        i: usize,
        j: usize,
        l: usize,
        k: f64,
        theta0: f64,
    ) -> Result<(f64, [Vec<f64>; 3])> {
        let (a, la) = self.separation(r, i, j)?;
        let (b, lb) = self.separation(r, l, j)?;
        if la < MIN_PAIR_DISTANCE || lb < MIN_PAIR_DISTANCE {
            return Err(Error::DivergentGeometry(format!("angle {i}-{j}-{l} has a collapsed arm")));
        }
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let cos = (dot / (la * lb)).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let energy = 0.5 * k * (theta - theta0).powi(2);
        let de = k * (theta - theta0);
        let sin = (1.0 - cos * cos).sqrt();
        if de == 0.0 {
            let zero = vec![0.0; self.dim];
            return Ok((energy, [zero.clone(), zero.clone(), zero]));
        }
        if sin < 1e-10 {
            return Err(Error::DivergentGeometry(format!("angle {i}-{j}-{l} is collinear")));
        }
        let factor = -de / sin;
        let gi: Vec<f64> = (0..self.dim).map(|c| factor * (b[c] / (la * lb) - cos * a[c] / (la * la))).collect();
        let gl: Vec<f64> = (0..self.dim).map(|c| factor * (a[c] / (la * lb) - cos * b[c] / (lb * lb))).collect();
        let gj: Vec<f64> = (0..self.dim).map(|c| -gi[c] - gl[c]).collect();
        Ok((energy, [gi, gj, gl]))
    }

    /// Analytic Hessian of the potential (oracle use).
    pub fn hessian(&self, r: &Vector) -> Result<Matrix> {
        self.check_frame(r)?;
        let dim = self.dim;
        let mut h = Matrix::zeros(self.len(), self.len());
        for term in &self.terms {
            match term {
                Term::HarmonicBond { i, j, k, r0 } => {
                    let (x, d) = self.separation(r, *i, *j)?;
                    if d < MIN_PAIR_DISTANCE {
                        return Err(Error::DivergentGeometry(format!("bond {i}-{j} collapsed")));
                    }
                    add_pair_block(&mut h, dim, *i, *j, &x, d, k * (d - r0), *k);
                }
                Term::LennardJones { i, j, epsilon, sigma } => {
                    let (x, d) = self.separation(r, *i, *j)?;
                    let (_, de, d2e) = lj_profile(*epsilon, *sigma, d, *i, *j)?;
                    add_pair_block(&mut h, dim, *i, *j, &x, d, de, d2e);
                }
                Term::HarmonicWell { i, k, .. } => {
                    for a in 0..dim {
                        h[(i * dim + a, i * dim + a)] += k;
                    }
                }
                Term::HarmonicAngle { i, j, l, k, theta0 } => {
                    let atoms = [*i, *j, *l];
                    let local = angle_hessian(r, dim, atoms, *k, *theta0)?;
                    for (p, &ap) in atoms.iter().enumerate() {
                        for (q, &aq) in atoms.iter().enumerate() {
                            for a in 0..dim {
                                for b in 0..dim {
                                    h[(ap * dim + a, aq * dim + b)] += local[(p * dim + a, q * dim + b)];
                                }
                            }
                        }
                    }
                }
                Term::QuadraticForm { k } => h += k,
            }
        }
        Ok(crate::numerics::symmetrize(&h))
    }
}

fn lj_profile(epsilon: f64, sigma: f64, d: f64, i: usize, j: usize) -> Result<(f64, f64, f64)> {
    if d < MIN_PAIR_DISTANCE {
        return Err(Error::DivergentGeometry(format!("LJ pair {i}-{j} overlaps (r = {d:e})")));
    }
    let s6 = (sigma / d).powi(6);
    let s12 = s6 * s6;
    let e = 4.0 * epsilon * (s12 - s6);
    let de = 4.0 * epsilon * (-12.0 * s12 + 6.0 * s6) / d;
    let d2e = 4.0 * epsilon * (156.0 * s12 - 42.0 * s6) / (d * d);
    Ok((e, de, d2e))
}

/// Adds the Hessian of a radial pair potential with derivatives `de`, `d2e` at distance `d`.
#[allow(clippy::too_many_arguments)]
fn add_pair_block(h: &mut Matrix, dim: usize, i: usize, j: usize, x: &[f64], d: f64, de: f64, d2e: f64) {
    for a in 0..dim {
        for b in 0..dim {
            let (ua, ub) = (x[a] / d, x[b] / d);
            let delta = if a == b { 1.0 } else { 0.0 };
            let block = d2e * ua * ub + de / d * (delta - ua * ub);
            h[(i * dim + a, i * dim + b)] += block;
            h[(j * dim + a, j * dim + b)] += block;
            h[(i * dim + a, j * dim + b)] -= block;
            h[(j * dim + a, i * dim + b)] -= block;
        }
    }
}

/// Second-order forward-mode number over `m` local variables.
#[derive(Clone, Debug)]
struct Jet2 {
    v: f64,
    g: Vec<f64>,
    h: Vec<f64>,
}

impl Jet2 {
    fn variable(value: f64, index: usize, m: usize) -> Self {
        let mut g = vec![0.0; m];
        g[index] = 1.0;
        Jet2 { v: value, g, h: vec![0.0; m * m] }
    }

    fn add(&self, o: &Jet2) -> Jet2 {
        Jet2 {
            v: self.v + o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| a + b).collect(),
            h: self.h.iter().zip(&o.h).map(|(a, b)| a + b).collect(),
        }
    }

    fn sub(&self, o: &Jet2) -> Jet2 {
        Jet2 {
            v: self.v - o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| a - b).collect(),
            h: self.h.iter().zip(&o.h).map(|(a, b)| a - b).collect(),
        }
    }

    fn mul(&self, o: &Jet2) -> Jet2 {
        let m = self.g.len();
        let mut h = vec![0.0; m * m];
        for p in 0..m {
            for q in 0..m {
                h[p * m + q] = self.v * o.h[p * m + q]
                    + o.v * self.h[p * m + q]
                    + self.g[p] * o.g[q]
                    + o.g[p] * self.g[q];
            }
        }
        Jet2 {
            v: self.v * o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| self.v * b + o.v * a).collect(),
            h,
        }
    }

    /// Applies a scalar function given its value and first two derivatives at `self.v`.
    fn chain(&self, f: f64, df: f64, d2f: f64) -> Jet2 {
        let m = self.g.len();
        let mut h = vec![0.0; m * m];
        for p in 0..m {
            for q in 0..m {
                h[p * m + q] = df * self.h[p * m + q] + d2f * self.g[p] * self.g[q];
            }
        }
        Jet2 { v: f, g: self.g.iter().map(|a| df * a).collect(), h }
    }
}

fn angle_hessian(r: &Vector, dim: usize, atoms: [usize; 3], k: f64, theta0: f64) -> Result<Matrix> {
    let m = 3 * dim;
    let vars: Vec<Jet2> = atoms
        .iter()
        .enumerate()
        .flat_map(|(p, &atom)| (0..dim).map(move |a| (p * dim + a, atom * dim + a)))
        .map(|(local, global)| Jet2::variable(r[global], local, m))
        .collect();
    let arm = |p: usize| -> Vec<Jet2> { (0..dim).map(|a| vars[p * dim + a].sub(&vars[dim + a])).collect() };
    let (a, b) = (arm(0), arm(2));
    let dot = |x: &[Jet2], y: &[Jet2]| x.iter().zip(y).map(|(p, q)| p.mul(q)).reduce(|s, t| s.add(&t)).unwrap();
    let (ab, aa, bb) = (dot(&a, &b), dot(&a, &a), dot(&b, &b));
    let norm2 = aa.mul(&bb);
    if norm2.v < MIN_PAIR_DISTANCE.powi(4) {
        return Err(Error::DivergentGeometry("angle arm collapsed".into()));
    }
    let inv_norm = norm2.chain(norm2.v.powf(-0.5), -0.5 * norm2.v.powf(-1.5), 0.75 * norm2.v.powf(-2.5));
    let cos = ab.mul(&inv_norm);
    let c = cos.v.clamp(-1.0, 1.0);
    let s2 = 1.0 - c * c;
    if s2 < 1e-20 {
        return Err(Error::DivergentGeometry("angle is collinear".into()));
    }
    let theta = cos.chain(c.acos(), -1.0 / s2.sqrt(), -c / s2.powf(1.5));
    let energy = theta.chain(0.5 * k * (theta.v - theta0).powi(2), k * (theta.v - theta0), k);
    Ok(Matrix::from_row_slice(m, m, &energy.h))
}

/// Potential energy of `frame`.
pub fn aa_energy(frame: &AtomisticFrame, ff: &ForceField) -> Result<f64> {
    Ok(ff.energy_and_forces(&frame.positions)?.0)
}

/// Analytic forces `−∇U`.
pub fn aa_forces(frame: &AtomisticFrame, ff: &ForceField) -> Result<Vector> {
    Ok(ff.energy_and_forces(&frame.positions)?.1)
}

/// Analytic Hessian `∇∇U`, symmetric by construction.
pub fn aa_hessian(frame: &AtomisticFrame, ff: &ForceField) -> Result<Matrix> {
    ff.hessian(&frame.positions)
}

/// Hessian-vector product by central differences of the forces:
/// `−[F(r + εv) − F(r − εv)] / (2ε)`.
pub fn aa_hvp_fd(frame: &AtomisticFrame, ff: &ForceField, direction: &Vector, epsilon: f64) -> Result<Vector> {
    if direction.len() != ff.len() {
        return Err(Error::mismatch(ff.len(), direction.len(), "HVP direction"));
    }
    if !(epsilon > 0.0) || direction.norm() == 0.0 {
        return Err(Error::InvalidArgument("HVP needs epsilon > 0 and a nonzero direction".into()));
    }
    let r = &frame.positions;
    let (_, up) = ff.energy_and_forces(&(r + direction * epsilon))?;
    let (_, down) = ff.energy_and_forces(&(r - direction * epsilon))?;
    Ok(-(up - down) / (2.0 * epsilon))
}

/// Overdamped Langevin settings shared by the Boltzmann sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct LangevinOptions {
    pub dt: f64,
    pub friction: f64,
    /// Steps between recorded frames.
    pub thinning: usize,
    /// Burn-in steps; `None` means `10 * count`.
    pub burn_in: Option<usize>,
    /// Particles held fixed at their initial positions.
    pub frozen: Vec<usize>,
}

impl Default for LangevinOptions {
    fn default() -> Self {
        LangevinOptions { dt: 1e-3, friction: 1.0, thinning: 10, burn_in: None, frozen: Vec::new() }
    }
}

/// Samples `count` frames from `exp(−βU)` with Euler–Maruyama overdamped Langevin dynamics.
///
/// `beta = f64::INFINITY` turns off the noise (gradient descent).
pub fn sample_boltzmann(
    ff: &ForceField,
    beta: f64,
    count: usize,
    options: &LangevinOptions,
    initial: &Vector,
    rng: &mut RngState,
) -> Result<Vec<AtomisticFrame>> {
    if !(beta > 0.0) || count == 0 || !(options.dt > 0.0) || !(options.friction > 0.0) || options.thinning == 0 {
        return Err(Error::InvalidArgument("sample_boltzmann needs beta, dt, friction > 0 and count, thinning ≥ 1".into()));
    }
    ff.check_frame(initial)?;
    let dim = ff.dim();
    let mobile: Vec<bool> = (0..ff.len()).map(|c| !options.frozen.contains(&(c / dim))).collect();
    let drift = options.dt / options.friction;
    let noise = (2.0 * options.dt / (beta * options.friction)).sqrt();
    let burn_in = options.burn_in.unwrap_or(10 * count);

    let mut r = initial.clone();
    let (mut energy, mut forces) = ff.energy_and_forces(&r)?;
    let mut frames = Vec::with_capacity(count);
    let total = burn_in + count * options.thinning;
    for step in 1..=total {
        let xi = rng.normals(r.len());
        for c in 0..r.len() {
            if mobile[c] {
                r[c] += drift * forces[c] + noise * xi[c];
            }
        }
        let (e_new, f_new) = ff.energy_and_forces(&r)?;
        if e_new - energy > 1e6 || !e_new.is_finite() {
            return Err(Error::StepTooLarge { increase: e_new - energy });
        }
        energy = e_new;
        forces = f_new;
        if step > burn_in && (step - burn_in) % options.thinning == 0 {
            frames.push(AtomisticFrame { frame_index: frames.len(), positions: r.clone(), forces: Some(forces.clone()) });
        }
    }
    Ok(frames)
}
