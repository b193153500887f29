//! Differentiable CG potentials.
//!
//! Two kinds are provided: a quadratic baseline `½ (R − R_ref)ᵀ A (R − R_ref)`, whose optimum
//! under HVP matching is known in closed form, and a pair-distance network that sums an MLP of
//! exponential-normal radial features over bead pairs.
//!
//! HVPs come from forward-over-reverse differentiation: the hand-written reverse pass is generic
//! over [`Real`] and is run on [`Dual`] numbers carrying the direction `v`. Training uses a second
//! route that propagates second-order jets in the pair distance and reverses them into the
//! parameters; both routes agree to rounding.

use std::fs;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::path::Path;

use crate::numerics::{Matrix, RngState, Vector};
use crate::store::{format_real, header_field, parse_header, write_atomic, Lines};
use crate::{Error, Result};

/// Scalar arithmetic shared by `f64` and [`Dual`].
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(x: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn cos(self) -> Self;
    fn sin(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Forward-mode dual number `re + ε·eps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Dual { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.eps * o.re + self.re * o.eps)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.re / o.re, (self.eps * o.re - self.re * o.eps) / (o.re * o.re))
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl Real for Dual {
    fn cst(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.eps)
    }
    fn cos(self) -> Self {
        Dual::new(self.re.cos(), -self.re.sin() * self.eps)
    }
    fn sin(self) -> Self {
        Dual::new(self.re.sin(), self.re.cos() * self.eps)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps / (2.0 * s))
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    T::cst(1.0) / (T::cst(1.0) + (-z).exp())
}

/// SiLU and its first three derivatives at `z`.
fn silu_derivatives(z: f64) -> [f64; 4] {
    let s = 1.0 / (1.0 + (-z).exp());
    let p = s * (1.0 - s);
    let q = 1.0 - 2.0 * s;
    [z * s, s + z * p, p * (2.0 + z * q), p * (q * (3.0 + z * q) - 2.0 * z * p)]
}

/// Radial features and cutoff of the pair network.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub rbf_count: usize,
    pub cutoff_low: f64,
    pub cutoff_high: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { rbf_count: 12, cutoff_low: 0.3, cutoff_high: 1.2 }
    }
}

impl FeatureConfig {
    fn validate(&self) -> Result<()> {
        if self.rbf_count == 0 || !(self.cutoff_low < self.cutoff_high) || !(self.cutoff_low >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid feature configuration {self:?}")));
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        5.0 / (self.cutoff_high - self.cutoff_low)
    }

    /// Means evenly spaced in `exp(−α (r − r_low))` from `e⁻⁵` to 1, and the shared width.
    fn means_and_width(&self) -> (Vec<f64>, f64) {
        let start = (-5.0f64).exp();
        let n = self.rbf_count;
        let means = (0..n)
            .map(|k| if n == 1 { start } else { start + (1.0 - start) * k as f64 / (n - 1) as f64 })
            .collect();
        let width = (2.0 / n as f64 * (1.0 - start)).powi(-2);
        (means, width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticBaseline {
    a: Matrix,
    r_ref: Vector,
}

impl QuadraticBaseline {
    pub fn new(a: Matrix, r_ref: Vector) -> Result<Self> {
        let d = r_ref.len();
        if a.shape() != (d, d) {
            return Err(Error::mismatch(d, a.nrows(), "quadratic baseline matrix"));
        }
        if crate::numerics::asymmetry(&a).0 > 1e-12 * a.amax().max(1.0) {
            return Err(Error::InvalidArgument("quadratic baseline matrix is not symmetric".into()));
        }
        Ok(QuadraticBaseline { a: crate::numerics::symmetrize(&a), r_ref })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn r_ref(&self) -> &Vector {
        &self.r_ref
    }

    fn params(&self) -> Vec<f64> {
        let d = self.r_ref.len();
        let mut p = Vec::with_capacity(d * (d + 1) / 2 + d);
        for i in 0..d {
            for j in i..d {
                p.push(self.a[(i, j)]);
            }
        }
        p.extend(self.r_ref.iter());
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let d = self.r_ref.len();
        let mut it = p.iter();
        for i in 0..d {
            for j in i..d {
                let v = *it.next().expect("length checked by caller");
                self.a[(i, j)] = v;
                self.a[(j, i)] = v;
            }
        }
        for x in self.r_ref.iter_mut() {
            *x = *it.next().expect("length checked by caller");
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Layer {
    fn w(&self, params: &[f64], o: usize, i: usize) -> f64 {
        params[self.offset + o * self.inputs + i]
    }

    fn w_index(&self, o: usize, i: usize) -> usize {
        self.offset + o * self.inputs + i
    }

    fn b_index(&self, o: usize) -> usize {
        self.offset + self.outputs * self.inputs + o
    }
}

/// Sum over bead pairs of `s(r) · MLP(φ(r))` with a C² switch `s` that vanishes at the cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMlp {
    beads: usize,
    dim: usize,
    widths: Vec<usize>,
    features: FeatureConfig,
    params: Vec<f64>,
    layers: Vec<Layer>,
    means: Vec<f64>,
    width: f64,
}

/// Second-order jets `(value, d/dr, d²/dr²)` of every layer for one pair distance.
struct PairTape {
    features: Vec<[f64; 3]>,
    /// Pre-activations per layer.
    z: Vec<Vec<[f64; 3]>>,
    /// Post-activations per layer (the last entry is the output).
    a: Vec<Vec<[f64; 3]>>,
    switch: [f64; 3],
}

impl PairMlp {
    /// Seeded initialization: weights `N(0, 1/fan_in)`, biases zero.
    pub fn new(beads: usize, dim: usize, hidden: &[usize], features: FeatureConfig, seed: u64) -> Result<Self> {
        features.validate()?;
        let mut widths = vec![features.rbf_count];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut model = PairMlp::with_params(beads, dim, widths, features, Vec::new())?;
        let mut rng = RngState::new(seed);
        let mut params = vec![0.0; model.n_params()];
        for layer in &model.layers {
            let scale = 1.0 / (layer.inputs as f64).sqrt();
            let draws = rng.normals(layer.inputs * layer.outputs);
            for (k, z) in draws.into_iter().enumerate() {
                params[layer.offset + k] = z * scale;
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Layer widths include the feature count first and the scalar output last.
    fn with_params(beads: usize, dim: usize, widths: Vec<usize>, features: FeatureConfig, params: Vec<f64>) -> Result<Self> {
        features.validate()?;
        if beads < 2 || dim == 0 {
            return Err(Error::InvalidArgument("pair network needs at least two beads and dim ≥ 1".into()));
        }
        if widths.len() < 2 || widths[0] != features.rbf_count || *widths.last().unwrap() != 1 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in widths.windows(2) {
            layers.push(Layer { inputs: w[0], outputs: w[1], offset });
            offset += w[0] * w[1] + w[1];
        }
        let (means, width) = features.means_and_width();
        Ok(PairMlp { beads, dim, widths, features, params, layers, means, width })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn features(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn beads(&self) -> usize {
        self.beads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.inputs * l.outputs + l.outputs).sum()
    }

    /// Zeroes the output layer (weights and bias).
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last().unwrap().clone();
        for p in &mut self.params[last.offset..] {
            *p = 0.0;
        }
    }

    fn switch<T: Real>(&self, r: T) -> T {
        let c = T::cst(0.5) * (T::cst(1.0) + (T::cst(std::f64::consts::PI / self.features.cutoff_high) * r).cos());
        c * c
    }

    /// Pair energy and its derivative in `r`, by a reverse pass generic over the scalar type.
    fn pair_energy_and_slope<T: Real>(&self, r: T) -> (T, T) {
        let alpha = self.features.alpha();
        let x = (T::cst(alpha) * (T::cst(self.features.cutoff_low) - r)).exp();
        let dx = T::cst(-alpha) * x;
        let mut act: Vec<T> = Vec::with_capacity(self.means.len());
        let mut dact: Vec<T> = Vec::with_capacity(self.means.len());
        for &mu in &self.means {
            let diff = x - T::cst(mu);
            let phi = (T::cst(-self.width) * diff * diff).exp();
            act.push(phi);
            dact.push(T::cst(-2.0 * self.width) * diff * phi * dx);
        }
        let features_slope = dact;
        // Forward, keeping pre-activations.
        let mut pre: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut inputs = act;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            for o in 0..layer.outputs {
                let mut s = T::cst(self.params[layer.b_index(o)]);
                for (i, a) in inputs.iter().enumerate() {
                    s += T::cst(layer.w(&self.params, o, i)) * *a;
                }
                z.push(s);
            }
            inputs = if l + 1 < self.layers.len() { z.iter().map(|&v| v * sigmoid(v)).collect() } else { z.clone() };
            pre.push(z);
        }
        let g = inputs[0];
        // Reverse to the features.
        let mut bar = vec![T::cst(1.0)];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if l + 1 < self.layers.len() {
                for (b, &z) in bar.iter_mut().zip(&pre[l]) {
                    let s = sigmoid(z);
                    *b = *b * (s + z * s * (T::cst(1.0) - s));
                }
            }
            let mut prev = vec![T::cst(0.0); layer.inputs];
            for (o, &b) in bar.iter().enumerate() {
                for (i, p) in prev.iter_mut().enumerate() {
                    *p += T::cst(layer.w(&self.params, o, i)) * b;
                }
            }
            bar = prev;
        }
        let mut dg = T::cst(0.0);
        for (b, d) in bar.iter().zip(&features_slope) {
            dg += *b * *d;
        }
        let s = self.switch(r);
        let c_arg = T::cst(std::f64::consts::PI / self.features.cutoff_high) * r;
        let c = T::cst(0.5) * (T::cst(1.0) + c_arg.cos());
        let dc = T::cst(-0.5 * std::f64::consts::PI / self.features.cutoff_high) * c_arg.sin();
        let ds = T::cst(2.0) * c * dc;
        (s * g, ds * g + s * dg)
    }

    fn pair_diff<T: Real>(&self, r: &[T], i: usize, j: usize) -> (Vec<T>, T) {
        let d = self.dim;
        let diff: Vec<T> = (0..d).map(|a| r[i * d + a] - r[j * d + a]).collect();
        let mut sq = T::cst(0.0);
        for &x in &diff {
            sq += x * x;
        }
        (diff, sq.sqrt())
    }

    /// Energy and gradient `∇W` at `r`, generic over the scalar type.
    fn energy_gradient<T: Real>(&self, r: &[T]) -> (T, Vec<T>) {
        let mut energy = T::cst(0.0);
        let mut grad = vec![T::cst(0.0); r.len()];
        for i in 0..self.beads {
            for j in (i + 1)..self.beads {
                let (diff, dist) = self.pair_diff(r, i, j);
                if dist.value() >= self.features.cutoff_high || dist.value() == 0.0 {
                    continue;
                }
                let (e, de) = self.pair_energy_and_slope(dist);
                energy += e;
                let scale = de / dist;
                for (a, &x) in diff.iter().enumerate() {
                    grad[i * self.dim + a] += scale * x;
                    grad[j * self.dim + a] += -(scale * x);
                }
            }
        }
        (energy, grad)
    }

    /// Jets of every layer for one pair distance.
    fn pair_tape(&self, r: f64) -> PairTape {
        let alpha = self.features.alpha();
        let x = (alpha * (self.features.cutoff_low - r)).exp();
        let (x1, x2) = (-alpha * x, alpha * alpha * x);
        let features: Vec<[f64; 3]> = self
            .means
            .iter()
            .map(|&mu| {
                let diff = x - mu;
                let phi = (-self.width * diff * diff).exp();
                let px = -2.0 * self.width * diff * phi;
                let pxx = (4.0 * self.width * self.width * diff * diff - 2.0 * self.width) * phi;
                [phi, px * x1, pxx * x1 * x1 + px * x2]
            })
            .collect();
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut input = features.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = vec![[0.0; 3]; layer.outputs];
            for (o, zo) in z.iter_mut().enumerate() {
                zo[0] = self.params[layer.b_index(o)];
                for (i, a) in input.iter().enumerate() {
                    let w = layer.w(&self.params, o, i);
                    for k in 0..3 {
                        zo[k] += w * a[k];
                    }
                }
            }
            let a: Vec<[f64; 3]> = if l + 1 < self.layers.len() {
                z.iter()
                    .map(|zj| {
                        let [f0, f1, f2, _] = silu_derivatives(zj[0]);
                        [f0, f1 * zj[1], f2 * zj[1] * zj[1] + f1 * zj[2]]
                    })
                    .collect()
            } else {
                z.clone()
            };
            zs.push(z);
            acts.push(a.clone());
            input = a;
        }
        let pi_rc = std::f64::consts::PI / self.features.cutoff_high;
        let (cosv, sinv) = ((pi_rc * r).cos(), (pi_rc * r).sin());
        let c = [0.5 * (1.0 + cosv), -0.5 * pi_rc * sinv, -0.5 * pi_rc * pi_rc * cosv];
        let switch = [c[0] * c[0], 2.0 * c[0] * c[1], 2.0 * c[1] * c[1] + 2.0 * c[0] * c[2]];
        PairTape { features, z: zs, a: acts, switch }
    }

    fn pair_jet(&self, tape: &PairTape) -> [f64; 3] {
        let g = tape.a.last().unwrap()[0];
        let s = tape.switch;
        [s[0] * g[0], s[1] * g[0] + s[0] * g[1], s[2] * g[0] + 2.0 * s[1] * g[1] + s[0] * g[2]]
    }

    /// Accumulates `∂/∂θ (ē · (E, E′, E″))` into `grad`.
    fn pair_backward(&self, tape: &PairTape, cot: [f64; 3], grad: &mut [f64]) {
        let s = tape.switch;
        let mut bar = vec![[
            cot[0] * s[0] + cot[1] * s[1] + cot[2] * s[2],
            cot[1] * s[0] + 2.0 * cot[2] * s[1],
            cot[2] * s[0],
        ]];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if l + 1 < self.layers.len() {
                for (b, z) in bar.iter_mut().zip(&tape.z[l]) {
                    let [_, f1, f2, f3] = silu_derivatives(z[0]);
                    let y = *b;
                    *b = [
                        y[0] * f1 + y[1] * f2 * z[1] + y[2] * (f3 * z[1] * z[1] + f2 * z[2]),
                        y[1] * f1 + 2.0 * y[2] * f2 * z[1],
                        y[2] * f1,
                    ];
                }
            }
            let input = if l == 0 { &tape.features } else { &tape.a[l - 1] };
            let mut prev = vec![[0.0; 3]; layer.inputs];
            for (o, b) in bar.iter().enumerate() {
                grad[layer.b_index(o)] += b[0];
                for (i, a) in input.iter().enumerate() {
                    grad[layer.w_index(o, i)] += b[0] * a[0] + b[1] * a[1] + b[2] * a[2];
                    if l > 0 {
                        let w = layer.w(&self.params, o, i);
                        for k in 0..3 {
                            prev[i][k] += w * b[k];
                        }
                    }
                }
            }
            bar = prev;
        }
    }

    /// Pairs inside the cutoff with their unit vectors, distances and tapes.
    fn active_pairs(&self, r: &Vector) -> Vec<(usize, usize, Vec<f64>, f64, PairTape)> {
        let mut out = Vec::new();
        for i in 0..self.beads {
            for j in (i + 1)..self.beads {
                let (diff, dist) = self.pair_diff(r.as_slice(), i, j);
                if dist >= self.features.cutoff_high || dist == 0.0 {
                    continue;
                }
                let u = diff.iter().map(|x| x / dist).collect();
                out.push((i, j, u, dist, self.pair_tape(dist)));
            }
        }
        out
    }
}

/// Cotangents of a scalar objective with respect to the model outputs at one configuration.
#[derive(Clone, Debug, Default)]
pub struct Cotangents {
    pub energy: f64,
    pub forces: Option<Vector>,
    /// `(probe v_k, ∂L/∂(H v_k))` pairs.
    pub hvp: Vec<(Vector, Vector)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CGModel {
    Quadratic(QuadraticBaseline),
    Mlp(PairMlp),
}

impl CGModel {
    pub fn cg_len(&self) -> usize {
        match self {
            CGModel::Quadratic(q) => q.r_ref.len(),
            CGModel::Mlp(m) => m.beads * m.dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CGModel::Quadratic(_) => "quadratic",
            CGModel::Mlp(_) => "mlp",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            CGModel::Quadratic(q) => q.params(),
            CGModel::Mlp(m) => m.params.clone(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            CGModel::Quadratic(q) => {
                let d = q.r_ref.len();
                d * (d + 1) / 2 + d
            }
            CGModel::Mlp(m) => m.n_params(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::mismatch(self.n_params(), p.len(), "parameter vector"));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        match self {
            CGModel::Quadratic(q) => q.set_params(p),
            CGModel::Mlp(m) => m.params.copy_from_slice(p),
        }
        Ok(())
    }

    fn check(&self, r: &Vector) -> Result<()> {
        if r.len() != self.cg_len() {
            return Err(Error::mismatch(self.cg_len(), r.len(), "CG configuration length"));
        }
        Ok(())
    }

    /// Energy, forces and the HVPs along `probes`, sharing one pass over the pairs.
    pub fn evaluate(&self, r: &Vector, probes: &[Vector]) -> Result<(f64, Vector, Vec<Vector>)> {
        self.check(r)?;
        for v in probes {
            self.check(v)?;
        }
        match self {
            CGModel::Quadratic(q) => {
                let x = r - &q.r_ref;
                let ax = &q.a * &x;
                Ok((0.5 * x.dot(&ax), -ax, probes.iter().map(|v| &q.a * v).collect()))
            }
            CGModel::Mlp(m) => {
                let d = m.dim;
                let mut energy = 0.0;
                let mut forces = Vector::zeros(r.len());
                let mut hvps = vec![Vector::zeros(r.len()); probes.len()];
                for (i, j, u, dist, tape) in m.active_pairs(r) {
                    let [e0, e1, e2] = m.pair_jet(&tape);
                    energy += e0;
                    for a in 0..d {
                        forces[i * d + a] -= e1 * u[a];
                        forces[j * d + a] += e1 * u[a];
                    }
                    for (v, hv) in probes.iter().zip(hvps.iter_mut()) {
                        let w: Vec<f64> = (0..d).map(|a| v[i * d + a] - v[j * d + a]).collect();
                        let uw: f64 = u.iter().zip(&w).map(|(x, y)| x * y).sum();
                        for a in 0..d {
                            let h = e2 * uw * u[a] + e1 / dist * (w[a] - uw * u[a]);
                            hv[i * d + a] += h;
                            hv[j * d + a] -= h;
                        }
                    }
                }
                Ok((energy, forces, hvps))
            }
        }
    }

    /// Gradient with respect to the parameters of `c_E·W + c_F·F + Σ c_Hk·(H v_k)`.
    pub fn param_grad(&self, r: &Vector, cot: &Cotangents) -> Result<Vector> {
        self.check(r)?;
        if let Some(cf) = &cot.forces {
            self.check(cf)?;
        }
        for (v, c) in &cot.hvp {
            self.check(v)?;
            self.check(c)?;
        }
        match self {
            CGModel::Quadratic(q) => {
                let dlen = q.r_ref.len();
                let x = r - &q.r_ref;
                let mut g = &x * x.transpose() * (0.5 * cot.energy);
                let mut r_bar = -(&q.a * &x) * cot.energy;
                if let Some(cf) = &cot.forces {
                    g -= cf * x.transpose();
                    r_bar += &q.a * cf;
                }
                for (v, c) in &cot.hvp {
                    g += c * v.transpose();
                }
                let mut out = Vec::with_capacity(self.n_params());
                for i in 0..dlen {
                    for j in i..dlen {
                        out.push(if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] });
                    }
                }
                out.extend(r_bar.iter());
                Ok(Vector::from_vec(out))
            }
            CGModel::Mlp(m) => {
                let d = m.dim;
                let mut grad = vec![0.0; m.n_params()];
                for (i, j, u, dist, tape) in m.active_pairs(r) {
                    let mut e1_bar = 0.0;
                    let mut e2_bar = 0.0;
                    if let Some(cf) = &cot.forces {
                        for a in 0..d {
                            e1_bar -= (cf[i * d + a] - cf[j * d + a]) * u[a];
                        }
                    }
                    for (v, c) in &cot.hvp {
                        let w: Vec<f64> = (0..d).map(|a| v[i * d + a] - v[j * d + a]).collect();
                        let uw: f64 = u.iter().zip(&w).map(|(x, y)| x * y).sum();
                        for a in 0..d {
                            let cd = c[i * d + a] - c[j * d + a];
                            e2_bar += cd * u[a] * uw;
                            e1_bar += cd * (w[a] - uw * u[a]) / dist;
                        }
                    }
                    m.pair_backward(&tape, [cot.energy, e1_bar, e2_bar], &mut grad);
                }
                Ok(Vector::from_vec(grad))
            }
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("CGMODEL v1 kind={}\n", self.kind());
        match self {
            CGModel::Quadratic(q) => out.push_str(&format!("dim={}\n", q.r_ref.len())),
            CGModel::Mlp(m) => out.push_str(&format!(
                "layers={} rbf={} cutoff_low={} cutoff_high={} beads={} dim={}\n",
                m.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
                m.features.rbf_count,
                format_real(m.features.cutoff_low),
                format_real(m.features.cutoff_high),
                m.beads,
                m.dim
            )),
        }
        for p in self.params() {
            out.push_str(&format_real(p));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let (_, header) = lines.next_line()?;
        let kind: String = header_field(&parse_header(header, "CGMODEL")?, "kind")?;
        let (no, shape_line) = lines.next_line()?;
        let shape = parse_header(&format!("SHAPE v1 {shape_line}"), "SHAPE")
            .map_err(|_| Error::Parse { line: no, message: "malformed shape line".into() })?;
        let shape_err = |e: Error| match e {
            Error::Parse { message, .. } => Error::Parse { line: no, message },
            other => other,
        };
        let mut model = match kind.as_str() {
            "quadratic" => {
                let d: usize = header_field(&shape, "dim").map_err(shape_err)?;
                CGModel::Quadratic(QuadraticBaseline::new(Matrix::zeros(d, d), Vector::zeros(d))?)
            }
            "mlp" => {
                let layers: String = header_field(&shape, "layers").map_err(shape_err)?;
                let widths = layers
                    .split(',')
                    .map(|w| w.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Parse { line: no, message: format!("bad layer list {layers:?}") })?;
                let features = FeatureConfig {
                    rbf_count: header_field(&shape, "rbf").map_err(shape_err)?,
                    cutoff_low: header_field(&shape, "cutoff_low").map_err(shape_err)?,
                    cutoff_high: header_field(&shape, "cutoff_high").map_err(shape_err)?,
                };
                let beads = header_field(&shape, "beads").map_err(shape_err)?;
                let dim = header_field(&shape, "dim").map_err(shape_err)?;
                CGModel::Mlp(PairMlp::with_params(beads, dim, widths, features, Vec::new())?)
            }
            other => return Err(Error::Parse { line: 1, message: format!("unknown model kind {other:?}") }),
        };
        let mut params = Vec::with_capacity(model.n_params());
        while let Some((no, l)) = lines.peek_nonblank() {
            params.push(l.trim().parse::<f64>().map_err(|_| Error::Parse { line: no, message: format!("not a number: {l:?}") })?);
        }
        if let CGModel::Mlp(m) = &mut model {
            m.params = vec![0.0; m.n_params()];
        }
        model.set_params(&params)?;
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.render())
    }

    pub fn read(path: &Path) -> Result<Self> {
        CGModel::parse(&fs::read_to_string(path)?)
    }
}

pub fn model_energy(m: &CGModel, r: &Vector) -> Result<f64> {
    m.check(r)?;
    match m {
        CGModel::Quadratic(_) => Ok(m.evaluate(r, &[])?.0),
        CGModel::Mlp(p) => Ok(p.energy_gradient(r.as_slice()).0),
    }
}

/// `−∇W` from the reverse pass.
pub fn model_forces(m: &CGModel, r: &Vector) -> Result<Vector> {
    m.check(r)?;
    match m {
        CGModel::Quadratic(_) => Ok(m.evaluate(r, &[])?.1),
        CGModel::Mlp(p) => Ok(-Vector::from_vec(p.energy_gradient(r.as_slice()).1)),
    }
}

/// `∇∇W · v` by pushing the tangent `v` through the reverse pass.
pub fn model_hvp(m: &CGModel, r: &Vector, v: &Vector) -> Result<Vector> {
    m.check(r)?;
    m.check(v)?;
    match m {
        CGModel::Quadratic(q) => Ok(q.a() * v),
        CGModel::Mlp(p) => {
            let duals: Vec<Dual> = r.iter().zip(v.iter()).map(|(&x, &t)| Dual::new(x, t)).collect();
            let (_, grad) = p.energy_gradient(&duals);
            Ok(Vector::from_iterator(grad.len(), grad.iter().map(|g| g.eps)))
        }
    }
}

pub fn model_param_grad(m: &CGModel, r: &Vector, cot: &Cotangents) -> Result<Vector> {
    m.param_grad(r, cot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(seed: u64) -> CGModel {
        CGModel::Mlp(PairMlp::new(4, 3, &[8, 8], FeatureConfig { rbf_count: 6, cutoff_low: 0.3, cutoff_high: 2.0 }, seed).unwrap())
    }

    fn config(rng: &mut RngState) -> Vector {
        let mut r = Vector::zeros(12);
        for b in 0..4 {
            for a in 0..3 {
                r[b * 3 + a] = if a == 0 { 0.8 * b as f64 } else { 0.0 } + 0.15 * rng.normals(1)[0];
            }
        }
        r
    }

    #[test]
    fn quadratic_hand_values() {
        let q = CGModel::Quadratic(QuadraticBaseline::new(Matrix::identity(2, 2), Vector::from_row_slice(&[1.0, 2.0])).unwrap());
        assert_eq!(model_energy(&q, &Vector::from_row_slice(&[1.0, 2.0])).unwrap(), 0.0);
        let a = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let q = CGModel::Quadratic(QuadraticBaseline::new(a.clone(), Vector::zeros(2)).unwrap());
        let r = Vector::from_row_slice(&[1.0, 1.0]);
        assert_eq!(model_energy(&q, &r).unwrap(), 3.0);
        assert_eq!(model_forces(&q, &r).unwrap(), -(&a * &r));
        let v = Vector::from_row_slice(&[0.3, -2.0]);
        assert_eq!(model_hvp(&q, &r, &v).unwrap(), &a * &v);
    }

    #[test]
    fn asymmetric_baseline_is_rejected() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QuadraticBaseline::new(a, Vector::zeros(2)).is_err());
    }

    #[test]
    fn zero_output_layer_gives_zero_energy() {
        let mut rng = RngState(1);
        let CGModel::Mlp(mut p) = mlp(3) else { unreachable!() };
        p.zero_output_layer();
        let m = CGModel::Mlp(p);
        for _ in 0..5 {
            assert_eq!(model_energy(&m, &config(&mut rng)).unwrap(), 0.0);
        }
    }

    #[test]
    fn silu_derivative_chain() {
        for z in [-3.0, -0.4, 0.0, 0.7, 2.5] {
            let h = 1e-5;
            let [_, d1, d2, d3] = silu_derivatives(z);
            let f = |x: f64| silu_derivatives(x);
            assert!(((f(z + h)[0] - f(z - h)[0]) / (2.0 * h) - d1).abs() < 1e-9);
            assert!(((f(z + h)[1] - f(z - h)[1]) / (2.0 * h) - d2).abs() < 1e-9);
            assert!(((f(z + h)[2] - f(z - h)[2]) / (2.0 * h) - d3).abs() < 1e-9);
        }
    }

    #[test]
    fn switch_is_c2_at_cutoff() {
        let CGModel::Mlp(p) = mlp(1) else { unreachable!() };
        let tape = p.pair_tape(2.0 - 1e-12);
        assert!(tape.switch.iter().all(|s| s.abs() < 1e-10));
        let tape = p.pair_tape(0.0);
        assert_eq!(tape.switch[0], 1.0);
    }

    #[test]
    fn forces_match_finite_differences() {
        let mut rng = RngState(7);
        for seed in 0..10 {
            let m = mlp(seed);
            let r = config(&mut rng);
            let f = model_forces(&m, &r).unwrap();
            let fd = crate::numerics::fd_gradient(|x| model_energy(&m, x).unwrap(), &r, 1e-6);
            assert!((&f + &fd).norm() / f.norm() < 1e-6);
            // pair features depend on differences only
            assert!(f.iter().step_by(3).sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn dual_and_jet_routes_agree() {
        let mut rng = RngState(8);
        for seed in 0..10 {
            let m = mlp(seed);
            let r = config(&mut rng);
            let v = rng.normal_vector(12);
            let (e, f, hv) = m.evaluate(&r, std::slice::from_ref(&v)).unwrap();
            assert!((e - model_energy(&m, &r).unwrap()).abs() < 1e-12 * e.abs().max(1.0));
            assert!((&f - model_forces(&m, &r).unwrap()).amax() < 1e-12 * f.amax().max(1.0));
            let dual = model_hvp(&m, &r, &v).unwrap();
            assert!((&hv[0] - &dual).amax() < 1e-12 * dual.amax().max(1.0));
        }
    }

    #[test]
    fn translation_invariance() {
        let mut rng = RngState(9);
        let m = mlp(2);
        let r = config(&mut rng);
        let shift = Vector::from_iterator(12, (0..12).map(|c| [0.4, -1.1, 2.0][c % 3]));
        let a = model_forces(&m, &r).unwrap();
        let b = model_forces(&m, &(&r + shift)).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn param_grad_scales_and_vanishes_at_minimum() {
        let mut rng = RngState(10);
        let m = mlp(4);
        let r = config(&mut rng);
        let v = rng.normal_vector(12);
        let cot = Cotangents { energy: 0.3, forces: Some(rng.normal_vector(12)), hvp: vec![(v.clone(), rng.normal_vector(12))] };
        let g = m.param_grad(&r, &cot).unwrap();
        let scaled = Cotangents {
            energy: 0.6,
            forces: cot.forces.as_ref().map(|c| c * 2.0),
            hvp: vec![(v.clone(), &cot.hvp[0].1 * 2.0)],
        };
        assert!((m.param_grad(&r, &scaled).unwrap() - &g * 2.0).amax() < 1e-12 * g.amax());
        // residual F − F(θ₀) is zero, so the cotangent 2(F − g) vanishes
        let zero = Cotangents { energy: 0.0, forces: Some(Vector::zeros(12)), hvp: vec![] };
        assert_eq!(m.param_grad(&r, &zero).unwrap(), Vector::zeros(m.n_params()));
    }

    #[test]
    fn mlp_param_grad_matches_fd() {
        let mut rng = RngState(12);
        let m = mlp(6);
        let r = config(&mut rng);
        let probes = [rng.normal_vector(12), rng.normal_vector(12)];
        let cot = Cotangents {
            energy: 0.4,
            forces: Some(rng.normal_vector(12)),
            hvp: probes.iter().map(|v| (v.clone(), rng.normal_vector(12))).collect(),
        };
        let objective = |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_params(p).unwrap();
            let (e, f, h) = mm.evaluate(&r, &probes).unwrap();
            cot.energy * e + cot.forces.as_ref().unwrap().dot(&f) + cot.hvp.iter().zip(&h).map(|((_, c), hv)| c.dot(hv)).sum::<f64>()
        };
        let g = m.param_grad(&r, &cot).unwrap();
        let p0 = m.params();
        for idx in (0..p0.len()).step_by(7) {
            let h = 1e-6;
            let mut up = p0.clone();
            up[idx] += h;
            let mut down = p0.clone();
            down[idx] -= h;
            let fd = (objective(&up) - objective(&down)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6 * g.amax(), "param {idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn quadratic_param_grad_matches_fd() {
        let mut rng = RngState(11);
        let a = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let m = CGModel::Quadratic(QuadraticBaseline::new(a, Vector::from_row_slice(&[0.1, -0.2])).unwrap());
        let r = rng.normal_vector(2);
        let v = rng.normal_vector(2);
        let cot = Cotangents { energy: 0.7, forces: Some(rng.normal_vector(2)), hvp: vec![(v.clone(), rng.normal_vector(2))] };
        let objective = |p: &Vector| {
            let mut mm = m.clone();
            mm.set_params(p.as_slice()).unwrap();
            let (e, f, h) = mm.evaluate(&r, std::slice::from_ref(&v)).unwrap();
            cot.energy * e + cot.forces.as_ref().unwrap().dot(&f) + cot.hvp[0].1.dot(&h[0])
        };
        let p0 = Vector::from_vec(m.params());
        let fd = crate::numerics::fd_gradient(objective, &p0, 1e-6);
        let g = m.param_grad(&r, &cot).unwrap();
        assert!((g - fd).amax() < 1e-8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let models = [
            mlp(5),
            CGModel::Quadratic(QuadraticBaseline::new(Matrix::from_row_slice(2, 2, &[1.5, 0.1, 0.1, 0.7]), Vector::from_row_slice(&[0.2, 0.3])).unwrap()),
        ];
        for m in models {
            let text = m.render();
            assert!(text.starts_with(&format!("CGMODEL v1 kind={}\n", m.kind())));
            assert_eq!(CGModel::parse(&text).unwrap(), m);
        }
        assert!(CGModel::parse("CGMODEL v1 kind=quadratic\ndim=1\n1.0\n").is_err());
        assert!(CGModel::parse("CGMODEL v1 kind=tree\ndim=1\n").is_err());
    }
}
