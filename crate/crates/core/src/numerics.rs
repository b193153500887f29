//! Deterministic PRNG, small dense linear algebra and finite-difference helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator state. Copy semantics: a state is a value, never shared mutably.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState(pub u64);

/// One SplitMix64 step in functional form.
pub fn splitmix64_next(state: RngState) -> (RngState, u64) {
    let s = state.0.wrapping_add(GOLDEN_GAMMA);
    let mut z = s;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (RngState(s), z ^ (z >> 31))
}

/// Draws `count` standard normals, returning the advanced state.
pub fn standard_normals(rng: RngState, count: usize) -> (RngState, Vector) {
    let mut rng = rng;
    let values = rng.normals(count);
    (rng, Vector::from_vec(values))
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        let (next, out) = splitmix64_next(*self);
        *self = next;
        out
    }

    /// Uniform on (0, 1].
    pub fn uniform(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        1.0 - u
    }

    /// Box–Muller normals; the second value of the last pair is dropped for odd counts.
    pub fn normals(&mut self, count: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(count + 1);
        while out.len() < count {
            let u1 = self.uniform();
            let u2 = self.uniform();
            let radius = (-2.0 * u1.ln()).sqrt();
            let angle = 2.0 * std::f64::consts::PI * u2;
            out.push(radius * angle.cos());
            out.push(radius * angle.sin());
        }
        out.truncate(count);
        out
    }

    pub fn normal_vector(&mut self, count: usize) -> Vector {
        Vector::from_vec(self.normals(count))
    }

    /// Uniform index in `0..bound` (bound > 0).
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Cholesky factor of an SPD matrix with the pivot threshold `1e-12 * trace / rows`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    lower: Matrix,
}

impl SpdFactor {
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::mismatch(n, a.ncols(), "solve_spd: matrix must be square"));
        }
        if n == 0 {
            return Ok(SpdFactor { lower: Matrix::zeros(0, 0) });
        }
        let threshold = 1e-12 * a.trace().abs() / n as f64;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut pivot = a[(j, j)];
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            if !(pivot > threshold) {
                return Err(Error::NotPositiveDefinite { row: j, pivot, threshold });
            }
            let d = pivot.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(SpdFactor { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        let n = self.lower.nrows();
        let l = &self.lower;
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }

    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col = self.solve(&b.column(c).into_owned());
            out.set_column(c, &col);
        }
        out
    }
}

/// Solves `A x = b` for symmetric positive definite `A`, with one step of iterative refinement.
pub fn solve_spd(a: &Matrix, b: &Vector) -> Result<Vector> {
    if b.len() != a.nrows() {
        return Err(Error::mismatch(a.nrows(), b.len(), "solve_spd: right-hand side"));
    }
    let factor = SpdFactor::new(a)?;
    let mut x = factor.solve(b);
    let residual = b - a * &x;
    x += factor.solve(&residual);
    Ok(x)
}

/// Symmetric eigen-decomposition with eigenvalues sorted descending; eigenvectors are the columns.
pub fn sym_eig(a: &Matrix) -> Result<(Vector, Matrix)> {
    const MAX_SWEEPS: usize = 100;
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::mismatch(n, a.ncols(), "sym_eig: matrix must be square"));
    }
    if n == 0 {
        return Ok((Vector::zeros(0), Matrix::zeros(0, 0)));
    }
    let sym = symmetrize(a);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, MAX_SWEEPS * n * n)
        .ok_or(Error::NoConvergence(MAX_SWEEPS))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// `max |A - Aᵀ|`, together with the index pair that attains it.
pub fn asymmetry(a: &Matrix) -> (f64, (usize, usize)) {
    let mut best = (0.0, (0, 0));
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            let d = (a[(i, j)] - a[(j, i)]).abs();
            if d > best.0 {
                best = (d, (i, j));
            }
        }
    }
    best
}

/// Sample cross-covariance `Σ(a, b)` with divisor `n - 1`.
pub fn cross_covariance(a: &[Vector], b: &[Vector]) -> Matrix {
    let n = a.len();
    assert_eq!(n, b.len(), "cross_covariance: sample counts differ");
    let (da, db) = (a.first().map_or(0, |v| v.len()), b.first().map_or(0, |v| v.len()));
    let mut out = Matrix::zeros(da, db);
    if n < 2 {
        return out;
    }
    let ma = mean_vector(a);
    let mb = mean_vector(b);
    for (x, y) in a.iter().zip(b) {
        out += (x - &ma) * (y - &mb).transpose();
    }
    out / (n - 1) as f64
}

pub fn mean_vector(samples: &[Vector]) -> Vector {
    let d = samples.first().map_or(0, |v| v.len());
    let mut acc = Vector::zeros(d);
    for s in samples {
        acc += s;
    }
    if !samples.is_empty() {
        acc /= samples.len() as f64;
    }
    acc
}

pub fn mean_matrix(samples: &[Matrix]) -> Matrix {
    let (r, c) = samples.first().map_or((0, 0), |m| m.shape());
    let mut acc = Matrix::zeros(r, c);
    for s in samples {
        acc += s;
    }
    if !samples.is_empty() {
        acc /= samples.len() as f64;
    }
    acc
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F: FnMut(&Vector) -> f64>(mut f: F, x: &Vector, step: f64) -> Vector {
    let mut g = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + step;
        let up = f(&probe);
        probe[i] = xi - step;
        let down = f(&probe);
        probe[i] = xi;
        g[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Central-difference Jacobian of a vector function; row `i` holds `∂f_i/∂x`.
pub fn fd_jacobian<F: FnMut(&Vector) -> Result<Vector>>(mut f: F, x: &Vector, step: f64) -> Result<Matrix> {
    let mut probe = x.clone();
    let mut columns = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + step;
        let up = f(&probe)?;
        probe[i] = xi - step;
        let down = f(&probe)?;
        probe[i] = xi;
        columns.push((up - down) / (2.0 * step));
    }
    let rows = columns.first().map_or(0, |c| c.len());
    let mut jac = Matrix::zeros(rows, x.len());
    for (i, c) in columns.iter().enumerate() {
        jac.set_column(i, c);
    }
    Ok(jac)
}

/// Central-difference directional derivative of a vector function along `direction`.
pub fn fd_directional<F: FnMut(&Vector) -> Result<Vector>>(
    mut f: F,
    x: &Vector,
    direction: &Vector,
    step: f64,
) -> Result<Vector> {
    let up = f(&(x + direction * step))?;
    let down = f(&(x - direction * step))?;
    Ok((up - down) / (2.0 * step))
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn_1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn_1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Second central difference of `values` at interior index `i` with uniform spacing `h`.
pub fn second_difference(values: &[f64], i: usize, h: f64) -> f64 {
    (values[i + 1] - 2.0 * values[i] + values[i - 1]) / (h * h)
}

/// Relative error `|a - b| / max(|b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

/// Max-norm relative error between two vectors, scaled by the larger norm of `b`.
pub fn relative_error_vec(a: &Vector, b: &Vector, floor: f64) -> f64 {
    (a - b).amax() / b.amax().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_first_outputs_for_seed_zero() {
        let (s1, a) = splitmix64_next(RngState(0));
        let (_, b) = splitmix64_next(s1);
        assert_eq!(a, 0xE220_A839_7B1D_CDAF);
        assert_eq!(b, 0x6E78_9E6A_A1B9_65F4);
        assert_ne!(a, b);
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let mut x = RngState::new(42);
        let mut y = RngState::new(42);
        for _ in 0..1000 {
            assert_eq!(x.next_u64(), y.next_u64());
        }
    }

    #[test]
    fn normal_moments() {
        let (_, z) = standard_normals(RngState(7), 100_000);
        let mean = z.mean();
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn normals_count_one_and_determinism() {
        let (_, z) = standard_normals(RngState(3), 1);
        assert_eq!(z.len(), 1);
        let (_, a) = standard_normals(RngState(3), 17);
        let (_, b) = standard_normals(RngState(3), 17);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn uniform_is_in_open_closed_unit_interval() {
        let mut rng = RngState(11);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!(u > 0.0 && u <= 1.0);
        }
    }

    #[test]
    fn solve_spd_hand_cases() {
        let x = solve_spd(&Matrix::identity(3, 3), &Vector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);
        let a = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let x = solve_spd(&a, &Vector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!((x[0] - 1.0 / 3.0).abs() < 1e-15 && (x[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = solve_spd(&a, &Vector::from_vec(vec![1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { row: 1, .. }));
        let singular = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(solve_spd(&singular, &Vector::from_vec(vec![1.0, 1.0])).is_err());
    }

    fn random_matrix(rng: &mut RngState, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, rng.normals(r * c))
    }

    #[test]
    fn solve_spd_random_residuals() {
        let mut rng = RngState(5);
        for d in 2..=12 {
            for _ in 0..1000 {
                let g = random_matrix(&mut rng, d, d);
                let a = &g * g.transpose() + Matrix::identity(d, d);
                let b = rng.normal_vector(d);
                let x = solve_spd(&a, &b).unwrap();
                let res = (&a * &x - &b).amax();
                assert!(res <= 1e-10 * b.amax(), "d={d} residual {res}");
            }
        }
    }

    #[test]
    fn sym_eig_hand_cases() {
        let (vals, vecs) = sym_eig(&Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0])).unwrap();
        assert_eq!(vals.as_slice(), &[3.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-15);
        let (vals, _) = sym_eig(&Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn sym_eig_random_reconstruction_and_orthonormality() {
        let mut rng = RngState(9);
        for d in 2..=12 {
            for _ in 0..1000 {
                let g = random_matrix(&mut rng, d, d);
                let a = symmetrize(&g);
                let (vals, vecs) = sym_eig(&a).unwrap();
                for w in vals.as_slice().windows(2) {
                    assert!(w[0] >= w[1]);
                }
                let norm = a.norm().max(1e-300);
                for i in 0..d {
                    let v = vecs.column(i);
                    assert!((&a * v - v * vals[i]).norm() <= 1e-8 * norm);
                }
                let gram = vecs.transpose() * &vecs;
                assert!((gram - Matrix::identity(d, d)).amax() < 1e-8);
                let rebuilt = &vecs * Matrix::from_diagonal(&vals) * vecs.transpose();
                assert!((rebuilt - &a).amax() < 1e-8 * norm.max(1.0));
            }
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(64);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-13);
        let x10: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((x10 - 2.0 / 11.0).abs() < 1e-13);
        let (x3, w3) = gauss_legendre(3);
        assert!((x3[2] - (0.6f64).sqrt()).abs() < 1e-14);
        assert!((w3[1] - 8.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn shuffle_is_a_deterministic_permutation() {
        let mut a: Vec<usize> = (0..50).collect();
        let mut b = a.clone();
        RngState(1).shuffle(&mut a);
        RngState(1).shuffle(&mut b);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
