//! Coarse-graining maps and their force projections.
//!
//! A linear map is a constant matrix `Ξ_r`. Nonlinear maps provide `ξ(r)` and its Jacobian `J`;
//! the force projection is `Ξ_F = (J Jᵀ)⁻¹ J` in both cases. Nonlinear maps additionally carry
//! the divergence `∇_r·Ξ_F` and the `𝒯` contraction that enter the mean force and CG Hessian.

use std::fmt::Debug;
use std::sync::Arc;

use crate::numerics::{fd_jacobian, Matrix, SpdFactor, Vector};
use crate::{Error, Result};

/// Finite-difference step for derivatives of `Ξ_F`.
pub const FD_STEP: f64 = 1e-5;

const MIN_DISTANCE: f64 = 1e-8;

/// `(J Jᵀ)⁻¹ J`.
pub fn projection_from_jacobian(jac: &Matrix) -> Result<Matrix> {
    let gram = jac * jac.transpose();
    Ok(SpdFactor::new(&gram)?.solve_matrix(jac))
}

/// Constant linear map `R = Ξ_r r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCGMap {
    dim: usize,
    xi_r: Matrix,
    xi_f: Matrix,
}

impl LinearCGMap {
    /// Fails with `NotPositiveDefinite` when `Ξ_r` lacks full row rank.
    pub fn new(dim: usize, xi_r: Matrix) -> Result<Self> {
        if dim == 0 || xi_r.nrows() % dim != 0 || xi_r.ncols() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "map of shape {}x{} is not compatible with dim={dim}",
                xi_r.nrows(),
                xi_r.ncols()
            )));
        }
        let xi_f = projection_from_jacobian(&xi_r)?;
        Ok(LinearCGMap { dim, xi_r, xi_f })
    }

    /// One bead per selected atom (a Cα-style map).
    pub fn selection(n: usize, dim: usize, atoms: &[usize]) -> Result<Self> {
        let groups: Vec<Vec<(usize, f64)>> = atoms.iter().map(|&a| vec![(a, 1.0)]).collect();
        LinearCGMap::weighted_groups(n, dim, &groups)
    }

    /// One bead per group at the weighted average of the group's atoms (weights normalized).
    pub fn weighted_groups(n: usize, dim: usize, groups: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut xi = Matrix::zeros(groups.len() * dim, n * dim);
        for (bead, group) in groups.iter().enumerate() {
            let total: f64 = group.iter().map(|(_, w)| w).sum();
            if group.is_empty() || total == 0.0 {
                return Err(Error::InvalidArgument(format!("bead {bead} has no weight")));
            }
            for &(atom, w) in group {
                if atom >= n {
                    return Err(Error::InvalidArgument(format!("atom {atom} out of range for n={n}")));
                }
                for a in 0..dim {
                    xi[(bead * dim + a, atom * dim + a)] += w / total;
                }
            }
        }
        LinearCGMap::new(dim, xi)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn xi_r(&self) -> &Matrix {
        &self.xi_r
    }

    pub fn xi_f(&self) -> &Matrix {
        &self.xi_f
    }

    pub fn cg_len(&self) -> usize {
        self.xi_r.nrows()
    }

    pub fn aa_len(&self) -> usize {
        self.xi_r.ncols()
    }

    pub fn beads(&self) -> usize {
        self.cg_len() / self.dim
    }
}

/// User-supplied collective variables; the Jacobian defaults to central differences.
pub trait CollectiveVariables: Debug + Send + Sync {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn value(&self, r: &Vector) -> Result<Vector>;

    fn jacobian(&self, r: &Vector) -> Result<Matrix> {
        fd_jacobian(|x| self.value(x), r, FD_STEP)
    }

    /// Particles that stay fixed while sampling conditional ensembles.
    fn frozen_particles(&self) -> Vec<usize> {
        Vec::new()
    }
}

impl CollectiveVariables for LinearCGMap {
    fn input_len(&self) -> usize {
        self.aa_len()
    }

    fn output_len(&self) -> usize {
        self.cg_len()
    }

    fn value(&self, r: &Vector) -> Result<Vector> {
        Ok(&self.xi_r * r)
    }

    fn jacobian(&self, _r: &Vector) -> Result<Matrix> {
        Ok(self.xi_r.clone())
    }
}

#[derive(Clone, Debug)]
pub enum NonlinearCGMap {
    /// `ξ = |r_i − r_j|`.
    BondLength { i: usize, j: usize, n: usize, dim: usize },
    /// `ξ = |r_p|`; every other particle is pinned.
    RadialFromPinned { particle: usize, n: usize, dim: usize },
    /// Arbitrary collective variables supplied at runtime.
    Custom(Arc<dyn CollectiveVariables>),
}

#[derive(Clone, Debug)]
pub enum CGMap {
    Linear(LinearCGMap),
    Nonlinear(NonlinearCGMap),
}

impl From<LinearCGMap> for CGMap {
    fn from(m: LinearCGMap) -> Self {
        CGMap::Linear(m)
    }
}

impl From<NonlinearCGMap> for CGMap {
    fn from(m: NonlinearCGMap) -> Self {
        CGMap::Nonlinear(m)
    }
}

fn block(r: &Vector, p: usize, dim: usize) -> &[f64] {
    &r.as_slice()[p * dim..(p + 1) * dim]
}

impl NonlinearCGMap {
    fn aa_len(&self) -> usize {
        match self {
            NonlinearCGMap::BondLength { n, dim, .. } | NonlinearCGMap::RadialFromPinned { n, dim, .. } => n * dim,
            NonlinearCGMap::Custom(cv) => cv.input_len(),
        }
    }

    fn cg_len(&self) -> usize {
        match self {
            NonlinearCGMap::Custom(cv) => cv.output_len(),
            _ => 1,
        }
    }

    /// Separation vector and distance defining the scalar kinds.
    fn radial_vector(&self, r: &Vector) -> Result<(Vec<f64>, f64)> {
        let x: Vec<f64> = match self {
            NonlinearCGMap::BondLength { i, j, dim, .. } => {
                block(r, *i, *dim).iter().zip(block(r, *j, *dim)).map(|(a, b)| a - b).collect()
            }
            NonlinearCGMap::RadialFromPinned { particle, dim, .. } => block(r, *particle, *dim).to_vec(),
            NonlinearCGMap::Custom(_) => unreachable!("custom maps have no radial vector"),
        };
        let d = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if d < MIN_DISTANCE {
            return Err(Error::SingularGeometry(format!("map distance {d:e} below {MIN_DISTANCE:e}")));
        }
        Ok((x, d))
    }

    fn value(&self, r: &Vector) -> Result<Vector> {
        match self {
            NonlinearCGMap::Custom(cv) => cv.value(r),
            _ => Ok(Vector::from_element(1, self.radial_vector(r)?.1)),
        }
    }

    fn jacobian(&self, r: &Vector) -> Result<Matrix> {
        let mut jac = Matrix::zeros(self.cg_len(), self.aa_len());
        match self {
            NonlinearCGMap::BondLength { i, j, dim, .. } => {
                let (x, d) = self.radial_vector(r)?;
                for a in 0..*dim {
                    jac[(0, i * dim + a)] = x[a] / d;
                    jac[(0, j * dim + a)] = -x[a] / d;
                }
            }
            NonlinearCGMap::RadialFromPinned { particle, dim, .. } => {
                let (x, d) = self.radial_vector(r)?;
                for a in 0..*dim {
                    jac[(0, particle * dim + a)] = x[a] / d;
                }
            }
            NonlinearCGMap::Custom(cv) => jac = cv.jacobian(r)?,
        }
        Ok(jac)
    }

    fn analytic_divergence(&self, r: &Vector) -> Result<Option<(Vector, Matrix)>> {
        let (dim, blocks): (usize, Vec<(usize, f64)>) = match self {
            NonlinearCGMap::BondLength { i, j, dim, .. } => (*dim, vec![(*i, 1.0), (*j, -1.0)]),
            NonlinearCGMap::RadialFromPinned { particle, dim, .. } => (*dim, vec![(*particle, 1.0)]),
            NonlinearCGMap::Custom(_) => return Ok(None),
        };
        let (x, d) = self.radial_vector(r)?;
        let m = dim as f64 - 1.0;
        // Ξ_F = J / |J|² where |J|² counts the blocks, and each block contributes (dim − 1) / (|J|² d).
        let div = m / d;
        let mut grad = Matrix::zeros(1, self.aa_len());
        for (p, sign) in blocks {
            for a in 0..dim {
                grad[(0, p * dim + a)] = -sign * m * x[a] / (d * d * d);
            }
        }
        Ok(Some((Vector::from_element(1, div), grad)))
    }

    fn frozen_particles(&self) -> Vec<usize> {
        match self {
            NonlinearCGMap::RadialFromPinned { particle, n, .. } => (0..*n).filter(|p| p != particle).collect(),
            NonlinearCGMap::Custom(cv) => cv.frozen_particles(),
            NonlinearCGMap::BondLength { .. } => Vec::new(),
        }
    }
}

impl CGMap {
    pub fn is_linear(&self) -> bool {
        matches!(self, CGMap::Linear(_))
    }

    pub fn as_linear(&self) -> Option<&LinearCGMap> {
        match self {
            CGMap::Linear(m) => Some(m),
            CGMap::Nonlinear(_) => None,
        }
    }

    pub fn cg_len(&self) -> usize {
        match self {
            CGMap::Linear(m) => m.cg_len(),
            CGMap::Nonlinear(m) => m.cg_len(),
        }
    }

    pub fn aa_len(&self) -> usize {
        match self {
            CGMap::Linear(m) => m.aa_len(),
            CGMap::Nonlinear(m) => m.aa_len(),
        }
    }

    pub fn frozen_particles(&self) -> Vec<usize> {
        match self {
            CGMap::Linear(_) => Vec::new(),
            CGMap::Nonlinear(m) => m.frozen_particles(),
        }
    }

    fn check(&self, r: &Vector) -> Result<()> {
        if r.len() != self.aa_len() {
            return Err(Error::mismatch(self.aa_len(), r.len(), "configuration length for map"));
        }
        Ok(())
    }

    /// `R = Ξ_r r` or `ξ(r)`.
    pub fn project_positions(&self, r: &Vector) -> Result<Vector> {
        self.check(r)?;
        match self {
            CGMap::Linear(m) => Ok(m.xi_r() * r),
            CGMap::Nonlinear(m) => m.value(r),
        }
    }

    /// Jacobian `J_ξ` (equal to `Ξ_r` for linear maps).
    pub fn jacobian(&self, r: &Vector) -> Result<Matrix> {
        self.check(r)?;
        match self {
            CGMap::Linear(m) => Ok(m.xi_r().clone()),
            CGMap::Nonlinear(m) => m.jacobian(r),
        }
    }

    /// Force projection `Ξ_F`. Linear maps ignore `r`; nonlinear maps require it.
    pub fn force_projection(&self, r: Option<&Vector>) -> Result<Matrix> {
        match (self, r) {
            (CGMap::Linear(m), _) => Ok(m.xi_f().clone()),
            (CGMap::Nonlinear(_), None) => {
                Err(Error::InvalidArgument("nonlinear force projection needs a configuration".into()))
            }
            (CGMap::Nonlinear(m), Some(r)) => {
                self.check(r)?;
                projection_from_jacobian(&m.jacobian(r)?)
            }
        }
    }

    /// `∇_r·Ξ_F`, the divergence over the fine-grained column index.
    pub fn xi_divergence(&self, r: &Vector) -> Result<Vector> {
        self.check(r)?;
        match self {
            CGMap::Linear(m) => Ok(Vector::zeros(m.cg_len())),
            CGMap::Nonlinear(m) => match m.analytic_divergence(r)? {
                Some((div, _)) => Ok(div),
                None => self.xi_divergence_fd(r),
            },
        }
    }

    /// Central-difference divergence of the columns of `Ξ_F` with step [`FD_STEP`].
    pub fn xi_divergence_fd(&self, r: &Vector) -> Result<Vector> {
        self.check(r)?;
        let mut div = Vector::zeros(self.cg_len());
        let mut probe = r.clone();
        for j in 0..r.len() {
            let rj = r[j];
            probe[j] = rj + FD_STEP;
            let up = self.force_projection(Some(&probe))?;
            probe[j] = rj - FD_STEP;
            let down = self.force_projection(Some(&probe))?;
            probe[j] = rj;
            div += (up.column(j) - down.column(j)) / (2.0 * FD_STEP);
        }
        Ok(div)
    }

    /// Gradient of the divergence; row `I` is `∇_r (∇_r·Ξ_F)_I`.
    pub fn divergence_gradient(&self, r: &Vector) -> Result<Matrix> {
        self.check(r)?;
        match self {
            CGMap::Linear(m) => Ok(Matrix::zeros(m.cg_len(), m.aa_len())),
            CGMap::Nonlinear(m) => match m.analytic_divergence(r)? {
                Some((_, grad)) => Ok(grad),
                None => fd_jacobian(|x| self.xi_divergence_fd(x), r, FD_STEP),
            },
        }
    }

    /// `𝒯_IJ = Σ_ij F^i (Ξ_F)_Ij ∂(Ξ_F)_Ji / ∂r_j`, with `∂Ξ_F/∂r` by central differences.
    pub fn xi_t_matrix(&self, r: &Vector, f_aa: &Vector) -> Result<Matrix> {
        self.check(r)?;
        if f_aa.len() != r.len() {
            return Err(Error::mismatch(r.len(), f_aa.len(), "force length for 𝒯"));
        }
        let cg = self.cg_len();
        if self.is_linear() {
            return Ok(Matrix::zeros(cg, cg));
        }
        let xi = self.force_projection(Some(r))?;
        let mut t = Matrix::zeros(cg, cg);
        let mut probe = r.clone();
        for j in 0..r.len() {
            let rj = r[j];
            probe[j] = rj + FD_STEP;
            let up = self.force_projection(Some(&probe))?;
            probe[j] = rj - FD_STEP;
            let down = self.force_projection(Some(&probe))?;
            probe[j] = rj;
            // (∂Ξ_F/∂r_j) F, indexed by J
            let dxi_f = (up - down) * f_aa / (2.0 * FD_STEP);
            for i in 0..cg {
                for jj in 0..cg {
                    t[(i, jj)] += xi[(i, j)] * dxi_f[jj];
                }
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn v(values: &[f64]) -> Vector {
        Vector::from_row_slice(values)
    }

    #[test]
    fn linear_projections_hand_cases() {
        let sel = CGMap::from(LinearCGMap::selection(4, 1, &[1]).unwrap());
        assert_eq!(sel.project_positions(&v(&[1.0, 2.0, 3.0, 4.0])).unwrap().as_slice(), &[2.0]);
        let com = CGMap::from(LinearCGMap::new(1, Matrix::from_row_slice(1, 2, &[0.5, 0.5])).unwrap());
        assert_eq!(com.project_positions(&v(&[0.0, 2.0])).unwrap().as_slice(), &[1.0]);
        let xi = com.force_projection(None).unwrap();
        assert!((xi - Matrix::from_row_slice(1, 2, &[1.0, 1.0])).amax() < 1e-15);
    }

    #[test]
    fn selection_force_projection_equals_map() {
        let m = LinearCGMap::selection(5, 3, &[0, 2, 4]).unwrap();
        assert_eq!(m.xi_f(), m.xi_r());
    }

    #[test]
    fn rank_deficient_map_is_rejected() {
        let xi = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(LinearCGMap::new(1, xi), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn bond_length_value_and_singularity() {
        let m = CGMap::from(NonlinearCGMap::BondLength { i: 0, j: 1, n: 2, dim: 2 });
        assert_eq!(m.project_positions(&v(&[3.0, 4.0, 0.0, 0.0])).unwrap().as_slice(), &[5.0]);
        assert!(matches!(m.project_positions(&v(&[1.0, 1.0, 1.0, 1.0])), Err(Error::SingularGeometry(_))));
    }

    #[test]
    fn radial_force_projection_is_unit_vector() {
        let m = CGMap::from(NonlinearCGMap::RadialFromPinned { particle: 0, n: 1, dim: 2 });
        let xi = m.force_projection(Some(&v(&[3.0, 4.0]))).unwrap();
        assert!((xi[(0, 0)] - 0.6).abs() < 1e-15 && (xi[(0, 1)] - 0.8).abs() < 1e-15);
        assert!(m.force_projection(None).is_err());
    }

    #[test]
    fn divergence_closed_forms() {
        let radial = CGMap::from(NonlinearCGMap::RadialFromPinned { particle: 0, n: 1, dim: 2 });
        let r = v(&[2.0 * 0.6, 2.0 * 0.8]);
        assert!((radial.xi_divergence(&r).unwrap()[0] - 0.5).abs() < 1e-15);
        // (JJᵀ)⁻¹ = ½, each of the two blocks contributes (dim − 1) / (2d).
        let bond = CGMap::from(NonlinearCGMap::BondLength { i: 0, j: 1, n: 2, dim: 2 });
        let r = v(&[2.0, 0.0, 0.0, 0.0]);
        assert!((bond.xi_divergence(&r).unwrap()[0] - 0.5).abs() < 1e-15);
        let bond3 = CGMap::from(NonlinearCGMap::BondLength { i: 1, j: 0, n: 2, dim: 3 });
        let r = v(&[0.1, 0.2, 0.3, 1.1, -0.4, 0.9]);
        let d = ((1.0f64).powi(2) + 0.6f64.powi(2) + 0.6f64.powi(2)).sqrt();
        assert!((bond3.xi_divergence(&r).unwrap()[0] - 2.0 / d).abs() < 1e-14);
    }

    #[test]
    fn analytic_divergence_matches_fd_route() {
        let mut rng = RngState(3);
        let maps = [
            CGMap::from(NonlinearCGMap::RadialFromPinned { particle: 1, n: 2, dim: 3 }),
            CGMap::from(NonlinearCGMap::BondLength { i: 0, j: 1, n: 2, dim: 3 }),
            CGMap::from(NonlinearCGMap::BondLength { i: 0, j: 1, n: 2, dim: 2 }),
        ];
        for map in &maps {
            for _ in 0..20 {
                let r = rng.normal_vector(map.aa_len()) + Vector::from_element(map.aa_len(), 0.3);
                let exact = map.xi_divergence(&r).unwrap();
                let fd = map.xi_divergence_fd(&r).unwrap();
                assert!((exact[0] - fd[0]).abs() / exact[0].abs() < 1e-5, "{exact} vs {fd}");
                let grad = map.divergence_gradient(&r).unwrap();
                let fd_grad = fd_jacobian(|x| map.xi_divergence(x), &r, 1e-6).unwrap();
                assert!((&grad - &fd_grad).amax() / grad.amax() < 1e-6);
            }
        }
    }

    #[test]
    fn projection_inverts_jacobian() {
        let mut rng = RngState(10);
        let maps = [
            CGMap::from(NonlinearCGMap::RadialFromPinned { particle: 0, n: 2, dim: 2 }),
            CGMap::from(NonlinearCGMap::BondLength { i: 0, j: 1, n: 3, dim: 3 }),
            CGMap::from(LinearCGMap::weighted_groups(4, 2, &[vec![(0, 1.0), (1, 3.0)], vec![(2, 1.0), (3, 1.0)]]).unwrap()),
        ];
        for map in &maps {
            for _ in 0..100 {
                let r = rng.normal_vector(map.aa_len());
                let xi = map.force_projection(Some(&r)).unwrap();
                let jac = map.jacobian(&r).unwrap();
                let eye = Matrix::identity(map.cg_len(), map.cg_len());
                assert!((xi * jac.transpose() - eye).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn linear_maps_have_no_nonlinear_terms() {
        let lin = LinearCGMap::weighted_groups(3, 1, &[vec![(0, 1.0), (1, 1.0)], vec![(2, 1.0)]]).unwrap();
        let map = CGMap::from(lin.clone());
        let r = v(&[0.3, 0.7, -1.2]);
        let f = v(&[1.0, -2.0, 0.5]);
        assert_eq!(map.xi_divergence(&r).unwrap(), Vector::zeros(2));
        assert_eq!(map.xi_t_matrix(&r, &f).unwrap(), Matrix::zeros(2, 2));

        // Nonlinear machinery running on the same linear map.
        let generic = CGMap::from(NonlinearCGMap::Custom(Arc::new(lin.clone())));
        assert_eq!(generic.force_projection(Some(&r)).unwrap(), map.force_projection(None).unwrap());
        assert_eq!(generic.xi_divergence(&r).unwrap(), Vector::zeros(2));
        assert_eq!(generic.xi_t_matrix(&r, &f).unwrap(), Matrix::zeros(2, 2));
        assert_eq!(generic.divergence_gradient(&r).unwrap(), Matrix::zeros(2, 3));
    }

    /// `ξ = |r|² / 2` for one particle in 2-d, with analytic Jacobian.
    #[derive(Debug)]
    struct HalfSquaredRadius;

    impl CollectiveVariables for HalfSquaredRadius {
        fn input_len(&self) -> usize {
            2
        }
        fn output_len(&self) -> usize {
            1
        }
        fn value(&self, r: &Vector) -> Result<Vector> {
            Ok(Vector::from_element(1, 0.5 * r.norm_squared()))
        }
        fn jacobian(&self, r: &Vector) -> Result<Matrix> {
            Ok(Matrix::from_row_slice(1, 2, r.as_slice()))
        }
    }

    #[test]
    fn t_matrix_symbolic_oracles() {
        // Radial map: Ξ_F·∇ leaves r/|r| unchanged, so 𝒯 vanishes for any force.
        let radial = CGMap::from(NonlinearCGMap::RadialFromPinned { particle: 0, n: 1, dim: 2 });
        let r = v(&[1.2, -0.4]);
        let t = radial.xi_t_matrix(&r, &(&r * 3.0)).unwrap();
        assert!(t[(0, 0)].abs() < 1e-9);

        // ξ = |r|²/2: Ξ_F = r/|r|², and 𝒯 = −F·r / |r|⁴.
        let custom = CGMap::from(NonlinearCGMap::Custom(Arc::new(HalfSquaredRadius)));
        let f = v(&[0.7, 1.9]);
        let t = custom.xi_t_matrix(&r, &f).unwrap()[(0, 0)];
        let exact = -f.dot(&r) / r.norm_squared().powi(2);
        assert!((t - exact).abs() / exact.abs() < 1e-8, "{t} vs {exact}");
        let t3 = custom.xi_t_matrix(&r, &(&f * 3.0)).unwrap()[(0, 0)];
        assert!((t3 - 3.0 * t).abs() < 1e-9 * t.abs());
        // Divergence of r/|r|² in 2-d is zero.
        assert!(custom.xi_divergence(&r).unwrap()[0].abs() < 1e-8);
    }
}
