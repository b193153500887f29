use std::sync::Arc;

use cghvp_core::aa_system::{ForceField, Term};
use cghvp_core::cg_map::{CGMap, CollectiveVariables, LinearCGMap, NonlinearCGMap};
use cghvp_core::ensemble::{cg_hessian_estimate, sample_conditional, ConditionalOptions};
use cghvp_core::numerics::{sym_eig, Matrix, RngState, Vector};
use cghvp_core::probes::{frobenius_estimate, generate_probes};
use cghvp_core::Result;
use proptest::prelude::*;

/// `(|r_0|, |r_1 − r_0|)` for two particles in 2-d, with its analytic Jacobian.
#[derive(Debug)]
struct TwoDistances;

impl CollectiveVariables for TwoDistances {
    fn input_len(&self) -> usize {
        4
    }

    fn output_len(&self) -> usize {
        2
    }

    fn value(&self, r: &Vector) -> Result<Vector> {
        let a = (r[0] * r[0] + r[1] * r[1]).sqrt();
        let b = ((r[2] - r[0]).powi(2) + (r[3] - r[1]).powi(2)).sqrt();
        Ok(Vector::from_row_slice(&[a, b]))
    }

    fn jacobian(&self, r: &Vector) -> Result<Matrix> {
        let a = (r[0] * r[0] + r[1] * r[1]).sqrt();
        let (dx, dy) = (r[2] - r[0], r[3] - r[1]);
        let b = (dx * dx + dy * dy).sqrt();
        Ok(Matrix::from_row_slice(2, 4, &[r[0] / a, r[1] / a, 0.0, 0.0, -dx / b, -dy / b, dx / b, dy / b]))
    }
}

#[test]
fn nonlinear_estimator_is_symmetric_within_standard_errors() {
    let ff = ForceField::new(
        2,
        2,
        vec![
            Term::HarmonicWell { i: 0, k: 1.0, center: vec![0.3, 0.0] },
            Term::HarmonicBond { i: 0, j: 1, k: 4.0, r0: 1.0 },
            Term::HarmonicWell { i: 1, k: 0.5, center: vec![1.0, 1.0] },
        ],
    )
    .unwrap();
    let map: CGMap = NonlinearCGMap::Custom(Arc::new(TwoDistances)).into();
    let target = Vector::from_row_slice(&[1.0, 1.0]);
    let initial = Vector::from_row_slice(&[1.0, 0.0, 1.0, 1.0]);
    let mut rng = RngState::new(41);
    let ens = sample_conditional(&ff, &map, &target, 1.0, 100_000, &ConditionalOptions::default(), &initial, &mut rng).unwrap();
    let est = cg_hessian_estimate(&ens, &ff, &map).unwrap();
    assert!(est.asymmetry_se > 0.0);
    assert!(est.asymmetry < 5.0 * est.asymmetry_se, "asymmetry {} vs se {}", est.asymmetry, est.asymmetry_se);
    // the nonlinear terms are genuinely active here
    assert!(est.t_mean.amax() > 1e-3);
    assert!(est.divergence_term.amax() > 1e-3);
}

fn fixed_matrix() -> Matrix {
    let mut rng = RngState::new(42);
    Matrix::from_vec(5, 5, rng.normals(25))
}

#[test]
fn frobenius_batch_errors_shrink_as_inverse_square_root() {
    let h = fixed_matrix();
    let exact = h.norm_squared();
    let sizes = [8usize, 32, 128, 512];
    let reps = 200;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut frame = 0usize;
    for &m in &sizes {
        let mut means = Vec::with_capacity(reps);
        for _ in 0..reps {
            let probes = generate_probes(7, frame, m, 5).unwrap();
            frame += 1;
            means.push(frobenius_estimate(&h, &probes.vectors).unwrap());
        }
        let centre = means.iter().sum::<f64>() / reps as f64;
        let sd = (means.iter().map(|x| (x - centre).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        // centred on the exact value within four standard errors
        assert!((centre - exact).abs() < 4.0 * sd / (reps as f64).sqrt(), "m={m}: {centre} vs {exact}");
        xs.push((m as f64).ln());
        ys.push(sd.ln());
    }
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
}

#[test]
fn frobenius_statistics_are_rotation_invariant() {
    let h = fixed_matrix();
    let mut rng = RngState::new(43);
    let (_, q) = sym_eig(&{
        let m = Matrix::from_vec(5, 5, rng.normals(25));
        &m + m.transpose()
    })
    .unwrap();
    let rotated = &q * &h * q.transpose();
    let stats = |m: &Matrix, seed: u64| {
        let probes = generate_probes(seed, 0, 40_000, 5).unwrap();
        let single: Vec<f64> = probes.vectors.iter().map(|v| frobenius_estimate(m, std::slice::from_ref(v)).unwrap()).collect();
        let mean = single.iter().sum::<f64>() / single.len() as f64;
        let var = single.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (single.len() - 1) as f64;
        (mean, var)
    };
    let (m1, v1) = stats(&h, 1);
    let (m2, v2) = stats(&rotated, 2);
    let se = ((v1 + v2) / 40_000.0).sqrt();
    assert!((m1 - m2).abs() < 4.0 * se);
    assert!((v1 / v2 - 1.0).abs() < 0.1, "{v1} vs {v2}");
}

fn chain() -> (ForceField, CGMap) {
    let k = Matrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
    (ForceField::quadratic(1, k).unwrap(), LinearCGMap::selection(3, 1, &[1]).unwrap().into())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn estimator_ignores_frame_order(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        let (ff, map) = chain();
        let mut rng = RngState::new(seed);
        let target = Vector::from_element(1, 0.4);
        let ens = sample_conditional(&ff, &map, &target, 1.0, 200, &ConditionalOptions::default(), &Vector::zeros(3), &mut rng).unwrap();
        let mut shuffled = ens.clone();
        RngState::new(shuffle_seed).shuffle(&mut shuffled.frames);
        let a = cg_hessian_estimate(&ens, &ff, &map).unwrap().hessian;
        let b = cg_hessian_estimate(&shuffled, &ff, &map).unwrap().hessian;
        prop_assert!((a - b).amax() < 1e-12);
    }
}
