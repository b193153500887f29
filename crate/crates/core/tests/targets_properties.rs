use cghvp_core::aa_system::{sample_boltzmann, ForceField, LangevinOptions};
use cghvp_core::cg_map::{CGMap, LinearCGMap};
use cghvp_core::numerics::{relative_error_vec, Matrix, RngState, Vector};
use cghvp_core::probes::generate_probes;
use cghvp_core::targets::{assemble_target, precompute_term1, ForceResidual, HvpTargetRecord, TargetStore};
use proptest::prelude::*;

fn system() -> (ForceField, LinearCGMap) {
    let k = Matrix::from_row_slice(4, 4, &[3.0, -1.0, 0.0, 0.2, -1.0, 2.5, -0.7, 0.0, 0.0, -0.7, 2.0, -0.5, 0.2, 0.0, -0.5, 1.5]);
    let ff = ForceField::quadratic(1, k).unwrap();
    let map = LinearCGMap::weighted_groups(4, 1, &[vec![(0, 0.5), (1, 0.5)], vec![(2, 0.3), (3, 0.7)]]).unwrap();
    (ff, map)
}

fn store() -> TargetStore {
    let (ff, map) = system();
    let mut rng = RngState::new(51);
    let frames = sample_boltzmann(&ff, 1.0, 20, &LangevinOptions::default(), &Vector::zeros(4), &mut rng).unwrap();
    precompute_term1(&frames, &ff, &CGMap::from(map), 99, 8, 1e-4, 1.0).unwrap()
}

#[test]
fn quadratic_term1_is_exact() {
    let (ff, map) = system();
    let exact = map.xi_f() * ff.as_quadratic().unwrap() * map.xi_f().transpose();
    for rec in &store().records {
        for (v, t) in rec.probes.iter().zip(&rec.term1) {
            assert!(relative_error_vec(t, &(&exact * v), 1e-12) < 1e-8);
        }
    }
}

#[test]
fn store_round_trips_bitwise_and_keeps_generated_probes() {
    let s = store();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("targets.txt");
    s.write(&path).unwrap();
    assert_eq!(TargetStore::read(&path).unwrap(), s);
    for rec in &s.records {
        assert_eq!(rec.probes, generate_probes(s.seed, rec.frame_index, s.k, s.d).unwrap().vectors);
    }
}

fn record(probe: Vector, term1: Vector) -> HvpTargetRecord {
    HvpTargetRecord { frame_index: 0, seed: 0, epsilon: 1e-5, unit_scale: 1.0, probes: vec![probe], term1: vec![term1] }
}

proptest! {
    #[test]
    fn assembled_target_is_linear_in_probe(
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        beta in 0.1f64..3.0,
    ) {
        let mut rng = RngState::new(seed);
        let h = Matrix::from_vec(3, 3, rng.normals(9));
        let residual = ForceResidual { delta_j: rng.normal_vector(3) };
        let (u, v) = (rng.normal_vector(3), rng.normal_vector(3));
        let w = &u * a + &v * b;
        let target = |p: &Vector| assemble_target(&record(p.clone(), &h * p), 0, Some(&residual), beta, true).unwrap();
        let lhs = target(&w);
        let rhs = target(&u) * a + target(&v) * b;
        prop_assert!((lhs - &rhs).amax() <= 1e-12 * rhs.amax().max(1.0));
    }
}
