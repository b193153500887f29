use cghvp_core::cg_model::{model_energy, model_forces, model_hvp, CGModel, Cotangents, FeatureConfig, PairMlp};
use cghvp_core::numerics::{fd_directional, fd_gradient, relative_error, relative_error_vec, RngState, Vector};

const BEADS: usize = 4;
const DIM: usize = 3;

fn draw(rng: &mut RngState) -> (CGModel, Vector) {
    let seed = rng.next_u64();
    let model = CGModel::Mlp(PairMlp::new(BEADS, DIM, &[16, 16], FeatureConfig::default(), seed).unwrap());
    let mut r = rng.normal_vector(BEADS * DIM) * 0.15;
    for b in 0..BEADS {
        r[b * DIM] += 0.7 * b as f64;
        r[b * DIM + 1] += 0.3 * (b % 2) as f64;
    }
    (model, r)
}

#[test]
fn forces_are_negative_energy_gradient() {
    let mut rng = RngState::new(61);
    for _ in 0..50 {
        let (m, r) = draw(&mut rng);
        let f = model_forces(&m, &r).unwrap();
        let g = fd_gradient(|x| model_energy(&m, x).unwrap(), &r, 1e-5);
        assert!(relative_error_vec(&f, &(-g), 1e-8) <= 1e-6);
    }
}

#[test]
fn hvp_matches_force_differences_and_is_symmetric() {
    let mut rng = RngState::new(62);
    for _ in 0..50 {
        let (m, r) = draw(&mut rng);
        let (u, v) = (rng.normal_vector(r.len()), rng.normal_vector(r.len()));
        let hv = model_hvp(&m, &r, &v).unwrap();
        let fd = fd_directional(|x| model_forces(&m, x).map(|f| -f), &r, &v, 1e-5).unwrap();
        assert!(relative_error_vec(&hv, &fd, 1e-8) <= 1e-5);
        let hu = model_hvp(&m, &r, &u).unwrap();
        assert!((u.dot(&hv) - v.dot(&hu)).abs() <= 1e-10 * hv.norm().max(1.0) * u.norm());
        let sum = model_hvp(&m, &r, &(&u + &v)).unwrap();
        assert!((sum - (&hu + &hv)).amax() <= 1e-12 * hv.amax().max(hu.amax()).max(1.0));
    }
}

#[test]
fn parameter_gradients_match_loss_differences() {
    let mut rng = RngState::new(63);
    for _ in 0..50 {
        let (m, r) = draw(&mut rng);
        let n = r.len();
        let probe = rng.normal_vector(n);
        let cot = Cotangents {
            energy: rng.normals(1)[0],
            forces: Some(rng.normal_vector(n)),
            hvp: vec![(probe.clone(), rng.normal_vector(n))],
        };
        // L(θ) = c_E E + c_F·F + c_H·Hv, linear in the outputs
        let loss = |model: &CGModel| {
            let (e, f, hv) = model.evaluate(&r, std::slice::from_ref(&probe)).unwrap();
            cot.energy * e + cot.forces.as_ref().unwrap().dot(&f) + cot.hvp[0].1.dot(&hv[0])
        };
        let grad = m.param_grad(&r, &cot).unwrap();
        let theta = Vector::from_vec(m.params());
        let fd = fd_gradient(
            |t| {
                let mut moved = m.clone();
                moved.set_params(t.as_slice()).unwrap();
                loss(&moved)
            },
            &theta,
            1e-5,
        );
        assert!(relative_error_vec(&grad, &fd, 1e-8) <= 1e-5, "{}", relative_error_vec(&grad, &fd, 1e-8));
    }
}

#[test]
fn energy_is_translation_invariant_and_forces_sum_to_zero() {
    let mut rng = RngState::new(64);
    for _ in 0..50 {
        let (m, r) = draw(&mut rng);
        let shift = rng.normal_vector(DIM);
        let mut moved = r.clone();
        for b in 0..BEADS {
            for c in 0..DIM {
                moved[b * DIM + c] += shift[c];
            }
        }
        let (e0, e1) = (model_energy(&m, &r).unwrap(), model_energy(&m, &moved).unwrap());
        assert!(relative_error(e1, e0, 1.0) < 1e-12);
        let f = model_forces(&m, &r).unwrap();
        for c in 0..DIM {
            let total: f64 = (0..BEADS).map(|b| f[b * DIM + c]).sum();
            assert!(total.abs() < 1e-12 * f.amax().max(1.0));
        }
    }
}
