//! Overdamped Langevin dynamics of a CG model.

use std::collections::VecDeque;

use crate::cg_model::CGModel;
use crate::numerics::{RngState, Vector};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub friction: f64,
    /// `f64::INFINITY` switches the noise off.
    pub beta: f64,
    pub steps: usize,
    /// Steps between recorded frames.
    pub thinning: usize,
    pub seed: u64,
    pub initial: Vector,
}

impl SimConfig {
    pub fn new(initial: Vector, beta: f64, steps: usize, seed: u64) -> Self {
        SimConfig { dt: 1e-3, friction: 1.0, beta, steps, thinning: 1, seed, initial }
    }
}

const HISTORY: usize = 10;

/// Euler–Maruyama: `R ← R + (dt/γ) F(R) + √(2 dt / (βγ)) ξ`. Frame 0 is the initial state.
pub fn simulate(model: &CGModel, cfg: &SimConfig) -> Result<Vec<Vector>> {
    if !(cfg.dt > 0.0) || !(cfg.friction > 0.0) || !(cfg.beta > 0.0) || cfg.thinning == 0 {
        return Err(Error::InvalidArgument("simulation needs dt, friction, beta > 0 and thinning ≥ 1".into()));
    }
    let drift = cfg.dt / cfg.friction;
    let noise = (2.0 * cfg.dt / (cfg.beta * cfg.friction)).sqrt();
    let mut rng = RngState::new(cfg.seed);
    let mut r = cfg.initial.clone();
    let (_, mut forces, _) = model.evaluate(&r, &[])?;
    let mut recent: VecDeque<Vec<f64>> = VecDeque::with_capacity(HISTORY);
    let mut out = Vec::with_capacity(cfg.steps / cfg.thinning + 1);
    out.push(r.clone());
    for step in 1..=cfg.steps {
        if recent.len() == HISTORY {
            recent.pop_front();
        }
        recent.push_back(r.as_slice().to_vec());
        if noise > 0.0 {
            let xi = rng.normals(r.len());
            for (c, x) in r.iter_mut().enumerate() {
                *x += drift * forces[c] + noise * xi[c];
            }
        } else {
            r += &forces * drift;
        }
        forces = model.evaluate(&r, &[])?.1;
        if r.iter().chain(forces.iter()).any(|x| !x.is_finite()) {
            recent.push_back(r.as_slice().to_vec());
            if recent.len() > HISTORY {
                recent.pop_front();
            }
            return Err(Error::NonFiniteState { step, last_states: recent.into_iter().collect() });
        }
        if step % cfg.thinning == 0 {
            out.push(r.clone());
        }
    }
    Ok(out)
}
