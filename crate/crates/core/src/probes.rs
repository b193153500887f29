//! Deterministic unit probe vectors and the Hutchinson-style Frobenius estimate.

use crate::numerics::{Matrix, RngState, Vector};
use crate::{Error, Result};

/// Golden-ratio multiplier used to decorrelate per-frame probe streams.
pub const FRAME_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

const MAX_RETRIES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub frame_index: usize,
    pub seed: u64,
    pub vectors: Vec<Vector>,
}

/// Seed of the probe stream for one frame.
pub fn stream_seed(global_seed: u64, frame_index: usize) -> u64 {
    global_seed ^ (frame_index as u64).wrapping_mul(FRAME_MIX)
}

/// `k` unit vectors of length `d`, drawn as normalized Gaussians from the frame's stream.
pub fn generate_probes(global_seed: u64, frame_index: usize, k: usize, d: usize) -> Result<ProbeSet> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("probes need K ≥ 1 and d ≥ 1 (got K={k}, d={d})")));
    }
    let seed = stream_seed(global_seed, frame_index);
    let mut rng = RngState::new(seed);
    let draws = rng.normals(k * d);
    let mut vectors = Vec::with_capacity(k);
    for chunk in draws.chunks(d) {
        let mut v = Vector::from_row_slice(chunk);
        let mut norm = v.norm();
        let mut retries = 0;
        while !(norm > 0.0) || !norm.is_finite() {
            retries += 1;
            if retries > MAX_RETRIES {
                return Err(Error::ZeroVector(retries - 1));
            }
            v = rng.normal_vector(d);
            norm = v.norm();
        }
        vectors.push(v / norm);
    }
    Ok(ProbeSet { frame_index, seed, vectors })
}

/// `d · mean_k ‖H v_k‖²`, unbiased for `‖H‖_F²` when the probes are uniform on the sphere.
pub fn frobenius_estimate(h: &Matrix, probes: &[Vector]) -> Result<f64> {
    let d = h.nrows();
    if h.ncols() != d {
        return Err(Error::mismatch(d, h.ncols(), "frobenius_estimate: matrix must be square"));
    }
    if probes.is_empty() {
        return Err(Error::EmptyInput("probe list".into()));
    }
    let mut acc = 0.0;
    for v in probes {
        if v.len() != d {
            return Err(Error::mismatch(d, v.len(), "probe length"));
        }
        acc += (h * v).norm_squared();
    }
    Ok(d as f64 * acc / probes.len() as f64)
}
