//! HVP training targets.
//!
//! The target for probe `v` on frame `t` is `Ξ_F H_AA Ξ_Fᵀ v − β (δJᵀ v) δJ`. The first term is
//! precomputed once per frame and stored with its probes; the second uses the force residual
//! `δJ = Ξ_F F_AA − F_NN` of the current model and is assembled during training.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::aa_system::{aa_hvp_fd, AtomisticFrame, ForceField};
use crate::cg_map::CGMap;
use crate::numerics::Vector;
use crate::probes::generate_probes;
use crate::store::{format_real, format_reals, header_field, parse_frame_line, parse_header, parse_reals, write_atomic, Lines};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HvpTargetRecord {
    pub frame_index: usize,
    /// Stream seed the probes were drawn from.
    pub seed: u64,
    pub epsilon: f64,
    pub unit_scale: f64,
    pub probes: Vec<Vector>,
    pub term1: Vec<Vector>,
}

impl HvpTargetRecord {
    pub fn k(&self) -> usize {
        self.probes.len()
    }
}

/// `δJ = Ξ_F F_AA − F_NN`, a constant as far as training is concerned.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceResidual {
    pub delta_j: Vector,
}

/// All precomputed records of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetStore {
    pub d: usize,
    pub k: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub unit_scale: f64,
    pub records: Vec<HvpTargetRecord>,
}

/// Term 1 for every frame: `Ξ_F · hvp_fd(Ξ_Fᵀ v) · unit_scale`, with fresh probes per frame.
pub fn precompute_term1(
    frames: &[AtomisticFrame],
    ff: &ForceField,
    map: &CGMap,
    global_seed: u64,
    k: usize,
    epsilon: f64,
    unit_scale: f64,
) -> Result<TargetStore> {
    let lin = map
        .as_linear()
        .ok_or_else(|| Error::Unsupported("Term 1 targets are precomputed for linear maps only".into()))?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let xi = lin.xi_f();
    let d = lin.cg_len();
    let records = frames
        .par_iter()
        .map(|frame| {
            let probes = generate_probes(global_seed, frame.frame_index, k, d)?;
            let term1 = probes
                .vectors
                .iter()
                .map(|v| Ok(xi * aa_hvp_fd(frame, ff, &(xi.transpose() * v), epsilon)? * unit_scale))
                .collect::<Result<Vec<_>>>()?;
            log::trace!("term 1 for frame {}", frame.frame_index);
            Ok(HvpTargetRecord {
                frame_index: frame.frame_index,
                seed: probes.seed,
                epsilon,
                unit_scale,
                probes: probes.vectors,
                term1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetStore { d, k, epsilon, seed: global_seed, unit_scale, records })
}

/// `β (δJᵀ v) δJ`.
pub fn term2_correction(residual: &ForceResidual, probe: &Vector, beta: f64) -> Result<Vector> {
    if residual.delta_j.len() != probe.len() {
        return Err(Error::mismatch(probe.len(), residual.delta_j.len(), "residual vs probe"));
    }
    Ok(&residual.delta_j * (beta * residual.delta_j.dot(probe)))
}

/// Target for probe `k`: Term 1, minus Term 2 when the covariance correction is on.
pub fn assemble_target(
    record: &HvpTargetRecord,
    k: usize,
    residual: Option<&ForceResidual>,
    beta: f64,
    use_covariance: bool,
) -> Result<Vector> {
    if k >= record.k() {
        return Err(Error::InvalidArgument(format!("probe {k} out of range for K={}", record.k())));
    }
    let term1 = &record.term1[k];
    if !use_covariance {
        return Ok(term1.clone());
    }
    let residual = residual.ok_or(Error::MissingResidual)?;
    Ok(term1 - term2_correction(residual, &record.probes[k], beta)?)
}

impl TargetStore {
    pub fn render(&self) -> String {
        let mut out = format!(
            "HVPTARGETS v1 d={} K={} eps={} seed={} scale={}\n",
            self.d,
            self.k,
            format_real(self.epsilon),
            self.seed,
            format_real(self.unit_scale)
        );
        for rec in &self.records {
            out.push_str(&format!("frame={}\n", rec.frame_index));
            for v in rec.probes.iter().chain(&rec.term1) {
                out.push_str(&format_reals(v.iter()));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let (_, header) = lines.next_line()?;
        let fields = parse_header(header, "HVPTARGETS")?;
        let d: usize = header_field(&fields, "d")?;
        let k: usize = header_field(&fields, "K")?;
        let epsilon: f64 = header_field(&fields, "eps")?;
        let seed: u64 = header_field(&fields, "seed")?;
        let unit_scale: f64 = header_field(&fields, "scale")?;
        let mut records = Vec::new();
        while let Some((no, line)) = lines.peek_nonblank() {
            let frame_index = parse_frame_line(line, no)?;
            let mut read_block = || -> Result<Vec<Vector>> {
                (0..k)
                    .map(|_| {
                        let (no, l) = lines.next_line()?;
                        Ok(Vector::from_vec(parse_reals(l, no, d)?))
                    })
                    .collect()
            };
            let probes = read_block()?;
            let term1 = read_block()?;
            records.push(HvpTargetRecord {
                frame_index,
                seed: crate::probes::stream_seed(seed, frame_index),
                epsilon,
                unit_scale,
                probes,
                term1,
            });
        }
        Ok(TargetStore { d, k, epsilon, seed, unit_scale, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.render())
    }

    pub fn read(path: &Path) -> Result<Self> {
        TargetStore::parse(&fs::read_to_string(path)?)
    }

    /// Record for `frame_index`, if present.
    pub fn record(&self, frame_index: usize) -> Option<&HvpTargetRecord> {
        self.records
            .binary_search_by_key(&frame_index, |r| r.frame_index)
            .ok()
            .map(|i| &self.records[i])
            .or_else(|| self.records.iter().find(|r| r.frame_index == frame_index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aa_system::{aa_hessian, Term};
    use crate::cg_map::{LinearCGMap, NonlinearCGMap};
    use crate::ensemble::{cg_mean_force, sample_conditional, ConditionalOptions};
    use crate::numerics::{Matrix, RngState};

    fn chain() -> (ForceField, CGMap) {
        let k = Matrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        (ForceField::quadratic(1, k).unwrap(), LinearCGMap::selection(2, 1, &[0]).unwrap().into())
    }

    fn frames(count: usize, len: usize, seed: u64) -> Vec<AtomisticFrame> {
        let mut rng = RngState(seed);
        (0..count).map(|t| AtomisticFrame::new(t, rng.normal_vector(len))).collect()
    }

    #[test]
    fn chain_term1_is_two() {
        let (ff, map) = chain();
        let store = precompute_term1(&frames(3, 2, 1), &ff, &map, 7, 4, 1e-5, 1.0).unwrap();
        for rec in &store.records {
            for (v, t) in rec.probes.iter().zip(&rec.term1) {
                assert_eq!(v[0].abs(), 1.0);
                assert!((t[0] - 2.0 * v[0]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn term1_matches_analytic_hessian() {
        let ff = ForceField::new(
            2,
            3,
            vec![Term::LennardJones { i: 0, j: 1, epsilon: 1.0, sigma: 1.0 }],
        )
        .unwrap();
        let map: CGMap = LinearCGMap::selection(2, 3, &[0, 1]).unwrap().into();
        let frame = AtomisticFrame::new(0, Vector::from_row_slice(&[0.0, 0.0, 0.0, 1.1, 0.2, -0.1]));
        let store = precompute_term1(std::slice::from_ref(&frame), &ff, &map, 3, 8, 1e-5, 1.0).unwrap();
        let h = aa_hessian(&frame, &ff).unwrap();
        for (v, t) in store.records[0].probes.iter().zip(&store.records[0].term1) {
            let exact = &h * v;
            assert!((t - &exact).norm() / exact.norm() < 1e-5);
        }
    }

    #[test]
    fn unit_scale_multiplies_term1() {
        let (ff, map) = chain();
        let fr = frames(2, 2, 2);
        let a = precompute_term1(&fr, &ff, &map, 1, 2, 1e-5, 1.0).unwrap();
        let b = precompute_term1(&fr, &ff, &map, 1, 2, 1e-5, 4.184).unwrap();
        assert_eq!(a.records[1].term1[1].clone() * 4.184, b.records[1].term1[1]);
    }

    #[test]
    fn nonlinear_maps_are_rejected() {
        let (ff, _) = chain();
        let map: CGMap = NonlinearCGMap::BondLength { i: 0, j: 1, n: 2, dim: 1 }.into();
        assert!(matches!(precompute_term1(&frames(1, 2, 1), &ff, &map, 1, 2, 1e-5, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn term2_hand_cases() {
        let v = Vector::from_row_slice(&[1.0, 0.0]);
        let zero = ForceResidual { delta_j: Vector::zeros(2) };
        assert_eq!(term2_correction(&zero, &v, 1.0).unwrap(), Vector::zeros(2));
        let same = ForceResidual { delta_j: v.clone() };
        assert_eq!(term2_correction(&same, &v, 1.0).unwrap(), v);
        let r = ForceResidual { delta_j: Vector::from_row_slice(&[1.0, 2.0]) };
        assert_eq!(term2_correction(&r, &v, 2.0).unwrap().as_slice(), &[2.0, 4.0]);
        assert!(term2_correction(&r, &Vector::zeros(3), 1.0).is_err());
    }

    #[test]
    fn assemble_flags() {
        let (ff, map) = chain();
        let store = precompute_term1(&frames(1, 2, 1), &ff, &map, 1, 2, 1e-5, 1.0).unwrap();
        let rec = &store.records[0];
        let off = assemble_target(rec, 1, None, 1.0, false).unwrap();
        assert_eq!(off, rec.term1[1]);
        let zero = ForceResidual { delta_j: Vector::zeros(1) };
        assert_eq!(assemble_target(rec, 1, Some(&zero), 1.0, true).unwrap(), off);
        assert!(matches!(assemble_target(rec, 1, None, 1.0, true), Err(Error::MissingResidual)));
        assert!(assemble_target(rec, 2, None, 1.0, false).is_err());
    }

    #[test]
    fn ensemble_average_of_targets_is_cg_hessian() {
        let (ff, map) = chain();
        let target = Vector::from_element(1, 0.7);
        let ens = sample_conditional(&ff, &map, &target, 1.0, 50_000, &ConditionalOptions::default(), &Vector::zeros(2), &mut RngState(8))
            .unwrap();
        let f_nn = cg_mean_force(&ens, &ff, &map).unwrap();
        let store = precompute_term1(&ens.frames, &ff, &map, 11, 1, 1e-5, 1.0).unwrap();
        let xi = map.force_projection(None).unwrap();
        let mut acc = 0.0;
        for (rec, frame) in store.records.iter().zip(&ens.frames) {
            let residual = ForceResidual { delta_j: &xi * frame.forces.as_ref().unwrap() - &f_nn };
            let t = assemble_target(rec, 0, Some(&residual), 1.0, true).unwrap();
            acc += t[0] / rec.probes[0][0];
        }
        let h = acc / ens.len() as f64;
        assert!((h - 1.5).abs() < 0.05 * 1.5, "{h}");
    }

    #[test]
    fn store_round_trip_and_probe_consistency() {
        let ff = ForceField::quadratic(2, Matrix::identity(4, 4) * 3.0).unwrap();
        let map: CGMap = LinearCGMap::selection(2, 2, &[0, 1]).unwrap().into();
        let store = precompute_term1(&frames(4, 4, 3), &ff, &map, 99, 3, 1e-5, 1.0).unwrap();
        let parsed = TargetStore::parse(&store.render()).unwrap();
        assert_eq!(parsed, store);
        for rec in &parsed.records {
            assert_eq!(rec.probes, generate_probes(99, rec.frame_index, 3, 4).unwrap().vectors);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("targets.txt");
        store.write(&path).unwrap();
        assert_eq!(TargetStore::read(&path).unwrap(), store);
        assert_eq!(store.record(2).unwrap().frame_index, 2);
        assert!(store.record(17).is_none());
    }
}
