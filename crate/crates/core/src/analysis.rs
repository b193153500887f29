//! Trajectory metrics: TICA, 1-d W1 and KL, sliced 2-d W1, and structural distributions.

use std::fmt::Write as _;

use crate::numerics::{sym_eig, Matrix, RngState, Vector};
use crate::{Error, Result};

pub const PSEUDOCOUNT: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram1D {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

/// Histogram over `[lo, hi]` with uniform bins and a pseudocount added before normalization.
pub fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram1D> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("histogram samples".into()));
    }
    if bins == 0 || !(hi >= lo) {
        return Err(Error::InvalidArgument("histogram needs bins ≥ 1 and hi ≥ lo".into()));
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![PSEUDOCOUNT; bins];
    for &x in samples {
        let bin = if width > 0.0 { (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1) } else { 0 };
        counts[bin] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    Ok(Histogram1D { edges, masses: counts.into_iter().map(|c| c / total).collect() })
}

fn nonempty(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyInput(what.into()));
    }
    Ok(())
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Exact 1-d Wasserstein-1 distance between two empirical distributions.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    nonempty(a, "first sample set")?;
    nonempty(b, "second sample set")?;
    let (a, b) = (sorted(a), sorted(b));
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    // ∫ |F_a − F_b| dx over the merged support.
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// `Σ p ln(p/q)` over histograms sharing bins across the pooled range.
pub fn kl_1d(p: &[f64], q: &[f64], bins: usize) -> Result<f64> {
    nonempty(p, "first sample set")?;
    nonempty(q, "second sample set")?;
    let lo = p.iter().chain(q).copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().chain(q).copied().fold(f64::NEG_INFINITY, f64::max);
    let hp = histogram(p, lo, hi, bins)?;
    let hq = histogram(q, lo, hi, bins)?;
    Ok(hp.masses.iter().zip(&hq.masses).map(|(a, b)| a * (a / b).ln()).sum())
}

/// Mean 1-d W1 over `directions` stratified angles in `[0, π)`, offset by a seeded uniform.
pub fn sliced_w1_2d(a: &[[f64; 2]], b: &[[f64; 2]], directions: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("point cloud".into()));
    }
    if directions == 0 {
        return Err(Error::InvalidArgument("sliced W1 needs at least one direction".into()));
    }
    let offset = RngState::new(seed).uniform();
    let mut total = 0.0;
    for k in 0..directions {
        let theta = (k as f64 + offset) * std::f64::consts::PI / directions as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let pa: Vec<f64> = a.iter().map(|p| c * p[0] + s * p[1]).collect();
        let pb: Vec<f64> = b.iter().map(|p| c * p[0] + s * p[1]).collect();
        total += w1_1d(&pa, &pb)?;
    }
    Ok(total / directions as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TicaModel {
    pub lag: usize,
    pub mean: Vector,
    pub eigenvalues: Vector,
    /// Columns are the components, slowest first.
    pub components: Matrix,
}

/// Time-lagged pairs `(x_t, x_{t+τ})` over all trajectories.
fn lag_pairs<'a>(trajectories: &'a [Vec<Vector>], lag: usize) -> impl Iterator<Item = (&'a Vector, &'a Vector)> {
    trajectories.iter().flat_map(move |t| t.iter().zip(t.iter().skip(lag)))
}

/// Fits TICA with both covariances symmetrized over lag pairs, so eigenvalues lie in `[−1, 1]`.
pub fn tica_fit(trajectories: &[Vec<Vector>], lag: usize, regularization: f64) -> Result<TicaModel> {
    if lag == 0 {
        return Err(Error::InvalidArgument("TICA lag must be at least 1".into()));
    }
    if trajectories.is_empty() {
        return Err(Error::EmptyInput("TICA trajectories".into()));
    }
    for t in trajectories {
        if t.len() <= lag {
            return Err(Error::TrajectoryTooShort { len: t.len(), lag });
        }
    }
    let d = trajectories[0][0].len();
    if let Some(bad) = trajectories.iter().flatten().find(|x| x.len() != d) {
        return Err(Error::mismatch(d, bad.len(), "TICA feature length"));
    }
    let mut mean = Vector::zeros(d);
    let mut count = 0usize;
    for (x, y) in lag_pairs(trajectories, lag) {
        mean += x + y;
        count += 2;
    }
    mean /= count as f64;
    let mut c0 = Matrix::zeros(d, d);
    let mut ct = Matrix::zeros(d, d);
    for (x, y) in lag_pairs(trajectories, lag) {
        let (x, y) = (x - &mean, y - &mean);
        c0 += &x * x.transpose() + &y * y.transpose();
        ct += &x * y.transpose() + &y * x.transpose();
    }
    c0 /= count as f64;
    ct /= count as f64;
    let (lambda, u) = sym_eig(&c0)?;
    let scale = lambda.map(|l| 1.0 / l.max(regularization).sqrt());
    let whiten = &u * Matrix::from_diagonal(&scale);
    let (eigenvalues, v) = sym_eig(&(whiten.transpose() * ct * &whiten))?;
    let mut components = whiten * v;
    for mut col in components.column_iter_mut() {
        let max = col.amax();
        if let Some(&first) = col.iter().find(|x| x.abs() > 1e-12 * max) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    Ok(TicaModel { lag, mean, eigenvalues, components })
}

/// Projections of a trajectory, indexed `[component][time]`.
pub fn project(model: &TicaModel, trajectory: &[Vector]) -> Result<Vec<Vec<f64>>> {
    let d = model.mean.len();
    let mut out = vec![Vec::with_capacity(trajectory.len()); model.components.ncols()];
    for x in trajectory {
        if x.len() != d {
            return Err(Error::mismatch(d, x.len(), "TICA projection input"));
        }
        let p = model.components.transpose() * (x - &model.mean);
        for (series, v) in out.iter_mut().zip(p.iter()) {
            series.push(*v);
        }
    }
    Ok(out)
}

/// Pairwise bead distances `|R_i − R_j|`, `i < j`, used as TICA features.
pub fn pairwise_distances(r: &Vector, beads: usize, dim: usize) -> Vector {
    let mut out = Vec::with_capacity(beads * (beads - 1) / 2);
    for i in 0..beads {
        for j in (i + 1)..beads {
            out.push(bead(r, i, dim).iter().zip(bead(r, j, dim)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    Vector::from_vec(out)
}

fn bead(r: &Vector, i: usize, dim: usize) -> &[f64] {
    &r.as_slice()[i * dim..(i + 1) * dim]
}

fn sub(a: &[f64], b: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..a.len().min(3) {
        out[k] = a[k] - b[k];
    }
    out
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Angle at vertex `b` of the triple `a-b-c`.
pub fn bond_angle(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let (u, v) = (sub(a, b), sub(c, b));
    (dot(u, v) / (dot(u, u) * dot(v, v)).sqrt()).clamp(-1.0, 1.0).acos()
}

/// Signed dihedral of four 3-d points, in `(−π, π]`.
pub fn dihedral(p0: &[f64], p1: &[f64], p2: &[f64], p3: &[f64]) -> f64 {
    let (b1, b2, b3) = (sub(p1, p0), sub(p2, p1), sub(p3, p2));
    let (n1, n2) = (cross(b1, b2), cross(b2, b3));
    let nb2 = dot(b2, b2).sqrt();
    let m1 = cross(n1, [b2[0] / nb2, b2[1] / nb2, b2[2] / nb2]);
    dot(m1, n2).atan2(dot(n1, n2))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StructuralMetrics {
    pub bonds: Vec<f64>,
    pub angles: Option<Vec<f64>>,
    pub dihedrals: Option<Vec<f64>>,
    pub gyration: Vec<f64>,
    pub skipped: Vec<String>,
}

/// Bond lengths of consecutive beads, angles of triples, dihedrals of quadruples, and gyration radii.
pub fn structural_metrics(trajectory: &[Vector], beads: usize, dim: usize) -> StructuralMetrics {
    let mut out = StructuralMetrics::default();
    let angles_ok = beads >= 3 && dim >= 2;
    let dihedrals_ok = beads >= 4 && dim == 3;
    if !angles_ok {
        out.skipped.push("angles need at least 3 beads in at least 2 dimensions".into());
    }
    if !dihedrals_ok {
        out.skipped.push("dihedrals need at least 4 beads in 3 dimensions".into());
    }
    for s in &out.skipped {
        log::warn!("structural metrics: {s}");
    }
    let mut angles = Vec::new();
    let mut dihedrals = Vec::new();
    for r in trajectory {
        for i in 0..beads.saturating_sub(1) {
            out.bonds.push(bead(r, i, dim).iter().zip(bead(r, i + 1, dim)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
        if angles_ok {
            for i in 0..beads - 2 {
                angles.push(bond_angle(bead(r, i, dim), bead(r, i + 1, dim), bead(r, i + 2, dim)));
            }
        }
        if dihedrals_ok {
            for i in 0..beads - 3 {
                dihedrals.push(dihedral(bead(r, i, dim), bead(r, i + 1, dim), bead(r, i + 2, dim), bead(r, i + 3, dim)));
            }
        }
        let mut centroid = vec![0.0; dim];
        for i in 0..beads {
            for (c, x) in centroid.iter_mut().zip(bead(r, i, dim)) {
                *c += x / beads as f64;
            }
        }
        let sq: f64 = (0..beads)
            .map(|i| bead(r, i, dim).iter().zip(&centroid).map(|(x, c)| (x - c).powi(2)).sum::<f64>())
            .sum();
        out.gyration.push((sq / beads as f64).sqrt());
    }
    out.angles = angles_ok.then_some(angles);
    out.dihedrals = dihedrals_ok.then_some(dihedrals);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub lag: usize,
    pub bins: usize,
    pub directions: usize,
    pub seed: u64,
    pub regularization: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { lag: 10, bins: 50, directions: 64, seed: 0, regularization: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub component: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// CSV `series,component,bin_center,density` for the TIC 0–3 histograms.
    pub densities: String,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,component,value\n");
        for r in &self.rows {
            let value = if r.value.is_nan() { "nan".to_string() } else { format!("{:.16e}", r.value) };
            let _ = writeln!(out, "{},{},{}", r.metric, r.component, value);
        }
        out
    }

    pub fn get(&self, metric: &str, component: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.component == component).map(|r| r.value)
    }
}

/// Compares model trajectories with reference ones: TIC 0–3 KL, 2-d sliced W1 on (TIC 0, TIC 1),
/// and W1 of dihedrals, angles, bonds and gyration radii. TICA is fitted on the reference.
pub fn evaluate_trajectories(
    reference: &[Vec<Vector>],
    model: &[Vec<Vector>],
    beads: usize,
    dim: usize,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if reference.iter().all(|t| t.is_empty()) || model.iter().all(|t| t.is_empty()) {
        return Err(Error::EmptyInput("trajectory set".into()));
    }
    let d = beads * dim;
    if let Some(bad) = reference.iter().chain(model).flatten().find(|r| r.len() != d) {
        return Err(Error::mismatch(d, bad.len(), "trajectory frame length"));
    }
    let features = |set: &[Vec<Vector>]| -> Vec<Vec<Vector>> {
        set.iter().map(|t| t.iter().map(|r| pairwise_distances(r, beads, dim)).collect()).collect()
    };
    let (ref_feat, mod_feat) = (features(reference), features(model));
    let tica = tica_fit(&ref_feat, cfg.lag, cfg.regularization)?;
    let pooled = |feat: &[Vec<Vector>]| -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); tica.components.ncols()];
        for t in feat {
            for (o, series) in out.iter_mut().zip(project(&tica, t)?) {
                o.extend(series);
            }
        }
        Ok(out)
    };
    let (ref_proj, mod_proj) = (pooled(&ref_feat)?, pooled(&mod_feat)?);
    let n_tic = ref_proj.len();
    let mut rows = Vec::new();
    let mut push = |metric: &str, component: &str, value: f64| {
        rows.push(MetricRow { metric: metric.into(), component: component.into(), value })
    };

    let tica_2d = if n_tic >= 2 {
        let pts = |p: &[Vec<f64>]| p[0].iter().zip(&p[1]).map(|(&a, &b)| [a, b]).collect::<Vec<_>>();
        sliced_w1_2d(&pts(&ref_proj), &pts(&mod_proj), cfg.directions, cfg.seed)?
    } else {
        f64::NAN
    };
    push("tica_2d_w1", "tic0_tic1", tica_2d);
    let mut densities = String::from("series,component,bin_center,density\n");
    for c in 0..4 {
        let name = format!("tic{c}");
        if c < n_tic {
            push("tic_kl", &name, kl_1d(&ref_proj[c], &mod_proj[c], cfg.bins)?);
            let lo = ref_proj[c].iter().chain(&mod_proj[c]).copied().fold(f64::INFINITY, f64::min);
            let hi = ref_proj[c].iter().chain(&mod_proj[c]).copied().fold(f64::NEG_INFINITY, f64::max);
            for (series, samples) in [("reference", &ref_proj[c]), ("model", &mod_proj[c])] {
                let h = histogram(samples, lo, hi, cfg.bins)?;
                let width = (hi - lo) / cfg.bins as f64;
                for (k, m) in h.masses.iter().enumerate() {
                    let center = 0.5 * (h.edges[k] + h.edges[k + 1]);
                    let density = if width > 0.0 { m / width } else { *m };
                    let _ = writeln!(densities, "{series},{name},{center:.16e},{density:.16e}");
                }
            }
        } else {
            push("tic_kl", &name, f64::NAN);
        }
    }
    let flat = |set: &[Vec<Vector>]| -> StructuralMetrics {
        let frames: Vec<Vector> = set.iter().flatten().cloned().collect();
        structural_metrics(&frames, beads, dim)
    };
    let (sr, sm) = (flat(reference), flat(model));
    let optional_w1 = |a: &Option<Vec<f64>>, b: &Option<Vec<f64>>| -> Result<f64> {
        match (a, b) {
            (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => w1_1d(a, b),
            _ => Ok(f64::NAN),
        }
    };
    push("dihedral_w1", "all", optional_w1(&sr.dihedrals, &sm.dihedrals)?);
    push("angle_w1", "all", optional_w1(&sr.angles, &sm.angles)?);
    push("bond_w1", "all", if sr.bonds.is_empty() { f64::NAN } else { w1_1d(&sr.bonds, &sm.bonds)? });
    push("gyration_w1", "all", w1_1d(&sr.gyration, &sm.gyration)?);
    Ok(MetricReport { rows, densities })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(rng: &mut RngState, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform()).collect()
    }

    #[test]
    fn w1_hand_cases() {
        assert_eq!(w1_1d(&[0.3, 0.1, 0.2], &[0.2, 0.3, 0.1]).unwrap(), 0.0);
        assert_eq!(w1_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!((w1_1d(&[0.0, 0.0], &[1.0]).unwrap() - 1.0).abs() < 1e-15);
        // point mass at 0 vs half mass at 0 and half at 2
        assert!((w1_1d(&[0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((w1_1d(&[0.0, 1.0, 2.0], &[0.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(w1_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn w1_shift_property() {
        let mut rng = RngState(1);
        let a = uniform(&mut rng, 100_000);
        let b: Vec<f64> = uniform(&mut rng, 100_000).into_iter().map(|x| x + 0.5).collect();
        let w = w1_1d(&a, &b).unwrap(); assert!((w - 0.5).abs() < 0.01, "{w}");
        let c: Vec<f64> = uniform(&mut rng, 70_000).into_iter().map(|x| x + 0.5).collect();
        let w = w1_1d(&a, &c).unwrap(); assert!((w - 0.5).abs() < 0.01, "{w}");
    }

    #[test]
    fn kl_gaussian_pair() {
        let mut rng = RngState(2);
        let p = rng.normals(100_000);
        let q: Vec<f64> = rng.normals(100_000).into_iter().map(|x| x + 1.0).collect();
        let pq = kl_1d(&p, &q, 50).unwrap();
        let qp = kl_1d(&q, &p, 50).unwrap();
        assert!((pq - 0.5).abs() < 0.075, "{pq}");
        assert!(pq != qp);
        assert!(kl_1d(&p, &p, 50).unwrap().abs() < 1e-6);
    }

    #[test]
    fn histogram_masses_sum_to_one() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0], 0.0, 1.0, 4).unwrap();
        assert!((h.masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h.masses.iter().all(|&m| m >= 0.0));
        assert_eq!(h.edges.len(), 5);
    }

    #[test]
    fn sliced_w1_cases() {
        let mut rng = RngState(3);
        let a: Vec<[f64; 2]> = (0..2000).map(|_| [rng.normals(1)[0], rng.normals(1)[0]]).collect();
        assert_eq!(sliced_w1_2d(&a, &a, 64, 0).unwrap(), 0.0);
        let b: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        let w = sliced_w1_2d(&a, &b, 64, 0).unwrap();
        assert!((w - 2.0 / std::f64::consts::PI).abs() < 0.05 * 2.0 / std::f64::consts::PI);
        let rot = |p: &[f64; 2]| [0.6 * p[0] - 0.8 * p[1], 0.8 * p[0] + 0.6 * p[1]];
        let (ra, rb): (Vec<_>, Vec<_>) = (a.iter().map(rot).collect(), b.iter().map(rot).collect());
        assert!((sliced_w1_2d(&ra, &rb, 64, 0).unwrap() - w).abs() < 0.03 * w);
    }

    fn ar1(rng: &mut RngState, n: usize, phi: [f64; 2]) -> Vec<Vector> {
        let mut x = [0.0, 0.0];
        (0..n)
            .map(|_| {
                let z = rng.normals(2);
                for k in 0..2 {
                    x[k] = phi[k] * x[k] + (1.0 - phi[k] * phi[k]).sqrt() * z[k];
                }
                Vector::from_row_slice(&x)
            })
            .collect()
    }

    #[test]
    fn tica_recovers_slow_coordinate() {
        let mut rng = RngState(4);
        let traj = ar1(&mut rng, 100_000, [0.99, 0.5]);
        let model = tica_fit(&[traj.clone()], 1, 1e-6).unwrap();
        let c0 = model.components.column(0);
        assert!(c0[0].abs() / c0.norm() > 0.95);
        assert!(model.eigenvalues.iter().all(|&l| (-1.0..=1.0 + 1e-6).contains(&l)));
        // rotated data gives the same projections up to sign
        let rotated: Vec<Vector> = traj.iter().map(|x| Vector::from_row_slice(&[0.6 * x[0] - 0.8 * x[1], 0.8 * x[0] + 0.6 * x[1]])).collect();
        let m2 = tica_fit(&[rotated.clone()], 1, 1e-6).unwrap();
        let (p1, p2) = (project(&model, &traj).unwrap(), project(&m2, &rotated).unwrap());
        let diff = p1[0].iter().zip(&p2[0]).map(|(a, b)| (a.abs() - b.abs()).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8);
    }

    #[test]
    fn tica_projection_has_unit_pair_variance() {
        let mut rng = RngState(5);
        let traj = ar1(&mut rng, 5_000, [0.9, 0.2]);
        let model = tica_fit(&[traj.clone()], 3, 1e-6).unwrap();
        let proj = project(&model, &traj).unwrap();
        // second moment with the lag-pair weighting used by the fit
        let n = traj.len() - 3;
        let m2: f64 = (0..n).map(|t| proj[0][t].powi(2) + proj[0][t + 3].powi(2)).sum::<f64>() / (2 * n) as f64;
        assert!((m2 - 1.0).abs() < 1e-6);
        let constant = vec![model.mean.clone(); 10];
        assert!(project(&model, &constant).unwrap().iter().flatten().all(|&x| x == 0.0));
        assert!(matches!(tica_fit(&[traj[..3].to_vec()], 3, 1e-6), Err(Error::TrajectoryTooShort { .. })));
        assert!(project(&model, &[Vector::zeros(3)]).is_err());
    }

    #[test]
    fn structural_hand_cases() {
        let two = vec![Vector::from_row_slice(&[0.0, 0.0, 0.0, 1.5, 0.0, 0.0]); 3];
        let s = structural_metrics(&two, 2, 3);
        assert!(s.bonds.iter().all(|&b| b == 1.5));
        assert!(s.gyration.iter().all(|&g| g == 0.75));
        assert!(s.angles.is_none() && s.dihedrals.is_none() && s.skipped.len() == 2);

        assert!((bond_angle(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[2.0, 0.0, 0.0]) - std::f64::consts::PI).abs() < 1e-12);
        let cis = dihedral(&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]);
        let trans = dihedral(&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, -1.0, 0.0]);
        assert!(cis.abs() < 1e-12);
        assert!((trans.abs() - std::f64::consts::PI).abs() < 1e-12);
        let gauche = dihedral(&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 1.0]);
        assert!((gauche.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let mut rng = RngState(6);
        let traj: Vec<Vector> = (0..500).map(|t| {
            let mut r = rng.normal_vector(12) * 0.1;
            for b in 0..4 {
                r[b * 3] += b as f64 + 0.01 * t as f64;
            }
            r
        }).collect();
        let report = evaluate_trajectories(&[traj.clone()], &[traj], 4, 3, &EvalConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 9);
        for row in &report.rows {
            assert!(row.value.abs() < 1e-6, "{row:?}");
        }
        assert!(report.to_csv().starts_with("metric,component,value\ntica_2d_w1,tic0_tic1,"));
        assert!(report.densities.lines().count() > 1);
    }
}
