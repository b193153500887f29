//! The pipeline subcommands. Each reads its inputs through the manifest and registers its outputs there.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use cghvp_core::aa_system::{sample_boltzmann, ForceField, LangevinOptions, Term};
use cghvp_core::analysis::{evaluate_trajectories, EvalConfig, MetricReport};
use cghvp_core::cg_map::{CGMap, LinearCGMap};
use cghvp_core::cg_model::{CGModel, FeatureConfig, PairMlp, QuadraticBaseline};
use cghvp_core::dynamics::{simulate as run_dynamics, SimConfig};
use cghvp_core::numerics::mean_vector;
use cghvp_core::store::{write_atomic, FrameStore, Space};
use cghvp_core::targets::{precompute_term1, TargetStore};
use cghvp_core::training::{train as run_training, AdamWConfig, LossWeights, TrainConfig, TrainingSet};
use cghvp_core::{Matrix, RngState, Vector};
use rayon::prelude::*;

use crate::config::{Config, Entry};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

pub const MANIFEST: &str = "manifest.ini";
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_REPLICAS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Fm,
    FmAap,
    FmAapCov,
}

impl Variant {
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Fm => "fm",
            Variant::FmAap => "fm_aap",
            Variant::FmAapCov => "fm_aap_cov",
        }
    }

    pub fn uses_hvp(self) -> bool {
        self != Variant::Fm
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fm => "FM",
            Variant::FmAap => "FM+AAp",
            Variant::FmAapCov => "FM+AAp+Cov",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "FM" => Ok(Variant::Fm),
            "FM+AAp" => Ok(Variant::FmAap),
            "FM+AAp+Cov" => Ok(Variant::FmAapCov),
            _ => Err(format!("unknown variant `{s}` (expected FM, FM+AAp or FM+AAp+Cov)")),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.into(), source }
}

fn parse_term(cfg: &Config, e: &Entry, len: usize) -> CliResult<Term> {
    let mut words = e.value.split_whitespace();
    let kind = words.next().unwrap_or("");
    let rest: Vec<&str> = words.collect();
    let bad = |msg: &str| cfg.error(e.line, format!("term `{}`: {msg}", e.value));
    let idx = |i: usize| -> CliResult<usize> { rest.get(i).and_then(|w| w.parse().ok()).ok_or_else(|| bad("expected an atom index")) };
    let num = |i: usize| -> CliResult<f64> { rest.get(i).and_then(|w| w.parse().ok()).ok_or_else(|| bad("expected a number")) };
    let arity = |n: usize| if rest.len() == n { Ok(()) } else { Err(bad(&format!("expected {n} fields after `{kind}`"))) };
    Ok(match kind {
        "bond" => {
            arity(4)?;
            Term::HarmonicBond { i: idx(0)?, j: idx(1)?, k: num(2)?, r0: num(3)? }
        }
        "angle" => {
            arity(5)?;
            Term::HarmonicAngle { i: idx(0)?, j: idx(1)?, l: idx(2)?, k: num(3)?, theta0: num(4)? }
        }
        "lj" => {
            arity(4)?;
            Term::LennardJones { i: idx(0)?, j: idx(1)?, epsilon: num(2)?, sigma: num(3)? }
        }
        "well" => {
            if rest.len() < 3 {
                return Err(bad("expected `well i k c…`"));
            }
            Term::HarmonicWell { i: idx(0)?, k: num(1)?, center: (2..rest.len()).map(num).collect::<CliResult<_>>()? }
        }
        "quadratic" => {
            arity(len * len)?;
            let values = (0..len * len).map(num).collect::<CliResult<Vec<_>>>()?;
            Term::QuadraticForm { k: Matrix::from_row_slice(len, len, &values) }
        }
        _ => return Err(bad("unknown term kind (bond, angle, lj, well, quadratic)")),
    })
}

#[derive(Clone, Debug)]
pub struct Setup {
    pub ff: ForceField,
    pub initial: Vector,
    pub map: LinearCGMap,
    pub system_descriptor: String,
    pub map_descriptor: String,
}

impl Setup {
    pub fn from_config(cfg: &Config) -> CliResult<Self> {
        let n: usize = cfg.get_required("system", "n")?;
        let dim: usize = cfg.get_required("system", "dim")?;
        let len = n * dim;
        let term_entries = cfg.all("system", "term");
        if term_entries.is_empty() {
            return Err(CliError::MissingKey { section: "system".into(), key: "term".into() });
        }
        let terms = term_entries.iter().map(|e| parse_term(cfg, e, len)).collect::<CliResult<Vec<_>>>()?;
        let kinds: Vec<&str> = term_entries.iter().filter_map(|e| e.value.split_whitespace().next()).collect();
        let ff = ForceField::new(n, dim, terms)?;
        let initial = match cfg.entry("system", "initial") {
            Some(e) => {
                let v: Vec<f64> = cfg.list(e)?;
                if v.len() != len {
                    return Err(cfg.error(e.line, format!("initial has {} values, expected {len}", v.len())));
                }
                Vector::from_vec(v)
            }
            None => Vector::zeros(len),
        };
        let kind = cfg.require("map", "kind")?;
        let (map, map_descriptor) = match kind.value.as_str() {
            "selection" => {
                let atoms: Vec<usize> = cfg.list(cfg.require("map", "atoms")?)?;
                let desc = format!("selection {}", atoms.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","));
                (LinearCGMap::selection(n, dim, &atoms)?, desc)
            }
            "groups" => {
                let entries = cfg.all("map", "group");
                if entries.is_empty() {
                    return Err(CliError::MissingKey { section: "map".into(), key: "group".into() });
                }
                let mut groups = Vec::new();
                for e in &entries {
                    let mut g = Vec::new();
                    for pair in e.value.split_whitespace() {
                        let parsed = pair.split_once(':').and_then(|(a, w)| Some((a.parse().ok()?, w.parse().ok()?)));
                        g.push(parsed.ok_or_else(|| cfg.error(e.line, format!("expected `atom:weight`, found `{pair}`")))?);
                    }
                    groups.push(g);
                }
                (LinearCGMap::weighted_groups(n, dim, &groups)?, format!("groups {}", entries.len()))
            }
            other => return Err(cfg.error(kind.line, format!("unknown map kind `{other}` (selection, groups)"))),
        };
        Ok(Setup { ff, initial, map, system_descriptor: format!("n={n} dim={dim} terms={}", kinds.join(",")), map_descriptor })
    }

    pub fn cg_map(&self) -> CGMap {
        self.map.clone().into()
    }
}

fn load_config(m: &Manifest) -> CliResult<Config> {
    Config::read(&m.artifact("config")?)
}

fn read_frames(m: &Manifest, name: &str) -> CliResult<FrameStore> {
    Ok(FrameStore::read(&m.artifact(name)?)?)
}

/// Samples Boltzmann frames and writes the AA frame store, the mapped reference trajectory and the manifest.
pub fn gen_data(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> CliResult<Manifest> {
    let start = Instant::now();
    let cfg = Config::read(config_path)?;
    let setup = Setup::from_config(&cfg)?;
    let beta: f64 = cfg.get("sampling", "beta", 1.0)?;
    let count: usize = cfg.get_required("sampling", "frames")?;
    let seed = seed.map_or_else(|| cfg.get("sampling", "seed", 0u64), Ok)?;
    let options = LangevinOptions {
        dt: cfg.get("sampling", "dt", 1e-3)?,
        friction: cfg.get("sampling", "friction", 1.0)?,
        thinning: cfg.get("sampling", "thinning", 10)?,
        burn_in: cfg.entry("sampling", "burn_in").map(|e| cfg.value(e)).transpose()?,
        frozen: Vec::new(),
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let text = fs::read_to_string(config_path).map_err(io_err(config_path))?;
    write_atomic(&out_dir.join("config.ini"), &text)?;

    let frames = sample_boltzmann(&setup.ff, beta, count, &options, &setup.initial, &mut RngState::new(seed))?;
    let store = FrameStore::new(setup.ff.n(), setup.ff.dim(), Space::Aa, frames)?;
    store.write(&out_dir.join("frames.txt"))?;
    let cg: Vec<Vector> = store.frames.iter().map(|f| setup.map.xi_r() * &f.positions).collect();
    FrameStore::trajectory(setup.map.beads(), setup.map.dim(), &cg)?.write(&out_dir.join("reference.txt"))?;

    let mut m = Manifest::new(&out_dir.join(MANIFEST));
    for (k, v) in [
        ("system", setup.system_descriptor.clone()),
        ("map", setup.map_descriptor.clone()),
        ("beta", beta.to_string()),
        ("unit_scale", cfg.get("targets", "unit_scale", 1.0f64)?.to_string()),
        ("k", cfg.get("targets", "k", DEFAULT_K)?.to_string()),
        ("epsilon", cfg.get("targets", "epsilon", 1e-4f64)?.to_string()),
        ("sampling_seed", seed.to_string()),
    ] {
        m.summary.insert(k.into(), v);
    }
    m.add_file("config", "config.ini")?;
    m.add_file("frames", "frames.txt")?;
    m.add_file("reference", "reference.txt")?;
    m.save()?;
    log::info!("gen-data: {count} frames in {:.2?}", start.elapsed());
    Ok(m)
}

/// Term 1 of the HVP targets for every frame.
pub fn precompute(manifest: &Path, seed: Option<u64>) -> CliResult<Manifest> {
    let start = Instant::now();
    let mut m = Manifest::load(manifest)?;
    let cfg = load_config(&m)?;
    let setup = Setup::from_config(&cfg)?;
    let frames = read_frames(&m, "frames")?;
    let k: usize = cfg.get("targets", "k", DEFAULT_K)?;
    let epsilon: f64 = cfg.get("targets", "epsilon", 1e-4)?;
    let unit_scale: f64 = cfg.get("targets", "unit_scale", 1.0)?;
    let seed = seed.map_or_else(|| cfg.get("targets", "seed", 0u64), Ok)?;
    let total = frames.frames.len();
    let chunk = total.div_ceil(10).max(1);
    let mut records = Vec::with_capacity(total);
    for (i, part) in frames.frames.chunks(chunk).enumerate() {
        let store = precompute_term1(part, &setup.ff, &setup.cg_map(), seed, k, epsilon, unit_scale)?;
        records.extend(store.records);
        log::info!("precompute: {}/{total} frames", (i * chunk + part.len()).min(total));
    }
    let store = TargetStore { d: setup.map.cg_len(), k, epsilon, seed, unit_scale, records };
    store.write(&m.resolve("targets.txt"))?;
    m.summary.insert("probe_seed".into(), seed.to_string());
    m.add_file("targets", "targets.txt")?;
    m.save()?;
    log::info!("precompute: {total} frames, K={k}, wall time {:.2?}", start.elapsed());
    Ok(m)
}

fn initial_model(cfg: &Config, setup: &Setup, data: &TrainingSet) -> CliResult<CGModel> {
    let beads = setup.map.beads();
    let dim = setup.map.dim();
    match cfg.get("model", "kind", String::from("mlp"))?.as_str() {
        "quadratic" => {
            let d = setup.map.cg_len();
            let a = Matrix::identity(d, d) * cfg.get("model", "a_init", 1.0)?;
            Ok(CGModel::Quadratic(QuadraticBaseline::new(a, mean_vector(&data.positions))?))
        }
        "mlp" => {
            if beads < 2 {
                return Err(CliError::Usage("the pair MLP needs at least two CG beads; use kind = quadratic".into()));
            }
            let hidden = match cfg.entry("model", "hidden") {
                Some(e) => cfg.list(e)?,
                None => vec![32, 32],
            };
            let defaults = FeatureConfig::default();
            let features = FeatureConfig {
                rbf_count: cfg.get("model", "rbf", defaults.rbf_count)?,
                cutoff_low: cfg.get("model", "cutoff_low", defaults.cutoff_low)?,
                cutoff_high: cfg.get("model", "cutoff_high", defaults.cutoff_high)?,
            };
            Ok(CGModel::Mlp(PairMlp::new(beads, dim, &hidden, features, cfg.get("model", "seed", 0)?)?))
        }
        other => Err(CliError::Usage(format!("unknown model kind `{other}` (mlp, quadratic)"))),
    }
}

/// Trains one variant: FM (w_hvp = 0), FM+AAp (w_hvp, no covariance), FM+AAp+Cov.
pub fn train(manifest: &Path, variant: Variant, seed: Option<u64>) -> CliResult<Manifest> {
    let start = Instant::now();
    let mut m = Manifest::load(manifest)?;
    let cfg = load_config(&m)?;
    let setup = Setup::from_config(&cfg)?;
    let frames = read_frames(&m, "frames")?;
    let data = TrainingSet::from_frames(&frames.frames, &setup.cg_map())?;
    let store = if variant.uses_hvp() {
        let path = m.artifact("targets").map_err(|_| {
            cghvp_core::Error::StoreMismatch(format!("variant {variant} needs HVP targets; run precompute first"))
        })?;
        Some(TargetStore::read(&path)?)
    } else {
        None
    };
    let defaults = AdamWConfig::default();
    let tc = TrainConfig {
        optimizer: AdamWConfig {
            lr: cfg.get("train", "lr", defaults.lr)?,
            beta1: cfg.get("train", "beta1", defaults.beta1)?,
            beta2: cfg.get("train", "beta2", defaults.beta2)?,
            eps: cfg.get("train", "eps", defaults.eps)?,
            weight_decay: cfg.get("train", "weight_decay", defaults.weight_decay)?,
        },
        weights: LossWeights {
            w_fm: cfg.get("train", "w_fm", 1.0)?,
            w_hvp: if variant.uses_hvp() { cfg.get("train", "w_hvp", 0.01)? } else { 0.0 },
        },
        batch_size: cfg.get("train", "batch_size", 200)?,
        epochs: cfg.get("train", "epochs", 10)?,
        beta: m.summary.get("beta").and_then(|b| b.parse().ok()).unwrap_or(1.0),
        use_covariance: variant == Variant::FmAapCov,
        seed: seed.map_or_else(|| cfg.get("train", "seed", 0u64), Ok)?,
        validation_fraction: cfg.get("train", "validation_fraction", 0.1)?,
    };
    let mut model = initial_model(&cfg, &setup, &data)?;
    let report = run_training(&data, store.as_ref(), &mut model, &tc)?;
    let slug = variant.slug();
    let (ckpt, hist) = (format!("model_{slug}.txt"), format!("history_{slug}.csv"));
    model.write(&m.resolve(&ckpt))?;
    write_atomic(&m.resolve(&hist), &report.history_csv())?;
    m.summary.insert(format!("train_seed.{slug}"), tc.seed.to_string());
    m.add_file(&format!("checkpoint.{slug}"), &ckpt)?;
    m.add_file(&format!("history.{slug}"), &hist)?;
    m.save()?;
    log::info!("train {variant}: {} optimizer steps in {:.2?}", report.steps, start.elapsed());
    Ok(m)
}

/// Runs independent replicas of the trained model with seeds `seed + i`.
pub fn simulate(manifest: &Path, variant: Variant, replicas: Option<usize>, seed: Option<u64>) -> CliResult<Manifest> {
    let start = Instant::now();
    let mut m = Manifest::load(manifest)?;
    let cfg = load_config(&m)?;
    let slug = variant.slug();
    let model = CGModel::read(&m.artifact(&format!("checkpoint.{slug}"))?)?;
    let reference = read_frames(&m, "reference")?;
    let initial = reference
        .frames
        .first()
        .map(|f| f.positions.clone())
        .ok_or_else(|| cghvp_core::Error::EmptyInput("reference trajectory".into()))?;
    let replicas = replicas.map_or_else(|| cfg.get("simulate", "replicas", DEFAULT_REPLICAS), Ok)?;
    if replicas == 0 {
        return Err(CliError::Usage("replicas must be at least 1".into()));
    }
    let seed = seed.map_or_else(|| cfg.get("simulate", "seed", 0u64), Ok)?;
    let beta: f64 = m.summary.get("beta").and_then(|b| b.parse().ok()).unwrap_or(1.0);
    let base = SimConfig {
        dt: cfg.get("simulate", "dt", 1e-3)?,
        friction: cfg.get("simulate", "friction", 1.0)?,
        thinning: cfg.get("simulate", "thinning", 10)?,
        ..SimConfig::new(initial, beta, cfg.get("simulate", "steps", 10_000)?, seed)
    };
    let trajectories = (0..replicas)
        .into_par_iter()
        .map(|i| {
            let sc = SimConfig { seed: seed.wrapping_add(i as u64), ..base.clone() };
            run_dynamics(&model, &sc).map_err(|source| CliError::Replica { replica: i, source })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let stale: Vec<String> = m.files.keys().filter(|k| k.starts_with(&format!("traj.{slug}."))).cloned().collect();
    for k in stale {
        m.files.remove(&k);
        m.hashes.remove(&k);
    }
    for (i, traj) in trajectories.iter().enumerate() {
        let rel = format!("traj_{slug}_{i}.txt");
        FrameStore::trajectory(reference.n, reference.dim, traj)?.write(&m.resolve(&rel))?;
        m.add_file(&format!("traj.{slug}.{i:03}"), &rel)?;
    }
    m.summary.insert(format!("simulate_seed.{slug}"), seed.to_string());
    m.summary.insert(format!("replicas.{slug}"), replicas.to_string());
    m.save()?;
    log::info!("simulate {variant}: {replicas} replicas in {:.2?}", start.elapsed());
    Ok(m)
}

/// Model replicas against the reference trajectory; writes the metric and density CSVs.
pub fn evaluate(manifest: &Path, variant: Variant, out: Option<&Path>) -> CliResult<(Manifest, MetricReport)> {
    let mut m = Manifest::load(manifest)?;
    let cfg = load_config(&m)?;
    let slug = variant.slug();
    let reference = read_frames(&m, "reference")?;
    let prefix = format!("traj.{slug}.");
    let names: Vec<String> = m.files.keys().filter(|k| k.starts_with(&prefix)).cloned().collect();
    if names.is_empty() {
        return Err(CliError::MissingArtifact(format!("{prefix}*")));
    }
    let mut model_trajs = Vec::with_capacity(names.len());
    for name in &names {
        let store = read_frames(&m, name)?;
        if (store.n, store.dim) != (reference.n, reference.dim) {
            return Err(cghvp_core::Error::DimensionMismatch {
                expected: reference.n * reference.dim,
                got: store.n * store.dim,
                context: format!("trajectory {name} vs reference"),
            }
            .into());
        }
        model_trajs.push(store.positions());
    }
    let defaults = EvalConfig::default();
    let ec = EvalConfig {
        lag: cfg.get("evaluate", "lag", defaults.lag)?,
        bins: cfg.get("evaluate", "bins", defaults.bins)?,
        directions: cfg.get("evaluate", "directions", defaults.directions)?,
        seed: cfg.get("evaluate", "seed", defaults.seed)?,
        regularization: cfg.get("evaluate", "regularization", defaults.regularization)?,
    };
    let report = evaluate_trajectories(&[reference.positions()], &model_trajs, reference.n, reference.dim, &ec)?;
    let report_rel = format!("report_{slug}.csv");
    let density_rel = format!("densities_{slug}.csv");
    write_atomic(&m.resolve(&report_rel), &report.to_csv())?;
    write_atomic(&m.resolve(&density_rel), &report.densities)?;
    if let Some(extra) = out {
        write_atomic(extra, &report.to_csv())?;
    }
    m.add_file(&format!("report.{slug}"), &report_rel)?;
    m.add_file(&format!("densities.{slug}"), &density_rel)?;
    m.save()?;
    Ok((m, report))
}

/// Default manifest location inside an output directory.
pub fn manifest_in(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}
