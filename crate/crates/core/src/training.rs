//! Force-matching and HVP-matching losses, AdamW, and the training loop.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::aa_system::AtomisticFrame;
use crate::cg_map::CGMap;
use crate::cg_model::{CGModel, Cotangents};
use crate::numerics::{RngState, Vector};
use crate::targets::{assemble_target, term2_correction, ForceResidual, HvpTargetRecord, TargetStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_fm: f64,
    pub w_hvp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_fm: 1.0, w_hvp: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub use_covariance: bool,
    pub seed: u64,
    /// Fraction of frames, taken from the end, held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            batch_size: 200,
            epochs: 10,
            beta: 1.0,
            use_covariance: false,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

fn squared_per_dim(a: &Vector, b: &Vector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch(b.len(), a.len(), "prediction vs target"));
    }
    Ok((a - b).norm_squared() / a.len() as f64)
}

/// `(1/T) Σ_t ‖F_NN − Ξ_F F_AA‖² / d`.
pub fn loss_fm(predicted: &[Vector], targets: &[Vector]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if predicted.len() != targets.len() {
        return Err(Error::mismatch(targets.len(), predicted.len(), "frames in loss_fm"));
    }
    let mut acc = 0.0;
    for (p, t) in predicted.iter().zip(targets) {
        acc += squared_per_dim(p, t)?;
    }
    Ok(acc / predicted.len() as f64)
}

/// `(1/T) Σ_t (1/K) Σ_k ‖H v_k − target_k‖² / d`.
pub fn loss_hvp(hvps: &[Vec<Vector>], targets: &[Vec<Vector>]) -> Result<f64> {
    if hvps.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if hvps.len() != targets.len() {
        return Err(Error::mismatch(targets.len(), hvps.len(), "frames in loss_hvp"));
    }
    let k = hvps[0].len();
    let mut acc = 0.0;
    for (h, t) in hvps.iter().zip(targets) {
        if h.len() != k || t.len() != k || k == 0 {
            return Err(Error::mismatch(k, h.len().min(t.len()), "probes per frame in loss_hvp"));
        }
        let mut frame = 0.0;
        for (a, b) in h.iter().zip(t) {
            frame += squared_per_dim(a, b)?;
        }
        acc += frame / k as f64;
    }
    Ok(acc / hvps.len() as f64)
}

pub fn total_loss(fm: f64, hvp: f64, w: LossWeights) -> f64 {
    w.w_fm * fm + w.w_hvp * hvp
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::mismatch(params.len(), grads.len(), "AdamW shapes"));
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        params[i] *= 1.0 - cfg.lr * cfg.weight_decay;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// CG positions and projected reference forces, keyed by frame index.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub frame_indices: Vec<usize>,
    pub positions: Vec<Vector>,
    pub forces: Vec<Vector>,
}

impl TrainingSet {
    pub fn new(positions: Vec<Vector>, forces: Vec<Vector>) -> Result<Self> {
        if positions.len() != forces.len() {
            return Err(Error::mismatch(positions.len(), forces.len(), "training forces"));
        }
        let frame_indices = (0..positions.len()).collect();
        Ok(TrainingSet { frame_indices, positions, forces })
    }

    /// Projects AA frames: `R = ξ(r)`, `y = Ξ_F F_AA`.
    pub fn from_frames(frames: &[AtomisticFrame], map: &CGMap) -> Result<Self> {
        let mut out = TrainingSet { frame_indices: vec![], positions: vec![], forces: vec![] };
        for f in frames {
            let forces = f
                .forces
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("frame {} has no forces", f.frame_index)))?;
            out.frame_indices.push(f.frame_index);
            out.positions.push(map.project_positions(&f.positions)?);
            out.forces.push(map.force_projection(Some(&f.positions))? * forces);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of trailing frames held out for validation.
    pub fn validation_len(&self, fraction: f64) -> usize {
        ((self.len() as f64) * fraction).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss_fm: f64,
    /// NaN when the HVP term is switched off.
    pub loss_hvp: f64,
    pub loss_total: f64,
    /// Mean `‖β (δJᵀv) δJ‖` over the epoch's training steps, with the covariance correction on.
    pub term2_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

impl TrainReport {
    /// CSV `epoch,split,loss_fm,loss_hvp,loss_total`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss_fm,loss_hvp,loss_total\n");
        for r in &self.history {
            let hvp = if r.loss_hvp.is_nan() { "nan".to_string() } else { format!("{:.16e}", r.loss_hvp) };
            let _ = writeln!(out, "{},{},{:.16e},{},{:.16e}", r.epoch, r.split, r.loss_fm, hvp, r.loss_total);
        }
        out
    }
}

struct FrameOutcome {
    fm: f64,
    hvp: f64,
    term2: f64,
    grad: Option<Vector>,
}

struct Objective<'a> {
    data: &'a TrainingSet,
    records: Vec<Option<&'a HvpTargetRecord>>,
    cfg: &'a TrainConfig,
}

impl Objective<'_> {
    fn hvp_on(&self) -> bool {
        self.cfg.weights.w_hvp > 0.0
    }

    fn frame(&self, model: &CGModel, t: usize, want_grad: bool) -> Result<FrameOutcome> {
        let r = &self.data.positions[t];
        let y = &self.data.forces[t];
        let d = r.len() as f64;
        let record = if self.hvp_on() { self.records[t] } else { None };
        let probes: &[Vector] = record.map_or(&[], |rec| rec.probes.as_slice());
        let (_, f, hv) = model.evaluate(r, probes)?;
        let res = &f - y;
        let fm = res.norm_squared() / d;
        let mut hvp = f64::NAN;
        let mut term2 = 0.0;
        let mut hvp_cot = Vec::new();
        if let Some(rec) = record {
            // δJ is computed from the current model but enters the target as a constant.
            let residual = ForceResidual { delta_j: y - &f };
            let k = rec.k() as f64;
            hvp = 0.0;
            for (idx, (v, h)) in rec.probes.iter().zip(&hv).enumerate() {
                let target = assemble_target(rec, idx, Some(&residual), self.cfg.beta, self.cfg.use_covariance)?;
                if self.cfg.use_covariance {
                    term2 += term2_correction(&residual, v, self.cfg.beta)?.norm() / k;
                }
                let diff = h - target;
                hvp += diff.norm_squared() / (k * d);
                if want_grad {
                    hvp_cot.push((v.clone(), diff * (2.0 * self.cfg.weights.w_hvp / (k * d))));
                }
            }
        }
        let grad = if want_grad {
            let cot = Cotangents { energy: 0.0, forces: Some(res * (2.0 * self.cfg.weights.w_fm / d)), hvp: hvp_cot };
            Some(model.param_grad(r, &cot)?)
        } else {
            None
        };
        Ok(FrameOutcome { fm, hvp, term2, grad })
    }

    fn outcomes(&self, model: &CGModel, frames: &[usize], want_grad: bool) -> Result<Vec<FrameOutcome>> {
        frames.par_iter().map(|&t| self.frame(model, t, want_grad)).collect()
    }

    /// Mean FM and HVP losses over `frames`.
    fn losses(&self, model: &CGModel, frames: &[usize]) -> Result<(f64, f64)> {
        let out = self.outcomes(model, frames, false)?;
        let n = out.len() as f64;
        Ok((out.iter().map(|o| o.fm).sum::<f64>() / n, out.iter().map(|o| o.hvp).sum::<f64>() / n))
    }
}

fn build_objective<'a>(data: &'a TrainingSet, store: Option<&'a TargetStore>, model: &CGModel, cfg: &'a TrainConfig) -> Result<Objective<'a>> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = model.cg_len();
    if let Some(bad) = data.positions.iter().chain(&data.forces).find(|v| v.len() != d) {
        return Err(Error::mismatch(d, bad.len(), "training data vs model"));
    }
    let mut records = vec![None; data.len()];
    if cfg.weights.w_hvp > 0.0 {
        let store = store.ok_or_else(|| Error::StoreMismatch("HVP training needs a target store".into()))?;
        if store.d != d {
            return Err(Error::StoreMismatch(format!("store has d={}, model has d={d}", store.d)));
        }
        for (slot, &t) in records.iter_mut().zip(&data.frame_indices) {
            let rec = store.record(t).ok_or_else(|| Error::StoreMismatch(format!("no targets for frame {t}")))?;
            if rec.k() == 0 || rec.probes.iter().chain(&rec.term1).any(|v| v.len() != d) {
                return Err(Error::StoreMismatch(format!("record for frame {t} has the wrong shape")));
            }
            *slot = Some(rec);
        }
    }
    Ok(Objective { data, records, cfg })
}

/// Mean `(loss_fm, loss_hvp)` of `model` over every frame in `data`; `loss_hvp` is NaN when off.
pub fn evaluate_losses(model: &CGModel, data: &TrainingSet, store: Option<&TargetStore>, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let obj = build_objective(data, store, model, cfg)?;
    obj.losses(model, &(0..data.len()).collect::<Vec<_>>())
}

/// Total loss over every frame in `data` and its gradient in the model parameters.
///
/// Targets, including Term 2 when the covariance correction is on, are held constant.
pub fn loss_and_grad(model: &CGModel, data: &TrainingSet, store: Option<&TargetStore>, cfg: &TrainConfig) -> Result<(f64, Vector)> {
    let obj = build_objective(data, store, model, cfg)?;
    let frames: Vec<usize> = (0..data.len()).collect();
    let outcomes = obj.outcomes(model, &frames, true)?;
    let n = frames.len() as f64;
    let fm = outcomes.iter().map(|o| o.fm).sum::<f64>() / n;
    let hvp = outcomes.iter().map(|o| o.hvp).sum::<f64>() / n;
    let loss = if obj.hvp_on() { total_loss(fm, hvp, cfg.weights) } else { cfg.weights.w_fm * fm };
    let mut grad = Vector::zeros(model.n_params());
    for o in &outcomes {
        grad += o.grad.as_ref().expect("gradients requested");
    }
    Ok((loss, grad / n))
}

/// Trains `model` in place with shuffled mini-batches; validation is the trailing fraction of frames.
pub fn train(data: &TrainingSet, store: Option<&TargetStore>, model: &mut CGModel, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.batch_size == 0 || !(cfg.optimizer.lr > 0.0) || cfg.weights.w_fm < 0.0 || cfg.weights.w_hvp < 0.0 {
        return Err(Error::InvalidArgument("batch size, learning rate and loss weights must be positive".into()));
    }
    let obj = build_objective(data, store, model, cfg)?;
    let n_val = data.validation_len(cfg.validation_fraction);
    let train_idx: Vec<usize> = (0..data.len() - n_val).collect();
    let val_idx: Vec<usize> = (data.len() - n_val..data.len()).collect();
    if train_idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = RngState::new(cfg.seed);
    let mut state = AdamState::new(model.n_params());
    let mut params = model.params();
    let mut history = Vec::new();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);
        let mut term2_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let outcomes = obj.outcomes(model, batch, true)?;
            let n = batch.len() as f64;
            let fm = outcomes.iter().map(|o| o.fm).sum::<f64>() / n;
            let hvp = outcomes.iter().map(|o| o.hvp).sum::<f64>() / n;
            let loss = if obj.hvp_on() { total_loss(fm, hvp, cfg.weights) } else { cfg.weights.w_fm * fm };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "epoch {epoch}, batch {b}: loss_fm={fm:e} loss_hvp={hvp:e}, frames {:?}, |θ|max={:e}",
                    batch.iter().map(|&t| data.frame_indices[t]).collect::<Vec<_>>(),
                    params.iter().fold(0.0f64, |m, p| m.max(p.abs()))
                )));
            }
            let mut grad = Vector::zeros(params.len());
            for o in &outcomes {
                grad += o.grad.as_ref().expect("gradients requested");
                term2_sum += o.term2;
            }
            grad /= n;
            adamw_step(&mut params, grad.as_slice(), &mut state, &cfg.optimizer)?;
            model.set_params(&params).map_err(|_| Error::NonFiniteLoss(format!("parameters diverged at epoch {epoch}, batch {b}")))?;
            steps += 1;
        }
        let term2_norm = cfg.use_covariance.then(|| term2_sum / train_idx.len() as f64);
        for (split, idx) in [(Split::Train, &train_idx), (Split::Validation, &val_idx)] {
            if idx.is_empty() {
                continue;
            }
            let (fm, hvp) = obj.losses(model, idx)?;
            let total = if obj.hvp_on() { total_loss(fm, hvp, cfg.weights) } else { cfg.weights.w_fm * fm };
            let record = EpochRecord {
                epoch,
                split,
                loss_fm: fm,
                loss_hvp: hvp,
                loss_total: total,
                term2_norm: if split == Split::Train { term2_norm } else { None },
            };
            log::info!(
                "epoch {epoch} {split}: fm={fm:.6e} hvp={hvp:.6e} total={total:.6e}{}",
                record.term2_norm.map_or(String::new(), |t| format!(" |term2|={t:.6e}"))
            );
            history.push(record);
        }
    }
    Ok(TrainReport { history, steps })
}
