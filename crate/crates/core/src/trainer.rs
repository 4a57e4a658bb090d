//! Two-phase fine-tuning: phase 1 trains only task parameters with the
//! backbone frozen, phase 2 trains everything with a reduced backbone
//! learning rate. AdamW with decoupled weight decay, one cosine cycle per
//! phase, MSE on z-scored labels.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SplitConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::Model;
use crate::parallel::{map_indexed, Execution};
use crate::params::{ParamGroup, ParamStore};
use crate::rssi::Split;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub use crate::dataset::{split_dataset, SplitMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub base_lr: f64,
    pub backbone_lr_scale: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub eta_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub split: SplitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 80,
            phase2_epochs: 120,
            base_lr: 1e-4,
            backbone_lr_scale: 0.1,
            weight_decay: 0.1,
            dropout: 0.1,
            batch_size: 32,
            eta_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            split: SplitConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Every problem, not just the first.
    pub fn issues(&self) -> Vec<String> {
        let mut v = self.split.issues();
        if self.phase1_epochs + self.phase2_epochs == 0 {
            v.push("at least one epoch is required".into());
        }
        if !(self.base_lr > 0.0) {
            v.push(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(self.backbone_lr_scale > 0.0) {
            v.push(format!("backbone_lr_scale must be > 0, got {}", self.backbone_lr_scale));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.base_lr) {
            v.push(format!("eta_min must be in [0, base_lr], got {}", self.eta_min));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("betas must be in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            v.push("eps must be > 0".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn epochs(&self, phase: u8) -> usize {
        if phase == 1 {
            self.phase1_epochs
        } else {
            self.phase2_epochs
        }
    }
}

/// z-score statistics of the training labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub fitted_on: Split,
    pub count: usize,
}

impl Normalizer {
    pub fn fit(labels: &[f64], fitted_on: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("cannot fit a normalizer on no labels".into()));
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let std = (labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(Error::Data("labels have zero variance".into()));
        }
        Ok(Self {
            mean,
            std,
            fitted_on,
            count: labels.len(),
        })
    }

    pub fn norm(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn denorm(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// `(1/N) Σ (ŷ − y)²` on the tape; `pred` holds N values in any 2-D shape.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let n: usize = shape.iter().product();
    if n != target.len() || n == 0 {
        return Err(Error::shape("mse_loss", format!("{n} predictions vs {} targets", target.len())));
    }
    let y = tape.constant(Tensor::new(shape, target.iter().map(|&v| T::from_f64_lossy(v)).collect())?);
    let d = tape.sub(pred, y)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Plain MSE on values.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("mse", format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64)
}

/// `eta_min + ½(base − eta_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64, eta_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Param(format!("step {step} beyond schedule length {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(base);
    }
    let c = (PI * step as f64 / total_steps as f64).cos();
    Ok(eta_min + 0.5 * (base - eta_min) * (1.0 + c))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Moment estimates for the parameters an optimizer covers; `None` marks a
/// parameter outside every optimizer group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, covered: impl Fn(ParamGroup) -> bool) -> Self {
        let zeros = |include: bool, t: &Tensor<T>| include.then(|| Tensor::zeros(t.shape()));
        let m = store
            .entries()
            .iter()
            .map(|e| zeros(covered(e.group), &e.value))
            .collect::<Vec<_>>();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn covers(&self, i: usize) -> bool {
        self.m[i].is_some()
    }
}

/// One AdamW update. Decay `θ ← θ(1 − lr·wd)` is applied first and only to
/// entries flagged for decay, then the bias-corrected adaptive step. Grads
/// for parameters the state does not cover must be `None`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr_by_group: impl Fn(ParamGroup) -> f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} grads, {} states, {} params", grads.len(), state.m.len(), params.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            let e = &params.entries()[i];
            if !state.covers(i) {
                return Err(Error::Contract(format!("gradient for {} outside the optimizer groups", e.name)));
            }
            if g.shape() != e.value.shape() {
                return Err(Error::shape("adamw_step", format!("{}: grad {:?}", e.name, g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", e.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (i, g) in grads.iter().enumerate() {
        let (Some(m), Some(v)) = (state.m[i].as_mut(), state.v[i].as_mut()) else {
            continue;
        };
        let entry = &params.entries()[i];
        let lr = lr_by_group(entry.group);
        let shrink = if entry.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let theta = params.value_mut(crate::params::ParamId(i)).data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for j in 0..theta.len() {
            let gj = g.as_ref().map_or(0.0, |g| g.data()[j].as_f64());
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            theta[j] = T::from_f64_lossy(theta[j].as_f64() * shrink - step);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: u8,
    pub global_step: usize,
    pub task_lr: f64,
    /// `None` while the backbone is frozen.
    pub backbone_lr: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Counted across both phases.
    pub epoch: usize,
    pub phase: u8,
    /// Task-group lr at the epoch's first step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_rmse_db: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,phase,lr,train_loss,val_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.phase, e.lr, e.train_loss, val);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Where a run stands; enough to resume at the next optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: u8,
    pub epoch_in_phase: usize,
    pub batch_in_epoch: usize,
    pub global_step: usize,
    pub epoch_loss_sum: f64,
    pub best_val_rmse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub finished: bool,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            phase: 1,
            epoch_in_phase: 0,
            batch_in_epoch: 0,
            global_step: 0,
            epoch_loss_sum: 0.0,
            best_val_rmse: None,
            best_epoch: None,
            finished: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub progress: Progress,
    pub adam: AdamState<f32>,
    pub best: Option<ParamStore<f32>>,
    pub history: History,
    pub normalizer: Normalizer,
}

/// Hooks for tests and progress reporting.
pub trait TrainObserver {
    fn on_step(&mut self, _rec: &StepRecord, _model: &Model<f32>) {}
    fn on_epoch(&mut self, _rec: &EpochRecord, _model: &Model<f32>) {}
    fn on_phase_end(&mut self, _phase: u8, _model: &Model<f32>) {}
}

impl TrainObserver for () {}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub exec: Execution,
    /// Return after this many optimizer steps in total (for checkpointing).
    pub stop_after_steps: Option<usize>,
}

/// splitmix64 over a small tuple, for reproducible per-step seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn sample_images<'a>(model: &Model<f32>, data: &'a Dataset, i: usize) -> Result<Vec<&'a Tensor<f32>>> {
    let s = &data.samples[i];
    model
        .spec
        .cameras
        .iter()
        .map(|&k| {
            s.images
                .get(k)
                .ok_or_else(|| Error::Data(format!("sample {i} has no camera {k}")))
        })
        .collect()
}

/// Evaluation-mode predictions in normalized units.
pub fn predict_normalized(model: &Model<f32>, data: &Dataset, idx: &[usize], exec: Execution) -> Result<Vec<f64>> {
    map_indexed(exec, idx.len(), |j| {
        let imgs = sample_images(model, data, idx[j])?;
        model.predict(&imgs).map(|v| v as f64)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions_dbm: Vec<f64>,
    pub labels_dbm: Vec<f64>,
    pub report: MetricsReport,
}

/// Forward in evaluation mode, denormalize, and compute metrics in dBm.
pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    split: Split,
    normalizer: &Normalizer,
    exec: Execution,
) -> Result<Evaluation> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let predictions_dbm: Vec<f64> = predict_normalized(model, data, &idx, exec)?
        .into_iter()
        .map(|z| normalizer.denorm(z))
        .collect();
    let labels_dbm = data.labels(&idx);
    let report = metrics::report(&predictions_dbm, &labels_dbm, metrics::DEFAULT_COVERAGE_DB)?;
    Ok(Evaluation {
        predictions_dbm,
        labels_dbm,
        report,
    })
}

fn steps_per_epoch(n_train: usize, batch: usize) -> usize {
    n_train.div_ceil(batch)
}

fn phase_covers(phase: u8) -> impl Fn(ParamGroup) -> bool {
    move |g| phase == 2 || g == ParamGroup::Task
}

/// Fresh state at the start of phase 1 (or phase 2 if phase 1 has no epochs).
pub fn initial_state(model: &Model<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    let normalizer = Normalizer::fit(&data.labels(&data.indices(Split::Train)), Split::Train)?;
    let phase = if cfg.phase1_epochs == 0 { 2 } else { 1 };
    Ok(TrainState {
        progress: Progress {
            phase,
            ..Progress::default()
        },
        adam: AdamState::new(&model.params, phase_covers(phase)),
        best: None,
        history: History::default(),
        normalizer,
    })
}

/// Batch gradient: per-sample tapes run through `exec`, summed in sample
/// order so the result does not depend on scheduling.
pub fn batch_gradient(
    model: &Model<f32>,
    data: &Dataset,
    batch: &[usize],
    targets: &[f64],
    phase: u8,
    dropout: f64,
    seed: u64,
    exec: Execution,
) -> Result<(Vec<Option<Tensor<f32>>>, f64)> {
    let covers = phase_covers(phase);
    let scale = 1.0 / batch.len() as f64;
    let per_sample = map_indexed(exec, batch.len(), |j| -> Result<(Vec<Option<Tensor<f32>>>, f64)> {
        let imgs = sample_images(model, data, batch[j])?;
        let mut s = model.session(|e| covers(e.group), true, dropout, derive_seed(&[seed, j as u64]));
        let out = model.forward(&mut s, &imgs)?;
        let l = mse_loss(&mut s.tape, out.prediction, &targets[j..j + 1])?;
        let value = s.tape.value(l).data()[0] as f64;
        let l = s.tape.scale(l, scale as f32);
        s.tape.backward(l)?;
        Ok((s.take_param_grads(), value))
    });
    let mut total: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
    let mut loss = 0.0;
    for r in per_sample {
        let (grads, value) = r?;
        loss += value * scale;
        for (acc, g) in total.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    Ok((total, loss))
}

fn epoch_order(cfg: &TrainConfig, train: &[usize], global_epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 1, global_epoch as u64])));
    order
}

/// Run (or continue) two-phase training on a dataset whose splits are
/// already tagged. On divergence the model is restored to the best (or
/// last epoch-start) parameters before the error is returned.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    opts: RunOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let val_idx = data.indices(Split::Val);
    let mut st = match state {
        Some(s) => s,
        None => initial_state(model, data, cfg)?,
    };
    let norm = st.normalizer;
    let adam_cfg = AdamConfig::from(cfg);
    let per_epoch = steps_per_epoch(train_idx.len(), cfg.batch_size);
    let mut steps_this_call = 0usize;

    while !st.progress.finished {
        let p = st.progress.clone();
        let phase = p.phase;
        let epochs = cfg.epochs(phase);
        if p.epoch_in_phase >= epochs {
            observer.on_phase_end(phase, model);
            if phase == 1 {
                st.progress.phase = 2;
                st.progress.epoch_in_phase = 0;
                st.progress.batch_in_epoch = 0;
                // Each phase starts a fresh optimizer over its own groups.
                st.adam = AdamState::new(&model.params, phase_covers(2));
            } else {
                st.progress.finished = true;
            }
            continue;
        }
        let global_epoch = if phase == 1 { p.epoch_in_phase } else { cfg.phase1_epochs + p.epoch_in_phase };
        let order = epoch_order(cfg, &train_idx, global_epoch);
        let snapshot = model.params.clone();
        let total_steps = epochs * per_epoch;
        let epoch_lr = cosine_lr(p.epoch_in_phase * per_epoch, total_steps, cfg.base_lr, cfg.eta_min)?;

        for b in p.batch_in_epoch..per_epoch {
            if opts.stop_after_steps.is_some_and(|k| steps_this_call >= k) {
                return Ok(st);
            }
            let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let targets: Vec<f64> = batch.iter().map(|&i| norm.norm(data.samples[i].label_dbm)).collect();
            let step_in_phase = st.progress.epoch_in_phase * per_epoch + b;
            let lr = cosine_lr(step_in_phase, total_steps, cfg.base_lr, cfg.eta_min)?;
            let step_seed = derive_seed(&[cfg.seed, 2, st.progress.global_step as u64]);
            let (grads, loss) =
                batch_gradient(model, data, batch, &targets, phase, cfg.dropout, step_seed, opts.exec)?;
            let bad = if !loss.is_finite() {
                Some(format!("loss {loss}"))
            } else {
                grads
                    .iter()
                    .zip(model.params.entries())
                    .find(|(g, _)| g.as_ref().is_some_and(|g| !g.is_finite()))
                    .map(|(_, e)| format!("non-finite gradient for {}", e.name))
            };
            if let Some(detail) = bad {
                model.params = st.best.clone().unwrap_or(snapshot);
                return Err(Error::Diverged {
                    phase,
                    epoch: global_epoch,
                    step: st.progress.global_step,
                    detail,
                });
            }
            let backbone_lr = lr * cfg.backbone_lr_scale;
            adamw_step(
                &mut model.params,
                &grads,
                &mut st.adam,
                |g| match g {
                    ParamGroup::Task => lr,
                    ParamGroup::Backbone => backbone_lr,
                },
                &adam_cfg,
            )?;
            let rec = StepRecord {
                phase,
                global_step: st.progress.global_step,
                task_lr: lr,
                backbone_lr: (phase == 2).then_some(backbone_lr),
                loss,
            };
            st.history.steps.push(rec);
            observer.on_step(&rec, model);
            st.progress.global_step += 1;
            st.progress.batch_in_epoch = b + 1;
            st.progress.epoch_loss_sum += loss;
            steps_this_call += 1;
        }

        let (val_loss, val_rmse_db) = if val_idx.is_empty() {
            (None, None)
        } else {
            let pred = predict_normalized(model, data, &val_idx, opts.exec)?;
            let target: Vec<f64> = val_idx.iter().map(|&i| norm.norm(data.samples[i].label_dbm)).collect();
            let l = mse(&pred, &target)?;
            (Some(l), Some(l.sqrt() * norm.std))
        };
        let rec = EpochRecord {
            epoch: global_epoch,
            phase,
            lr: epoch_lr,
            train_loss: st.progress.epoch_loss_sum / per_epoch as f64,
            val_loss,
            val_rmse_db,
        };
        log::info!(
            "epoch {} phase {} lr {:.3e} train {:.4} val {}",
            rec.epoch,
            rec.phase,
            rec.lr,
            rec.train_loss,
            rec.val_rmse_db.map_or("-".into(), |v| format!("{v:.3} dB"))
        );
        if let Some(r) = val_rmse_db {
            if st.progress.best_val_rmse.is_none_or(|b| r < b) {
                st.progress.best_val_rmse = Some(r);
                st.progress.best_epoch = Some(global_epoch);
                st.best = Some(model.params.clone());
            }
        }
        st.history.epochs.push(rec);
        observer.on_epoch(&rec, model);
        st.progress.epoch_in_phase += 1;
        st.progress.batch_in_epoch = 0;
        st.progress.epoch_loss_sum = 0.0;
    }
    Ok(st)
}
