//! Momentum gradient descent over mini-batches, resumable at any step.
//!
//! Step `s` shuffles with the epoch's own stream and draws the noise of batch
//! slot `b` from stream `s · batch_size + b`, so a run split across several
//! calls reproduces an uninterrupted one exactly.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{draw_noise, record_loss, LossBreakdown, ObjectiveConfig};
use super::model::{BackboneModel, ModelConfig};
use super::nodes::{CategoryPriors, PriorKind};
use crate::error::{Error, Result};
use crate::molecule::PointCloudMolecule;
use crate::stream_rng;
use crate::tape::Tape;

/// Batch loss above which training aborts.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
const SHUFFLE_STREAM: u64 = 1 << 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Reuse the step-0 noise at every step (overfitting checks).
    pub fixed_noise: bool,
    /// Cosine decay of the learning rate to this fraction of `lr` at the last step; 1 keeps it constant.
    pub lr_final_frac: f64,
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, lr: 0.01, momentum: 0.9, grad_clip: 10.0, seed: 0, fixed_noise: false, lr_final_frac: 1.0, log_every: 100 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.grad_clip >= 0.0) || !(0.0..=1.0).contains(&self.lr_final_frac) {
            return Err(Error::Config("need lr >= 0, momentum in [0, 1), grad_clip >= 0, lr_final_frac in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_items: usize) -> usize {
        n_items.div_ceil(self.batch_size)
    }

    /// Learning rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.lr_final_frac >= 1.0 || total <= 1 {
            return self.lr;
        }
        let progress = step as f64 / (total - 1) as f64;
        let f = self.lr_final_frac + (1.0 - self.lr_final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * f
    }
}

/// Everything needed to train a backbone from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub prior: PriorKind,
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            optim: OptimConfig::default(),
            prior: PriorKind::Marginal,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.optim.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Mean predicted variance over the batch's atoms.
    pub mean_sigma2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub momentum: Vec<f64>,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(n_params: usize) -> Self {
        Self { step: 0, momentum: vec![0.0; n_params], history: Vec::new() }
    }
}

/// Loss, gradient and predicted-variance statistics of one item.
#[derive(Debug, Clone)]
pub struct ItemLoss {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
    pub sigma2_sum: f64,
    pub n_atoms: usize,
}

/// Standard objective on one sample with the noise drawn from `rng`.
pub fn sample_loss(
    model: &BackboneModel,
    sample: &PointCloudMolecule,
    priors: &CategoryPriors,
    cfg: &ObjectiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ItemLoss> {
    let draw = draw_noise(sample, &model.vocab, priors, cfg, rng)?;
    let mut tape = Tape::new(&model.params);
    let (heads, loss) = record_loss(&mut tape, model, &draw, cfg)?;
    let grad = tape.backward(loss.total)?;
    let lv = tape.value(heads.logvar);
    Ok(ItemLoss { loss: loss.read(&tape), grad, sigma2_sum: lv.iter().map(|v| v.exp()).sum(), n_atoms: lv.len() })
}

fn clip(grad: &mut [f64], cap: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if cap > 0.0 && norm > cap {
        let s = cap / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Runs optimizer steps until `state.step` reaches `cfg.epochs` epochs over `n_items`.
/// `item_loss(i, rng, model)` scores item `i`; `on_epoch(epoch, model)` runs after
/// each completed epoch.
pub fn run_epochs<F>(
    model: &mut BackboneModel,
    state: &mut TrainState,
    n_items: usize,
    cfg: &OptimConfig,
    item_loss: F,
    on_epoch: &mut dyn FnMut(usize, &BackboneModel) -> Result<()>,
) -> Result<()>
where
    F: Fn(usize, &mut ChaCha8Rng, &BackboneModel) -> Result<ItemLoss> + Sync,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::Empty("training items"));
    }
    if state.momentum.len() != model.n_params() {
        return Err(Error::CheckpointMismatch(format!(
            "optimizer state has {} entries for {} parameters",
            state.momentum.len(),
            model.n_params()
        )));
    }
    let spe = cfg.steps_per_epoch(n_items);
    let total = cfg.epochs * spe;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.step < total {
        let step = state.step;
        let epoch = step / spe;
        if epoch != order_epoch {
            order = (0..n_items).collect();
            order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM + epoch as u64));
            order_epoch = epoch;
        }
        let pos = step % spe;
        let batch = &order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(n_items)];
        let noise_step = if cfg.fixed_noise { 0 } else { step };
        let current: &BackboneModel = model;
        let results: Vec<ItemLoss> = crate::with_thread_pool(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(b, &item)| {
                    let mut rng = stream_rng(cfg.seed, (noise_step * cfg.batch_size + b) as u64);
                    item_loss(item, &mut rng, current)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let scale = 1.0 / results.len() as f64;
        let mut grad = vec![0.0; model.n_params()];
        let mut loss = LossBreakdown::default();
        let (mut s2, mut atoms) = (0.0, 0usize);
        for r in &results {
            for (g, x) in grad.iter_mut().zip(&r.grad) {
                *g += x * scale;
            }
            loss.total += r.loss.total * scale;
            loss.coord += r.loss.coord * scale;
            loss.chi += r.loss.chi * scale;
            loss.atom += r.loss.atom * scale;
            loss.bond += r.loss.bond * scale;
            s2 += r.sigma2_sum;
            atoms += r.n_atoms;
        }
        if !(loss.total.is_finite() && loss.total <= DIVERGENCE_LIMIT) || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("step {step} (epoch {epoch}): batch loss {:e}", loss.total)));
        }
        let grad_norm = clip(&mut grad, cfg.grad_clip);
        let lr = cfg.lr_at(step, total);
        for ((p, v), g) in model.params.iter_mut().zip(state.momentum.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *p -= lr * *v;
        }
        state.history.push(StepRecord { step, epoch, loss, grad_norm, mean_sigma2: s2 / atoms.max(1) as f64 });
        state.step += 1;
        if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
            log::info!("step {} epoch {epoch} loss {:.4} |g| {grad_norm:.3e}", state.step, loss.total);
        }
        if state.step % spe == 0 {
            on_epoch(epoch, model)?;
        }
    }
    Ok(())
}

/// Trains `model` on `data` with the standard objective.
pub fn train(
    model: &mut BackboneModel,
    state: &mut TrainState,
    data: &[PointCloudMolecule],
    priors: &CategoryPriors,
    objective: &ObjectiveConfig,
    optim: &OptimConfig,
) -> Result<()> {
    objective.validate()?;
    for mol in data {
        mol.validate(&model.vocab)?;
    }
    run_epochs(
        model,
        state,
        data.len(),
        optim,
        |i, rng, m| sample_loss(m, &data[i], priors, objective, rng),
        &mut |_, _| Ok(()),
    )
}

/// Exponential moving average of the total loss.
pub fn smoothed_losses(history: &[StepRecord], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(history.len());
    let mut acc: Option<f64> = None;
    for r in history {
        let v = match acc {
            Some(a) => alpha * r.loss.total + (1.0 - alpha) * a,
            None => r.loss.total,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}
