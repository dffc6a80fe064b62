//! AdamW with cosine warmup, gradient clipping and perplexity-based early
//! stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, EncodedPair, ModelConfig, ModelParams};
use crate::params::{decays, Parameters};
use crate::physchem::DescriptorTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Linear warmup length; `None` means 5% of the scheduled steps.
    pub warmup_steps: Option<usize>,
    /// Hard cap on optimizer steps; also shortens the cosine schedule.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    pub patience: usize,
    pub label_smoothing: f64,
    /// Stop once an epoch's mean training loss falls below this value.
    pub target_loss: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            batch_size: 256,
            max_epochs: 100,
            warmup_steps: None,
            max_steps: None,
            clip_norm: 1.0,
            patience: 5,
            label_smoothing: 0.1,
            target_loss: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.max_steps == Some(0) {
            return bad("batch_size, max_epochs and max_steps must be positive");
        }
        if self.clip_norm <= 0.0 || self.patience == 0 {
            return bad("clip_norm and patience must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments, one buffer per parameter tensor in traversal
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let g = grads.named_tensors();
    let mut mismatch = None;
    let mut n = 0;
    params.visit("", &mut |name, t| {
        match g.get(n) {
            Some((gn, gt)) if *gn == name && gt.shape == t.shape => {}
            other => {
                if mismatch.is_none() {
                    mismatch = Some(Error::ShapeMismatch {
                        name,
                        expected: t.shape.clone(),
                        found: other.map(|(_, gt)| gt.shape.clone()).unwrap_or_default(),
                    });
                }
            }
        }
        n += 1;
    });
    if let Some(e) = mismatch {
        return Err(e);
    }
    if n != g.len() || state.m.len() != n || state.v.len() != n {
        return Err(Error::InvalidConfig("optimizer state does not match parameters".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut i = 0;
    params.visit_mut("", &mut |name, p| {
        let grad = &g[i].1.data;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let decay = if decays(&name) { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        for j in 0..p.data.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
            p.data[j] = p.data[j] * decay - lr * update;
        }
        i += 1;
    });
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.sum_squares().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// `exp` of the mean unsmoothed token NLL over non-PAD target positions.
pub fn perplexity(params: &ModelParams, table: &DescriptorTable, split: &[EncodedPair]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let (sum, count) = model::nll_sum(split, params, table, 0.0);
    if count == 0 {
        return Err(Error::EmptySplit);
    }
    Ok((sum / count as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to improve strictly on the
/// best validation perplexity.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, bad: 0, epoch: 0 }
    }

    pub fn observe(&mut self, valid_ppl: f64) -> Decision {
        self.epoch += 1;
        if valid_ppl < self.best {
            self.best = valid_ppl;
            self.best_epoch = self.epoch;
            self.bad = 0;
            Decision::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                Decision::Stop
            } else {
                Decision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best perplexity; 0 before any improvement.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean of the per-step (smoothed) training losses.
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    TargetLoss,
    MaxEpochs,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub lr_trace: Vec<f64>,
    pub total_steps: usize,
    pub scheduled_steps: usize,
    pub warmup_steps: usize,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation perplexity.
    pub best: ModelParams,
    /// Parameters after the final step.
    pub last: ModelParams,
    pub optimizer: AdamState,
    pub report: TrainReport,
}

pub fn train(
    train_set: &[EncodedPair],
    valid_set: &[EncodedPair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    table: &DescriptorTable,
) -> Result<TrainOutcome> {
    train_with(train_set, valid_set, model_cfg, cfg, table, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    train_set: &[EncodedPair],
    valid_set: &[EncodedPair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    table: &DescriptorTable,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut params = ModelParams::init(model_cfg)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let scheduled = {
        let s = per_epoch * cfg.max_epochs;
        cfg.max_steps.map_or(s, |m| m.min(s))
    };
    let warmup = cfg.warmup_steps.unwrap_or((scheduled as f64 * 0.05).round() as usize);

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut lr_trace = Vec::with_capacity(scheduled);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;

    'outer: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            if lr_trace.len() == scheduled {
                stop_reason = StopReason::MaxSteps;
                break;
            }
            let batch: Vec<EncodedPair> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, mut grads) = model::loss_and_grad(&batch, &params, table, cfg.label_smoothing)?;
            clip_gradients(&mut grads, cfg.clip_norm);
            lr = cosine_lr(lr_trace.len(), scheduled, warmup, cfg.lr);
            adamw_step(&mut params, &grads, &mut state, lr, cfg)?;
            if !params.all_finite() {
                return Err(Error::NonFinite { step: state.step });
            }
            lr_trace.push(lr);
            loss_sum += loss;
            steps += 1;
        }
        if steps > 0 {
            let valid_ppl = perplexity(&params, table, valid_set)?;
            let train_loss = loss_sum / steps as f64;
            let rec = EpochRecord { epoch, steps, train_loss, valid_ppl, lr };
            on_epoch(&rec);
            epochs.push(rec);
            match stopper.observe(valid_ppl) {
                Decision::Improved => best.clone_from(&params),
                Decision::Continue => {}
                Decision::Stop => {
                    stop_reason = StopReason::EarlyStopping;
                    break 'outer;
                }
            }
            if cfg.target_loss.is_some_and(|t| train_loss < t) {
                stop_reason = StopReason::TargetLoss;
                break;
            }
        }
        if stop_reason == StopReason::MaxSteps {
            break;
        }
    }
    if stop_reason == StopReason::MaxEpochs && lr_trace.len() == scheduled && scheduled < per_epoch * cfg.max_epochs {
        stop_reason = StopReason::MaxSteps;
    }

    let report = TrainReport {
        epochs,
        total_steps: lr_trace.len(),
        lr_trace,
        scheduled_steps: scheduled,
        warmup_steps: warmup,
        best_epoch: stopper.best_epoch(),
        best_valid_ppl: stopper.best(),
        stop_reason,
    };
    Ok(TrainOutcome { best, last: params, optimizer: state, report })
}
