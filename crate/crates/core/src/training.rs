//! Adam on the empirical per-prefix square loss, with fresh prompts every step.

use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BatchNormState, Tape, Tensor};
use crate::evalshift::Predictor;
use crate::models::{label_tensor, predict_batch, Model, ModelError, MLP_SET_DEPTHS};
use crate::prompting::{Prompt, PromptConfig, PromptError, PromptSampler};
use crate::rng::Domain;

/// Training aborts once the batch loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("predictor failed: {0}")]
    Predictor(String),
    #[error("training diverged at step {step}: loss {loss}, grad norm {grad_norm}, lr {lr}")]
    Diverged {
        step: usize,
        loss: f64,
        grad_norm: f64,
        lr: f64,
        /// Everything logged before the failing step.
        log: Box<TrainLog>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Steps between held-out evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Held-out prompts per evaluation.
    #[serde(default = "default_eval_prompts")]
    pub eval_prompts: usize,
    /// Cap on the global gradient ℓ2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_eval_prompts() -> usize {
    256
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 2000,
            seed: 0,
            eval_every: 500,
            eval_prompts: default_eval_prompts(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Default settings with the learning rate lowered to 1e-4 for the
    /// deepest MLP-set preset.
    pub fn for_mlp_preset(preset: usize) -> Self {
        let mut cfg = Self::default();
        if preset + 1 == MLP_SET_DEPTHS.len() {
            cfg.learning_rate = 1e-4;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.eval_prompts == 0 {
            return Err(TrainError::Config("eval_prompts must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Substream indices of the prompts used at `step`; disjoint across steps.
pub fn batch_indices(step: usize, batch_size: usize) -> Range<u64> {
    let start = (step * batch_size) as u64;
    start..start + batch_size as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> impl Iterator<Item = f32> + '_ {
        self.v.iter().flatten().copied()
    }

    /// One bias-corrected update of every parameter.
    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Mean over prompts and prefixes of `(prediction - y_j)²`.
pub fn loss_on_batch<P: Predictor + ?Sized>(predictor: &P, prompts: &[Prompt]) -> Result<f64, TrainError> {
    let preds = predictor.predict_prompts(prompts).map_err(TrainError::Predictor)?;
    Ok(squared_error(&preds, prompts))
}

fn squared_error(preds: &[Vec<f64>], prompts: &[Prompt]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (row, p) in preds.iter().zip(prompts) {
        for (yhat, y) in row.iter().zip(p.ys.iter()) {
            sum += (yhat - y) * (yhat - y);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Per-prefix mean squared error, `k` entries.
pub fn per_prefix_mse<M: Model>(model: &M, prompts: &[Prompt]) -> Result<Vec<f64>, TrainError> {
    let k = prompts.first().map_or(0, Prompt::k);
    let mut sums = vec![0.0; k];
    for chunk in prompts.chunks(256) {
        let preds = predict_batch(model, chunk)?;
        for (row, p) in preds.iter().zip(chunk) {
            for ((s, yhat), y) in sums.iter_mut().zip(row).zip(p.ys.iter()) {
                *s += (yhat - y) * (yhat - y);
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / prompts.len() as f64).collect())
}

/// Batch loss in training mode (batch statistics for batch norm), leaving
/// the model's running statistics untouched.
pub fn training_mode_loss<M: Model>(model: &M, prompts: &[Prompt]) -> Result<f64, TrainError> {
    let mut bn: Vec<BatchNormState> = model.batchnorm().to_vec();
    bn.iter_mut().for_each(|s| s.set_training(true));
    let mut tape = Tape::<f32>::new();
    let vars = model.params().register(&mut tape, false);
    let pred = model.forward_batch(&mut tape, &vars, &mut bn, prompts)?;
    let target = tape.constant(label_tensor(prompts));
    let loss = tape.mse(pred, target).map_err(ModelError::from)?;
    Ok(tape.value(loss).item().into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Forward, backward and one Adam update on `prompts`. Batch norm runs in
/// training mode and its running statistics are updated. The update is
/// skipped when the loss or gradient is not finite or the loss exceeds
/// [`DIVERGENCE_LOSS`].
pub fn train_step<M: Model>(
    model: &mut M,
    adam: &mut AdamState,
    prompts: &[Prompt],
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<StepStats, TrainError> {
    let mut bn: Vec<BatchNormState> = model.batchnorm().to_vec();
    bn.iter_mut().for_each(|s| s.set_training(true));
    let mut tape = Tape::<f32>::new();
    let vars = model.params().register(&mut tape, true);
    let pred = model.forward_batch(&mut tape, &vars, &mut bn, prompts)?;
    let target = tape.constant(label_tensor(prompts));
    let loss_var = tape.mse(pred, target).map_err(ModelError::from)?;
    let loss: f64 = tape.value(loss_var).item().into();
    let mut grads = tape.backward(loss_var).map_err(ModelError::from)?;
    let mut grad_list: Vec<Tensor<f32>> = vars
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let grad_norm = grad_list
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    let stats = StepStats { loss, grad_norm };
    if !loss.is_finite() || loss > DIVERGENCE_LOSS || !grad_norm.is_finite() {
        return Ok(stats);
    }
    if let Some(cap) = grad_clip {
        if grad_norm > cap {
            let f = (cap / grad_norm) as f32;
            grad_list.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= f));
        }
    }
    adam.update(model.params_mut().tensors_mut(), &grad_list, lr);
    let training: Vec<bool> = model.batchnorm().iter().map(BatchNormState::is_training).collect();
    for ((dst, mut src), was_training) in model.batchnorm_mut().iter_mut().zip(bn).zip(training) {
        src.set_training(was_training);
        *dst = src;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSnapshot {
    pub step: usize,
    pub mse: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub k: usize,
    pub train_loss: Vec<f64>,
    pub snapshots: Vec<EvalSnapshot>,
    /// Not part of the CSV, so logs of identical runs compare equal.
    pub wall_clock_secs: f64,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k && self.train_loss == other.train_loss && self.snapshots == other.snapshots
    }
}

impl TrainLog {
    pub fn final_snapshot(&self) -> Option<&EvalSnapshot> {
        self.snapshots.last()
    }

    /// `step,train_loss,eval_mse_j1..eval_mse_jk`; evaluation columns are
    /// empty on steps without a snapshot. Steps are 1-based; a step-0 row
    /// carries the evaluation before any update.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss");
        for j in 1..=self.k {
            write!(out, ",eval_mse_j{j}").unwrap();
        }
        out.push('\n');
        let mut snaps = self.snapshots.iter().peekable();
        let mut row = |out: &mut String, step: usize, loss: Option<f64>| {
            match loss {
                Some(l) => write!(out, "{step},{l}").unwrap(),
                None => write!(out, "{step},").unwrap(),
            }
            match snaps.next_if(|s| s.step == step) {
                Some(s) => s.mse.iter().for_each(|m| write!(out, ",{m}").unwrap()),
                None => (0..self.k).for_each(|_| out.push(',')),
            }
            out.push('\n');
        };
        row(&mut out, 0, None);
        for (i, &l) in self.train_loss.iter().enumerate() {
            row(&mut out, i + 1, Some(l));
        }
        out
    }
}

/// Progress callback payload.
#[derive(Debug, Clone, Copy)]
pub struct Progress<'a> {
    pub step: usize,
    pub steps: usize,
    pub loss: f64,
    pub snapshot: Option<&'a EvalSnapshot>,
}

pub fn train<M: Model>(model: &mut M, prompt_config: &PromptConfig, config: &TrainConfig) -> Result<TrainLog, TrainError> {
    train_with_progress(model, prompt_config, config, |_| {})
}

/// Trains in place. Step `s` (1-based) uses prompts with substream indices
/// [`batch_indices`]`(s - 1, batch_size)` in the training domain; held-out
/// prompts come from the evaluation domain with the same seed and are
/// scored before the first step, every `eval_every` steps and after the
/// last step.
pub fn train_with_progress<M: Model, F: FnMut(Progress<'_>)>(
    model: &mut M,
    prompt_config: &PromptConfig,
    config: &TrainConfig,
    mut progress: F,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    if prompt_config.d != model.d() {
        return Err(ModelError::Dimension {
            expected: model.d(),
            got: prompt_config.d,
        }
        .into());
    }
    let started = Instant::now();
    let sampler = PromptSampler::new(prompt_config)?;
    let held_out = sampler.sample_many(Domain::Eval, config.seed, 0, config.eval_prompts);
    let mut adam = AdamState::new(model.params().tensors());
    let mut log = TrainLog {
        k: prompt_config.k,
        ..TrainLog::default()
    };
    model.set_training(false);
    log.snapshots.push(EvalSnapshot {
        step: 0,
        mse: per_prefix_mse(model, &held_out)?,
    });
    for step in 1..=config.steps {
        let r = batch_indices(step - 1, config.batch_size);
        let batch = sampler.sample_many(Domain::Train, config.seed, r.start, config.batch_size);
        let stats = train_step(model, &mut adam, &batch, config.learning_rate, config.grad_clip)?;
        if !stats.loss.is_finite() || stats.loss > DIVERGENCE_LOSS || !stats.grad_norm.is_finite() {
            log.wall_clock_secs = started.elapsed().as_secs_f64();
            return Err(TrainError::Diverged {
                step,
                loss: stats.loss,
                grad_norm: stats.grad_norm,
                lr: config.learning_rate,
                log: Box::new(log),
            });
        }
        log.train_loss.push(stats.loss);
        let due = (config.eval_every > 0 && step % config.eval_every == 0) || step == config.steps;
        if due {
            log.snapshots.push(EvalSnapshot {
                step,
                mse: per_prefix_mse(model, &held_out)?,
            });
        }
        progress(Progress {
            step,
            steps: config.steps,
            loss: stats.loss,
            snapshot: if due { log.snapshots.last() } else { None },
        });
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(log)
}
