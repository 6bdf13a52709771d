//! Learnable predictors of `y_j` from the prefix `p_j`.
//!
//! Both architectures consume a batch of whole prompts and emit one
//! prediction per prefix (`[batch, k]`), which is what the training loss
//! needs. Single-prefix entry points exist for invariance checks.

pub mod checkpoint;
mod mlp_set;
mod params;
mod transformer;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::gradcheck::{check_gradients, GradCheckReport};
use crate::autodiff::{AutogradError, BatchNormState, Scalar, Tape, Tensor, Var};
use crate::prompting::Prompt;

pub use mlp_set::{MlpSet, MlpSetConfig, MLP_SET_DEPTHS};
pub use params::{kaiming_uniform, truncated_normal, ParamSet};
pub use transformer::{tokenize, TokenizedPrompt, Transformer, TransformerConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("input dimension {got} does not match model dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("sequence of {tokens} tokens exceeds max_positions {max}")]
    SequenceTooLong { tokens: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("prompts in a batch must share k (found {0} and {1})")]
    RaggedBatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    MlpSet,
    Transformer,
}

impl Arch {
    pub fn code(self) -> u32 {
        match self {
            Arch::MlpSet => 1,
            Arch::Transformer => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(Arch::MlpSet),
            2 => Some(Arch::Transformer),
            _ => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::MlpSet => "mlp-set",
            Arch::Transformer => "transformer",
        })
    }
}

/// Common surface of the learnable architectures.
pub trait Model {
    fn arch(&self) -> Arch;
    fn d(&self) -> usize;
    fn params(&self) -> &ParamSet<f32>;
    fn params_mut(&mut self) -> &mut ParamSet<f32>;
    fn batchnorm(&self) -> &[BatchNormState];
    fn batchnorm_mut(&mut self) -> &mut [BatchNormState];
    /// Config echo stored in checkpoints.
    fn config_text(&self) -> String;

    /// Records predictions `[batch, k]` for `prompts` on `tape`. `vars` are
    /// the registered parameters in [`Model::params`] order; batch-norm
    /// layers read and update `bn` according to its mode.
    fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        bn: &mut [BatchNormState],
        prompts: &[Prompt],
    ) -> Result<Var, ModelError>;

    fn set_training(&mut self, training: bool) {
        self.batchnorm_mut().iter_mut().for_each(|s| s.set_training(training));
    }
}

fn check_batch(prompts: &[Prompt], d: usize) -> Result<usize, ModelError> {
    let first = prompts.first().ok_or(ModelError::EmptyBatch)?;
    let k = first.k();
    for p in prompts {
        if p.d() != d {
            return Err(ModelError::Dimension { expected: d, got: p.d() });
        }
        if p.k() != k {
            return Err(ModelError::RaggedBatch(k, p.k()));
        }
    }
    Ok(k)
}

/// Targets `[batch, k]`.
pub fn label_tensor<T: Scalar>(prompts: &[Prompt]) -> Tensor<T> {
    let k = prompts.first().map_or(0, Prompt::k);
    let data = prompts.iter().flat_map(|p| p.ys.iter().map(|&y| T::from_f64(y))).collect();
    Tensor::from_vec(&[prompts.len(), k], data)
}

/// Eval-mode predictions for every prefix of every prompt, computed in `T`.
pub fn predict_batch_as<T: Scalar, M: Model>(model: &M, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, ModelError> {
    let params = model.params().cast::<T>();
    let mut bn: Vec<BatchNormState> = model.batchnorm().to_vec();
    bn.iter_mut().for_each(|s| s.set_training(false));
    let mut tape = Tape::<T>::new();
    let vars = params.register(&mut tape, false);
    let out = model.forward_batch(&mut tape, &vars, &mut bn, prompts)?;
    let k = tape.shape(out)[1];
    Ok(tape.value(out).to_f64_vec().chunks(k.max(1)).map(<[f64]>::to_vec).collect())
}

pub fn predict_batch<M: Model>(model: &M, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, ModelError> {
    predict_batch_as::<f32, M>(model, prompts)
}

/// A trained or freshly initialised model of either architecture.
/// Finite-difference check of the mean-squared-error gradient with respect
/// to every parameter, in double precision. Batch norm runs in training
/// mode with fresh copies of the model's running statistics per evaluation.
pub fn gradcheck_model<M: Model>(
    model: &M,
    prompts: &[Prompt],
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let params: Vec<Tensor<f64>> = model.params().tensors().iter().map(Tensor::cast).collect();
    let mut bn: Vec<BatchNormState> = model.batchnorm().to_vec();
    bn.iter_mut().for_each(|s| s.set_training(true));
    let labels = label_tensor::<f64>(prompts);
    let failure = std::cell::RefCell::new(None);
    let forward = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var, AutogradError> {
        let mut bn = bn.clone();
        let pred = model.forward_batch(tape, vars, &mut bn, prompts).map_err(|e| match e {
            ModelError::Autograd(a) => a,
            other => {
                let msg = other.to_string();
                *failure.borrow_mut() = Some(other);
                AutogradError::Shape { op: "forward", shapes: Vec::new(), detail: msg }
            }
        })?;
        let target = tape.constant(labels.clone());
        tape.mse(pred, target)
    };
    let report = check_gradients(&params, forward, n_coords, h, seed);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(report?)
}

#[derive(Debug, Clone)]
pub enum ModelParams {
    MlpSet(MlpSet),
    Transformer(Transformer),
}

impl ModelParams {
    pub fn arch(&self) -> Arch {
        match self {
            ModelParams::MlpSet(_) => Arch::MlpSet,
            ModelParams::Transformer(_) => Arch::Transformer,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            ModelParams::MlpSet(m) => m.d(),
            ModelParams::Transformer(m) => m.d(),
        }
    }

    pub fn params(&self) -> &ParamSet<f32> {
        match self {
            ModelParams::MlpSet(m) => m.params(),
            ModelParams::Transformer(m) => m.params(),
        }
    }

    pub fn batchnorm(&self) -> &[BatchNormState] {
        match self {
            ModelParams::MlpSet(m) => m.batchnorm(),
            ModelParams::Transformer(m) => m.batchnorm(),
        }
    }

    pub fn config_text(&self) -> String {
        match self {
            ModelParams::MlpSet(m) => m.config_text(),
            ModelParams::Transformer(m) => m.config_text(),
        }
    }

    pub fn predict_batch(&self, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, ModelError> {
        match self {
            ModelParams::MlpSet(m) => predict_batch(m, prompts),
            ModelParams::Transformer(m) => predict_batch(m, prompts),
        }
    }
}
