use serde::{Deserialize, Serialize};

use super::params::{kaiming_uniform, ParamSet};
use super::{check_batch, Arch, Model, ModelError};
use crate::autodiff::{BatchNormState, Scalar, Tape, Tensor, Var};
use crate::prompting::{Prefix, Prompt};
use crate::rng::{Domain, RandomStream};

/// Total depths of the five presets, indexed 0..=4.
pub const MLP_SET_DEPTHS: [usize; 5] = [4, 5, 10, 17, 26];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSetConfig {
    pub d: usize,
    pub phi_depth: usize,
    pub rho_depth: usize,
    pub psi_depth: usize,
    pub width: usize,
    #[serde(default = "default_true")]
    pub batchnorm: bool,
}

fn default_true() -> bool {
    true
}

impl MlpSetConfig {
    /// Splits the preset depth as (1, 1, 2) plus extra layers handed out
    /// round-robin in the order φ, ρ, ψ.
    pub fn preset(index: usize, d: usize, width: usize) -> Result<Self, ModelError> {
        let total = *MLP_SET_DEPTHS
            .get(index)
            .ok_or_else(|| ModelError::Config(format!("MLP-set preset {index} does not exist (0..=4)")))?;
        let mut depths = [1, 1, 2];
        for i in 0..total - 4 {
            depths[i % 3] += 1;
        }
        let cfg = Self {
            d,
            phi_depth: depths[0],
            rho_depth: depths[1],
            psi_depth: depths[2],
            width,
            batchnorm: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_depth(&self) -> usize {
        self.phi_depth + self.rho_depth + self.psi_depth
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.width == 0 {
            return Err(ModelError::Config("d and width must be at least 1".into()));
        }
        if self.phi_depth == 0 || self.rho_depth == 0 || self.psi_depth == 0 {
            return Err(ModelError::Config("phi, rho and psi need at least one layer each".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: usize,
    b: usize,
    /// `(gamma, beta, state index)` when followed by batch norm.
    bn: Option<(usize, usize, usize)>,
    relu: bool,
}

/// `ψ(ρ(mean_i φ(x_i, y_i)), x_j)`.
#[derive(Debug, Clone)]
pub struct MlpSet {
    config: MlpSetConfig,
    params: ParamSet<f32>,
    bn: Vec<BatchNormState>,
    phi: Vec<Layer>,
    rho: Vec<Layer>,
    psi: Vec<Layer>,
}

impl MlpSet {
    pub fn new(config: MlpSetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut stream = RandomStream::derive(seed, Domain::Init, 0);
        let (d, w) = (config.d, config.width);
        let mut params = ParamSet::default();
        let mut bn = Vec::new();
        let mut build = |name: &str, dims: Vec<(usize, usize)>, last_is_output: bool| -> Vec<Layer> {
            let n = dims.len();
            dims.into_iter()
                .enumerate()
                .map(|(i, (fan_in, fan_out))| {
                    let hidden = !(last_is_output && i + 1 == n);
                    let wi = params.push(format!("{name}.{i}.weight"), kaiming_uniform(fan_in, fan_out, &mut stream));
                    let bi = params.push(format!("{name}.{i}.bias"), Tensor::zeros(&[fan_out]));
                    let norm = (hidden && config.batchnorm).then(|| {
                        let g = params.push(format!("{name}.{i}.bn.gamma"), Tensor::full(&[fan_out], 1.0));
                        let b = params.push(format!("{name}.{i}.bn.beta"), Tensor::zeros(&[fan_out]));
                        bn.push(BatchNormState::new(fan_out));
                        (g, b, bn.len() - 1)
                    });
                    Layer { w: wi, b: bi, bn: norm, relu: hidden }
                })
                .collect()
        };
        let phi_dims = (0..config.phi_depth).map(|i| (if i == 0 { d + 1 } else { w }, w)).collect();
        let phi = build("phi", phi_dims, false);
        let rho = build("rho", vec![(w, w); config.rho_depth], false);
        let psi_dims = (0..config.psi_depth)
            .map(|i| {
                let fan_in = if i == 0 { w + d } else { w };
                let fan_out = if i + 1 == config.psi_depth { 1 } else { w };
                (fan_in, fan_out)
            })
            .collect();
        let psi = build("psi", psi_dims, true);
        Ok(Self { config, params, bn, phi, rho, psi })
    }

    pub fn config(&self) -> &MlpSetConfig {
        &self.config
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(
        config: MlpSetConfig,
        params: ParamSet<f32>,
        bn: Vec<BatchNormState>,
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        replace_checked(&mut model.params, &mut model.bn, params, bn)?;
        Ok(model)
    }

    fn stack<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        bn: &mut [BatchNormState],
        layers: &[Layer],
        mut h: Var,
    ) -> Result<Var, ModelError> {
        for layer in layers {
            h = tape.matmul(h, vars[layer.w])?;
            h = tape.add(h, vars[layer.b])?;
            if let Some((g, b, s)) = layer.bn {
                h = tape.batchnorm(h, vars[g], vars[b], &mut bn[s])?;
            }
            if layer.relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn head<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        bn: &mut [BatchNormState],
        pooled: Var,
        queries: Tensor<T>,
    ) -> Result<Var, ModelError> {
        let r = self.stack(tape, vars, bn, &self.rho, pooled)?;
        let q = tape.constant(queries);
        let z = tape.concat(r, q)?;
        Ok(self.stack(tape, vars, bn, &self.psi, z)?)
    }

    /// Predictions `[n]` for prefixes that all share the same `j`, using a
    /// direct mean over each context (no prefix sharing).
    pub fn forward_prefixes<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        bn: &mut [BatchNormState],
        prefixes: &[Prefix],
    ) -> Result<Var, ModelError> {
        let d = self.config.d;
        let first = prefixes.first().ok_or(ModelError::EmptyBatch)?;
        let (n, ctx) = (prefixes.len(), first.context_len());
        for p in prefixes {
            if p.d() != d || p.context_x.ncols() != d {
                return Err(ModelError::Dimension { expected: d, got: p.d() });
            }
            if p.context_len() != ctx {
                return Err(ModelError::RaggedBatch(ctx, p.context_len()));
            }
        }
        let pooled = if ctx == 0 {
            tape.constant(Tensor::zeros(&[n, self.config.width]))
        } else {
            let mut pairs = Vec::with_capacity(n * ctx * (d + 1));
            for p in prefixes {
                for i in 0..ctx {
                    pairs.extend((0..d).map(|c| T::from_f64(p.context_x[(i, c)])));
                    pairs.push(T::from_f64(p.context_y[i]));
                }
            }
            let x = tape.constant(Tensor::from_vec(&[n * ctx, d + 1], pairs));
            let h = self.stack(tape, vars, bn, &self.phi, x)?;
            let h = tape.reshape(h, &[n, ctx, self.config.width])?;
            tape.mean_over_axis(h, 1)?
        };
        let queries = prefixes.iter().flat_map(|p| p.query.iter().map(|&v| T::from_f64(v))).collect();
        let out = self.head(tape, vars, bn, pooled, Tensor::from_vec(&[n, d], queries))?;
        Ok(tape.reshape(out, &[n])?)
    }

    /// Eval-mode prediction for one prefix, computed in `T`.
    pub fn predict_prefix_as<T: Scalar>(&self, prefix: &Prefix) -> Result<f64, ModelError> {
        let params = self.params.cast::<T>();
        let mut bn = self.bn.clone();
        bn.iter_mut().for_each(|s| s.set_training(false));
        let mut tape = Tape::<T>::new();
        let vars = params.register(&mut tape, false);
        let out = self.forward_prefixes(&mut tape, &vars, &mut bn, std::slice::from_ref(prefix))?;
        Ok(tape.value(out).data()[0].as_f64())
    }

    pub fn predict_prefix(&self, prefix: &Prefix) -> Result<f64, ModelError> {
        self.predict_prefix_as::<f32>(prefix)
    }
}

impl Model for MlpSet {
    fn arch(&self) -> Arch {
        Arch::MlpSet
    }

    fn d(&self) -> usize {
        self.config.d
    }

    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn batchnorm(&self) -> &[BatchNormState] {
        &self.bn
    }

    fn batchnorm_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    fn config_text(&self) -> String {
        toml::to_string(&self.config).expect("config serializes")
    }

    /// One φ pass over all pairs, exclusive running means, then ρ and ψ on
    /// every prefix at once. Batch-norm statistics for φ span all
    /// (prompt, pair) rows; for ρ and ψ all (prompt, prefix) rows.
    fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        bn: &mut [BatchNormState],
        prompts: &[Prompt],
    ) -> Result<Var, ModelError> {
        let d = self.config.d;
        let k = check_batch(prompts, d)?;
        let b = prompts.len();
        let mut pairs = Vec::with_capacity(b * k * (d + 1));
        let mut queries = Vec::with_capacity(b * k * d);
        for p in prompts {
            for i in 0..k {
                let row = (0..d).map(|c| T::from_f64(p.xs[(i, c)]));
                pairs.extend(row.clone());
                pairs.push(T::from_f64(p.ys[i]));
                queries.extend(row);
            }
        }
        let x = tape.constant(Tensor::from_vec(&[b * k, d + 1], pairs));
        let h = self.stack(tape, vars, bn, &self.phi, x)?;
        let h = tape.reshape(h, &[b, k, self.config.width])?;
        let pooled = tape.prefix_mean(h)?;
        let pooled = tape.reshape(pooled, &[b * k, self.config.width])?;
        let out = self.head(tape, vars, bn, pooled, Tensor::from_vec(&[b * k, d], queries))?;
        Ok(tape.reshape(out, &[b, k])?)
    }
}

pub(super) fn replace_checked(
    params: &mut ParamSet<f32>,
    bn: &mut [BatchNormState],
    new_params: ParamSet<f32>,
    new_bn: Vec<BatchNormState>,
) -> Result<(), ModelError> {
    if new_params.names() != params.names() {
        return Err(ModelError::Config("parameter names do not match the architecture".into()));
    }
    for ((name, old), new) in params.iter().zip(new_params.tensors()) {
        if old.shape() != new.shape() {
            return Err(ModelError::Config(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                new.shape(),
                old.shape()
            )));
        }
    }
    if new_bn.len() != bn.len() || new_bn.iter().zip(bn.iter()).any(|(a, b)| a.features() != b.features()) {
        return Err(ModelError::Config("batch-norm layout does not match the architecture".into()));
    }
    *params = new_params;
    bn.clone_from_slice(&new_bn);
    Ok(())
}
