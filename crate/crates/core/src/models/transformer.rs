use serde::{Deserialize, Serialize};

use super::mlp_set::replace_checked;
use super::params::{truncated_normal, ParamSet};
use super::{check_batch, Arch, Model, ModelError};
use crate::autodiff::{BatchNormState, Scalar, Tape, Tensor, Var};
use crate::prompting::Prompt;
use crate::rng::{Domain, RandomStream};

const INIT_STD: f64 = 0.02;

/// Pre-LN decoder-only transformer with learned positions. Attention is
/// always causal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub max_positions: usize,
}

impl TransformerConfig {
    /// 4 layers, 4 heads, embedding 64, room for `k` pairs.
    pub fn desk(d: usize, k: usize) -> Self {
        Self {
            d,
            n_layers: 4,
            n_heads: 4,
            embed_dim: 64,
            max_positions: 2 * k,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_positions == 0 {
            return Err(ModelError::Config("d, n_layers, n_heads and max_positions must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// `2k` tokens of width `d`: `x_1, (y_1,0,..), x_2, (y_2,0,..), ...`.
/// Predictions are read at the x positions `0, 2, 4, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPrompt {
    pub d: usize,
    pub tokens: Vec<f64>,
    pub readout: Vec<usize>,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len() / self.d.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize(prompt: &Prompt) -> TokenizedPrompt {
    let (k, d) = (prompt.k(), prompt.d());
    let mut tokens = vec![0.0; 2 * k * d];
    for i in 0..k {
        for c in 0..d {
            tokens[2 * i * d + c] = prompt.xs[(i, c)];
        }
        tokens[(2 * i + 1) * d] = prompt.ys[i];
    }
    TokenizedPrompt {
        d,
        tokens,
        readout: (0..k).map(|i| 2 * i).collect(),
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    ln2: (usize, usize),
    fc: (usize, usize),
    out: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Transformer {
    config: TransformerConfig,
    params: ParamSet<f32>,
    no_bn: Vec<BatchNormState>,
    embed: (usize, usize),
    pos: usize,
    blocks: Vec<Block>,
    ln_f: (usize, usize),
    head: (usize, usize),
}

impl Transformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut s = RandomStream::derive(seed, Domain::Init, 1);
        let (d, e) = (config.d, config.embed_dim);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut p = ParamSet::default();
        let mut linear = |p: &mut ParamSet<f32>, name: &str, fan_in: usize, fan_out: usize, std: f64| {
            let w = p.push(format!("{name}.weight"), truncated_normal(&[fan_in, fan_out], std, &mut s));
            let b = p.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
            (w, b)
        };
        let norm = |p: &mut ParamSet<f32>, name: &str| {
            let g = p.push(format!("{name}.gamma"), Tensor::full(&[e], 1.0));
            let b = p.push(format!("{name}.beta"), Tensor::zeros(&[e]));
            (g, b)
        };
        let embed = linear(&mut p, "embed", d, e, INIT_STD);
        let pos_tensor = {
            let mut s = RandomStream::derive(seed, Domain::Init, 2);
            truncated_normal(&[config.max_positions, e], INIT_STD, &mut s)
        };
        let pos = p.push("pos", pos_tensor);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ln1 = norm(&mut p, &format!("block{l}.ln1"));
            let qkv = linear(&mut p, &format!("block{l}.attn.qkv"), e, 3 * e, INIT_STD);
            let proj = linear(&mut p, &format!("block{l}.attn.proj"), e, e, resid_std);
            let ln2 = norm(&mut p, &format!("block{l}.ln2"));
            let fc = linear(&mut p, &format!("block{l}.mlp.fc"), e, 4 * e, INIT_STD);
            let out = linear(&mut p, &format!("block{l}.mlp.out"), 4 * e, e, resid_std);
            blocks.push(Block { ln1, qkv, proj, ln2, fc, out });
        }
        let ln_f = norm(&mut p, "ln_f");
        let head = linear(&mut p, "head", e, 1, INIT_STD);
        Ok(Self {
            config,
            params: p,
            no_bn: Vec::new(),
            embed,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn from_parts(config: TransformerConfig, params: ParamSet<f32>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        replace_checked(&mut model.params, &mut model.no_bn, params, Vec::new())?;
        Ok(model)
    }

    fn linear<T: Scalar>(tape: &mut Tape<T>, vars: &[Var], (w, b): (usize, usize), x: Var) -> Result<Var, ModelError> {
        let h = tape.matmul(x, vars[w])?;
        Ok(tape.add(h, vars[b])?)
    }

    fn attention<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], blk: &Block, x: Var, b: usize, t: usize) -> Result<Var, ModelError> {
        let (e, nh) = (self.config.embed_dim, self.config.n_heads);
        let hd = e / nh;
        let qkv = Self::linear(tape, vars, blk.qkv, x)?;
        let qkv = tape.reshape(qkv, &[b, t, 3, nh, hd])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut split = Vec::with_capacity(3);
        for i in 0..3 {
            let part = tape.index_select(qkv, 0, &[i])?;
            split.push(tape.reshape(part, &[b * nh, t, hd])?);
        }
        let (q, k, v) = (split[0], split[1], split[2]);
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let mask: Vec<bool> = (0..t * t).map(|i| i % t > i / t).collect();
        let scores = tape.masked_fill(scores, &mask, f64::NEG_INFINITY)?;
        let att = tape.softmax(scores)?;
        let y = tape.matmul(att, v)?;
        let y = tape.reshape(y, &[b, nh, t, hd])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        let y = tape.reshape(y, &[b, t, e])?;
        Self::linear(tape, vars, blk.proj, y)
    }

    /// Predictions `[batch, k]` read at the x-token positions.
    pub fn forward_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        batch: &[TokenizedPrompt],
    ) -> Result<Var, ModelError> {
        let d = self.config.d;
        let first = batch.first().ok_or(ModelError::EmptyBatch)?;
        let t = first.len();
        if t > self.config.max_positions {
            return Err(ModelError::SequenceTooLong { tokens: t, max: self.config.max_positions });
        }
        let mut data = Vec::with_capacity(batch.len() * t * d);
        for tok in batch {
            if tok.d != d {
                return Err(ModelError::Dimension { expected: d, got: tok.d });
            }
            if tok.len() != t || tok.readout != first.readout {
                return Err(ModelError::RaggedBatch(t, tok.len()));
            }
            data.extend(tok.tokens.iter().map(|&v| T::from_f64(v)));
        }
        let b = batch.len();
        let x = tape.constant(Tensor::from_vec(&[b, t, d], data));
        let mut h = Self::linear(tape, vars, self.embed, x)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.index_select(vars[self.pos], 0, &positions)?;
        h = tape.add(h, pos)?;
        for blk in &self.blocks {
            let a = tape.layer_norm(h, vars[blk.ln1.0], vars[blk.ln1.1])?;
            let a = self.attention(tape, vars, blk, a, b, t)?;
            h = tape.add(h, a)?;
            let m = tape.layer_norm(h, vars[blk.ln2.0], vars[blk.ln2.1])?;
            let m = Self::linear(tape, vars, blk.fc, m)?;
            let m = tape.gelu(m)?;
            let m = Self::linear(tape, vars, blk.out, m)?;
            h = tape.add(h, m)?;
        }
        let h = tape.layer_norm(h, vars[self.ln_f.0], vars[self.ln_f.1])?;
        let h = tape.index_select(h, 1, &first.readout)?;
        let out = Self::linear(tape, vars, self.head, h)?;
        Ok(tape.reshape(out, &[b, first.readout.len()])?)
    }
}

impl Model for Transformer {
    fn arch(&self) -> Arch {
        Arch::Transformer
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
        &self.no_bn
    }

    fn batchnorm_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.no_bn
    }

    fn config_text(&self) -> String {
        toml::to_string(&self.config).expect("config serializes")
    }

    fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        _bn: &mut [BatchNormState],
        prompts: &[Prompt],
    ) -> Result<Var, ModelError> {
        check_batch(prompts, self.config.d)?;
        let tokens: Vec<TokenizedPrompt> = prompts.iter().map(tokenize).collect();
        self.forward_tokens(tape, vars, &tokens)
    }
}
