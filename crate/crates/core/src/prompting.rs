//! Prompt data model and the linear-Gaussian prompt generator.
//!
//! A prompt is one task `beta` together with `k` input/label pairs
//! `y_i = beta·x_i + eps_i`. The generator draws, in this order: the task
//! (`d` variates), then the inputs row by row (`k·d` normals), then the
//! label noise (`k` normals). Noise draws are made even when `sigma = 0`
//! so that noisy and noiseless configs consume their streams identically.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::rng::{Domain, RandomStream};

pub const PROMPT_MAGIC: &[u8; 4] = b"ICLP";
pub const PROMPT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),
    #[error("{field} is not a valid covariance: {source}")]
    Covariance {
        field: &'static str,
        #[source]
        source: LinalgError,
    },
    #[error("prefix position j={j} outside 1..={k}")]
    PrefixOutOfRange { j: usize, k: usize },
    #[error("could not parse config: {0}")]
    Parse(String),
    #[error("prompt file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Law of the task vector before it is correlated by `task_cov`.
/// Every family is scaled to mean 0 and unit variance per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BetaFamily {
    #[default]
    Gaussian,
    Uniform,
    Laplace,
}

impl BetaFamily {
    pub const ALL: [BetaFamily; 3] = [BetaFamily::Gaussian, BetaFamily::Uniform, BetaFamily::Laplace];

    fn draw(self, stream: &mut RandomStream) -> f64 {
        match self {
            BetaFamily::Gaussian => stream.normal(),
            // U(-√3, √3) has variance 1
            BetaFamily::Uniform => (2.0 * stream.uniform() - 1.0) * 3f64.sqrt(),
            // Laplace(0, b) has variance 2b², so b = 1/√2; inverse CDF on u ∈ (-1/2, 1/2)
            BetaFamily::Laplace => {
                let b = std::f64::consts::FRAC_1_SQRT_2;
                let u = stream.uniform() - 0.5;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }
}

impl fmt::Display for BetaFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BetaFamily::Gaussian => "gaussian",
            BetaFamily::Uniform => "uniform",
            BetaFamily::Laplace => "laplace",
        })
    }
}

impl FromStr for BetaFamily {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            "laplace" => Ok(Self::Laplace),
            other => Err(PromptError::Parse(format!("unknown beta_family '{other}'"))),
        }
    }
}

/// Full description of a prompt distribution.
///
/// Matrices are stored as lists of rows so the config file stays readable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub d: usize,
    pub k: usize,
    pub sigma: f64,
    pub task_cov: Vec<Vec<f64>>,
    pub input_mean: Vec<f64>,
    pub input_cov: Vec<Vec<f64>>,
    #[serde(default)]
    pub beta_family: BetaFamily,
    pub seed: u64,
}

fn identity_rows(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl PromptConfig {
    /// Identity task and input covariances, zero input mean, Gaussian tasks.
    pub fn isotropic(d: usize, k: usize, sigma: f64, seed: u64) -> Self {
        Self {
            d,
            k,
            sigma,
            task_cov: identity_rows(d),
            input_mean: vec![0.0; d],
            input_cov: identity_rows(d),
            beta_family: BetaFamily::Gaussian,
            seed,
        }
    }

    /// Default prompt length for a given dimension (four pairs per input dimension).
    pub fn default_k(d: usize) -> usize {
        4 * d
    }

    pub fn with_beta_family(mut self, family: BetaFamily) -> Self {
        self.beta_family = family;
        self
    }

    pub fn with_task_cov(mut self, cov: &DMatrix<f64>) -> Self {
        self.task_cov = matrix_to_rows(cov);
        self
    }

    pub fn task_cov_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.task_cov)
    }

    pub fn input_cov_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.input_cov)
    }

    /// Checks every structural invariant. Returns the Cholesky factors of
    /// `(task_cov, input_cov)` on success.
    pub fn validate(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), PromptError> {
        if self.d == 0 {
            return Err(PromptError::InvalidConfig("d must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(PromptError::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(PromptError::InvalidConfig(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if self.input_mean.len() != self.d {
            return Err(PromptError::InvalidConfig(format!(
                "input_mean has length {}, expected d={}",
                self.input_mean.len(),
                self.d
            )));
        }
        let task = self.checked_cov("task_cov", &self.task_cov)?;
        let input = self.checked_cov("input_cov", &self.input_cov)?;
        Ok((task, input))
    }

    fn checked_cov(&self, field: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, PromptError> {
        if rows.len() != self.d || rows.iter().any(|r| r.len() != self.d) {
            return Err(PromptError::InvalidConfig(format!(
                "{field} must be {d}x{d}",
                d = self.d
            )));
        }
        let m = rows_to_matrix(rows);
        linalg::check_symmetric(&m, 1e-12).map_err(|source| PromptError::Covariance { field, source })?;
        linalg::cholesky_lower(&m).map_err(|source| PromptError::Covariance { field, source })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("prompt config is always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PromptError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PromptError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// One sampled task with its `k` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub beta: DVector<f64>,
    /// `k x d`, one input per row.
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
}

impl Prompt {
    pub fn d(&self) -> usize {
        self.xs.ncols()
    }

    pub fn k(&self) -> usize {
        self.xs.nrows()
    }
}

/// What a predictor sees at position `j` (1-based): the first `j-1` pairs and
/// the `j`-th input. At `j = 1` the context matrices have zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Prefix {
    pub context_x: DMatrix<f64>,
    pub context_y: DVector<f64>,
    pub query: DVector<f64>,
    pub j: usize,
}

impl Prefix {
    pub fn d(&self) -> usize {
        self.query.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_x.nrows()
    }
}

pub fn prefix(prompt: &Prompt, j: usize) -> Result<Prefix, PromptError> {
    let k = prompt.k();
    if j == 0 || j > k {
        return Err(PromptError::PrefixOutOfRange { j, k });
    }
    Ok(Prefix {
        context_x: prompt.xs.rows(0, j - 1).into_owned(),
        context_y: prompt.ys.rows(0, j - 1).into_owned(),
        query: prompt.xs.row(j - 1).transpose(),
        j,
    })
}

/// A validated config with its covariance factors, ready to draw prompts.
#[derive(Debug, Clone)]
pub struct PromptSampler {
    config: PromptConfig,
    task_chol: DMatrix<f64>,
    input_chol: DMatrix<f64>,
    input_mean: DVector<f64>,
}

impl PromptSampler {
    pub fn new(config: &PromptConfig) -> Result<Self, PromptError> {
        let (task_chol, input_chol) = config.validate()?;
        Ok(Self {
            input_mean: DVector::from_column_slice(&config.input_mean),
            config: config.clone(),
            task_chol,
            input_chol,
        })
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    pub fn sample(&self, stream: &mut RandomStream) -> Prompt {
        let d = self.config.d;
        let k = self.config.k;
        let family = self.config.beta_family;
        let z = DVector::from_fn(d, |_, _| family.draw(stream));
        let beta = &self.task_chol * z;

        let mut xs = DMatrix::<f64>::zeros(k, d);
        let mut z = DVector::<f64>::zeros(d);
        for i in 0..k {
            for v in z.iter_mut() {
                *v = stream.normal();
            }
            let x = &self.input_mean + &self.input_chol * &z;
            xs.row_mut(i).copy_from(&x.transpose());
        }

        let sigma = self.config.sigma;
        let ys = DVector::from_fn(k, |i, _| {
            let noise = stream.normal();
            xs.row(i).transpose().dot(&beta) + sigma * noise
        });
        Prompt { beta, xs, ys }
    }

    /// Prompt number `index` of this config's seed, in the given domain.
    pub fn sample_indexed(&self, domain: Domain, seed: u64, index: u64) -> Prompt {
        self.sample(&mut RandomStream::derive(seed, domain, index))
    }

    /// `count` prompts at consecutive substream indices starting at `first`.
    pub fn sample_many(&self, domain: Domain, seed: u64, first: u64, count: usize) -> Vec<Prompt> {
        (0..count as u64)
            .map(|i| self.sample_indexed(domain, seed, first + i))
            .collect()
    }
}

pub fn sample_prompt(config: &PromptConfig, stream: &mut RandomStream) -> Result<Prompt, PromptError> {
    Ok(PromptSampler::new(config)?.sample(stream))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShiftLabel {
    Id,
    Mild,
    Severe,
    Custom,
}

impl fmt::Display for ShiftLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftLabel::Id => "id",
            ShiftLabel::Mild => "mild",
            ShiftLabel::Severe => "severe",
            ShiftLabel::Custom => "custom",
        })
    }
}

/// Covariate shift of the test inputs: `input_mean = mu_scale · 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    mu_scale: f64,
    label: ShiftLabel,
}

impl ShiftSpec {
    pub const ID: ShiftSpec = ShiftSpec { mu_scale: 0.0, label: ShiftLabel::Id };
    pub const MILD: ShiftSpec = ShiftSpec { mu_scale: 2.0, label: ShiftLabel::Mild };
    pub const SEVERE: ShiftSpec = ShiftSpec { mu_scale: 4.0, label: ShiftLabel::Severe };
    pub const GRID: [ShiftSpec; 3] = [Self::ID, Self::MILD, Self::SEVERE];

    pub fn custom(mu_scale: f64) -> Self {
        Self { mu_scale, label: ShiftLabel::Custom }
    }

    /// Rejects named labels paired with the wrong scale.
    pub fn new(label: ShiftLabel, mu_scale: f64) -> Result<Self, PromptError> {
        let expected = match label {
            ShiftLabel::Id => Some(0.0),
            ShiftLabel::Mild => Some(2.0),
            ShiftLabel::Severe => Some(4.0),
            ShiftLabel::Custom => None,
        };
        match expected {
            Some(c) if c != mu_scale => Err(PromptError::InvalidConfig(format!(
                "shift '{label}' requires mu_scale {c}, got {mu_scale}"
            ))),
            _ => Ok(Self { mu_scale, label }),
        }
    }

    pub fn mu_scale(&self) -> f64 {
        self.mu_scale
    }

    pub fn label(&self) -> ShiftLabel {
        self.label
    }

    /// Display name, e.g. `mild` or `custom(3)`.
    pub fn name(&self) -> String {
        match self.label {
            ShiftLabel::Custom => format!("custom({})", self.mu_scale),
            l => l.to_string(),
        }
    }
}

impl FromStr for ShiftSpec {
    type Err = PromptError;
    /// Accepts `id`, `mild`, `severe` or `custom:<c>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "id" => Ok(Self::ID),
            "mild" => Ok(Self::MILD),
            "severe" => Ok(Self::SEVERE),
            other => {
                let c = other
                    .strip_prefix("custom:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .ok_or_else(|| PromptError::Parse(format!("unknown shift '{other}'")))?;
                Ok(Self::custom(c))
            }
        }
    }
}

/// Same label process, inputs centred at `c · 1`.
pub fn shifted(config: &PromptConfig, shift: ShiftSpec) -> PromptConfig {
    PromptConfig {
        input_mean: vec![shift.mu_scale; config.d],
        ..config.clone()
    }
}

/// Writes prompts in the `ICLP` container:
/// `"ICLP"`, version `u32`, `d u32`, `k u32`, `count u64` (all little-endian),
/// then for each prompt `beta (d)`, `xs (k·d, row-major)`, `ys (k)` as `f64`.
pub fn write_prompts<W: Write>(mut w: W, d: usize, k: usize, prompts: &[Prompt]) -> Result<(), PromptError> {
    w.write_all(PROMPT_MAGIC)?;
    w.write_all(&PROMPT_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&(k as u32).to_le_bytes())?;
    w.write_all(&(prompts.len() as u64).to_le_bytes())?;
    for p in prompts {
        if p.d() != d || p.k() != k {
            return Err(PromptError::Format(format!(
                "prompt of shape d={} k={} in a d={d} k={k} file",
                p.d(),
                p.k()
            )));
        }
        for v in p.beta.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for i in 0..k {
            for j in 0..d {
                w.write_all(&p.xs[(i, j)].to_le_bytes())?;
            }
        }
        for v in p.ys.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_prompts<R: Read>(mut r: R) -> Result<(usize, usize, Vec<Prompt>), PromptError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PROMPT_MAGIC {
        return Err(PromptError::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != PROMPT_FORMAT_VERSION {
        return Err(PromptError::Format(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b4)?;
    let d = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let k = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut next = |r: &mut R| -> Result<f64, PromptError> {
        r.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let mut prompts = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let beta = DVector::from_iterator(d, (0..d).map(|_| next(&mut r)).collect::<Result<Vec<_>, _>>()?);
        let flat = (0..k * d).map(|_| next(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let xs = DMatrix::from_row_slice(k, d, &flat);
        let ys = DVector::from_iterator(k, (0..k).map(|_| next(&mut r)).collect::<Result<Vec<_>, _>>()?);
        prompts.push(Prompt { beta, xs, ys });
    }
    Ok((d, k, prompts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_prompt_is_consistent() {
        let cfg = PromptConfig::isotropic(2, 3, 0.0, 11);
        let p = sample_prompt(&cfg, &mut RandomStream::new(5)).unwrap();
        for i in 0..3 {
            let f = p.xs.row(i).transpose().dot(&p.beta);
            assert_eq!(p.ys[i], f);
        }
    }

    #[test]
    fn same_stream_same_prompt() {
        let cfg = PromptConfig::isotropic(4, 6, 1.0, 3);
        let a = sample_prompt(&cfg, &mut RandomStream::substream(9, 2)).unwrap();
        let b = sample_prompt(&cfg, &mut RandomStream::substream(9, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_worked_example() {
        let cfg = PromptConfig::isotropic(2, 3, 0.5, 1);
        let p = sample_prompt(&cfg, &mut RandomStream::new(1)).unwrap();
        let p3 = prefix(&p, 3).unwrap();
        assert_eq!(p3.context_len(), 2);
        assert_eq!(p3.context_x.row(0), p.xs.row(0));
        assert_eq!(p3.context_x.row(1), p.xs.row(1));
        assert_eq!(p3.context_y.as_slice(), &p.ys.as_slice()[..2]);
        assert_eq!(p3.query, p.xs.row(2).transpose());

        let p1 = prefix(&p, 1).unwrap();
        assert_eq!(p1.context_x.shape(), (0, 2));
        assert_eq!(p1.context_y.len(), 0);
        assert_eq!(p1.query, p.xs.row(0).transpose());
    }

    #[test]
    fn prefix_out_of_range() {
        let cfg = PromptConfig::isotropic(2, 3, 0.0, 1);
        let p = sample_prompt(&cfg, &mut RandomStream::new(1)).unwrap();
        assert!(matches!(prefix(&p, 0), Err(PromptError::PrefixOutOfRange { j: 0, k: 3 })));
        assert!(matches!(prefix(&p, 4), Err(PromptError::PrefixOutOfRange { j: 4, k: 3 })));
    }

    #[test]
    fn shifts_set_input_mean_only() {
        let cfg = PromptConfig::isotropic(10, 40, 1.0, 0);
        assert_eq!(shifted(&cfg, ShiftSpec::ID), cfg);
        let mild = shifted(&cfg, ShiftSpec::MILD);
        assert_eq!(mild.input_mean, vec![2.0; 10]);
        let severe = shifted(&cfg, ShiftSpec::SEVERE);
        assert_eq!(severe.input_mean, vec![4.0; 10]);
        assert_eq!(PromptConfig { input_mean: cfg.input_mean.clone(), ..severe }, cfg);
    }

    #[test]
    fn shift_labels_are_checked() {
        assert!(ShiftSpec::new(ShiftLabel::Mild, 3.0).is_err());
        assert!(ShiftSpec::new(ShiftLabel::Severe, 4.0).is_ok());
        assert_eq!("custom:3".parse::<ShiftSpec>().unwrap().mu_scale(), 3.0);
        assert!("moderate".parse::<ShiftSpec>().is_err());
    }

    #[test]
    fn non_spd_covariance_is_rejected() {
        let mut cfg = PromptConfig::isotropic(2, 3, 0.0, 1);
        cfg.task_cov = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(
            sample_prompt(&cfg, &mut RandomStream::new(0)),
            Err(PromptError::Covariance { field: "task_cov", .. })
        ));
        cfg.task_cov = vec![vec![1.0, 0.1], vec![0.2, 1.0]];
        assert!(matches!(cfg.validate(), Err(PromptError::Covariance { .. })));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = PromptConfig::isotropic(3, 5, 0.25, 42).with_beta_family(BetaFamily::Laplace);
        let text = cfg.to_toml();
        for key in ["d", "k", "sigma", "task_cov", "input_mean", "input_cov", "beta_family", "seed"] {
            assert!(text.contains(&format!("{key} =")), "missing key {key} in\n{text}");
        }
        assert_eq!(PromptConfig::from_toml(&text).unwrap(), cfg);
        assert!(PromptConfig::from_toml(&text.replace("sigma", "noise")).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let cfg = PromptConfig::isotropic(3, 4, 1.0, 0);
        let s = PromptSampler::new(&cfg).unwrap();
        let prompts = s.sample_many(Domain::Prompts, 0, 0, 3);
        let mut buf = Vec::new();
        write_prompts(&mut buf, 3, 4, &prompts).unwrap();
        assert_eq!(&buf[..4], b"ICLP");
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 + 8 + 3 * (3 + 12 + 4) * 8);
        let (d, k, back) = read_prompts(&buf[..]).unwrap();
        assert_eq!((d, k), (3, 4));
        assert_eq!(back, prompts);
        assert!(read_prompts(&buf[..buf.len() - 3]).is_err());
    }
}
