//! Experiment specs and the end-to-end reproduction runner.
//!
//! A run trains every model once per noise level, evaluates models and
//! oracles on every (noise level, shift) panel with shared prompts, and
//! writes a self-describing run directory:
//!
//! ```text
//! spec.toml                     echo of the experiment spec that produced the run
//! content_hashes.txt            git-style SHA-256 blob hashes of spec and binary
//! checkpoints/<model>_sigma<σ>.iclm
//! logs/<model>_sigma<σ>.csv     training logs
//! curves/sigma<σ>_<shift>.csv   one evaluation panel each
//! plots/sigma<σ>_<shift>.svg
//! checks.csv                    embedded checks (check_name,statistic,threshold,pass)
//! flags.txt                     deviations worth reporting that are not failures
//! MANIFEST                      "<sha256>  <path>" for every other file, sorted
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evalshift::{self, EvalCurve, EvalError, EvalSetup, NamedModel, OlsPredictor, Predictor, RidgePredictor};
use crate::models::checkpoint::{self, CheckpointError};
use crate::models::{MlpSet, MlpSetConfig, ModelError, ModelParams, Transformer, TransformerConfig, MLP_SET_DEPTHS};
use crate::prompting::{PromptConfig, PromptError, ShiftLabel, ShiftSpec};
use crate::svg::{self, ChartOptions};
use crate::training::{self, Progress, TrainConfig, TrainError, TrainLog};
use crate::verify::{CheckRow, CheckTable};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training {model} at sigma {sigma} failed: {source}")]
    Train {
        model: String,
        sigma: f64,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `contents` to `dir/rel`, creating parent directories.
pub fn write_file(dir: &Path, rel: &str, contents: &[u8]) -> Result<PathBuf, ExperimentError> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&path, contents).map_err(io_err(&path))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Seconds-long smoke configuration for tests.
    Tiny,
    /// `d = 5`, width 128, one MLP-set preset and a 4-layer transformer.
    Desk,
    /// `d = 10`, width 500, all MLP-set presets. Expressible, not fast.
    Full,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Tiny => "tiny",
            Scale::Desk => "desk",
            Scale::Full => "full",
        })
    }
}

impl FromStr for Scale {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(ExperimentError::Spec(format!("unknown scale '{other}' (tiny, desk, full)"))),
        }
    }
}

/// One model in the grid. `steps` and `learning_rate` override the shared
/// training config for this model only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    MlpSet {
        preset: usize,
        width: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        learning_rate: Option<f64>,
    },
    Transformer {
        n_layers: usize,
        n_heads: usize,
        embed_dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        learning_rate: Option<f64>,
    },
}

impl ModelSpec {
    /// Series name used in file names and CSVs, e.g. `mlp-set-p0`.
    pub fn label(&self) -> String {
        match self {
            ModelSpec::MlpSet { preset, .. } => format!("mlp-set-p{preset}"),
            ModelSpec::Transformer { n_layers, .. } => format!("transformer-l{n_layers}"),
        }
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self, ModelSpec::Transformer { .. })
    }

    /// The shared config with this model's overrides applied. The deepest
    /// MLP-set preset defaults to learning rate 1e-4.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let (steps, lr) = match self {
            ModelSpec::MlpSet {
                preset,
                steps,
                learning_rate,
                ..
            } => (*steps, learning_rate.or_else(|| (*preset + 1 == MLP_SET_DEPTHS.len()).then_some(1e-4))),
            ModelSpec::Transformer { steps, learning_rate, .. } => (*steps, *learning_rate),
        };
        if let Some(s) = steps {
            cfg.steps = s;
        }
        if let Some(lr) = lr {
            cfg.learning_rate = lr;
        }
        cfg
    }

    pub fn mlp_config(&self, d: usize) -> Option<Result<MlpSetConfig, ModelError>> {
        match self {
            ModelSpec::MlpSet { preset, width, .. } => Some(MlpSetConfig::preset(*preset, d, *width)),
            _ => None,
        }
    }

    pub fn transformer_config(&self, d: usize, k: usize) -> Option<TransformerConfig> {
        match self {
            ModelSpec::Transformer {
                n_layers,
                n_heads,
                embed_dim,
                ..
            } => Some(TransformerConfig {
                d,
                n_layers: *n_layers,
                n_heads: *n_heads,
                embed_dim: *embed_dim,
                max_positions: 2 * k,
            }),
            _ => None,
        }
    }

    pub fn validate(&self, d: usize, k: usize) -> Result<(), ExperimentError> {
        match self {
            ModelSpec::MlpSet { .. } => {
                self.mlp_config(d).expect("mlp spec")?;
            }
            ModelSpec::Transformer { .. } => {
                self.transformer_config(d, k).expect("transformer spec").validate()?;
            }
        }
        Ok(())
    }

    /// Builds a fresh model from `seed` and trains it.
    pub fn train(
        &self,
        prompt: &PromptConfig,
        config: &TrainConfig,
        progress: impl FnMut(Progress<'_>),
    ) -> Result<(ModelParams, TrainLog), TrainError> {
        match self {
            ModelSpec::MlpSet { .. } => {
                let mut m = MlpSet::new(self.mlp_config(prompt.d).expect("mlp spec")?, config.seed)?;
                let log = training::train_with_progress(&mut m, prompt, config, progress)?;
                Ok((ModelParams::MlpSet(m), log))
            }
            ModelSpec::Transformer { .. } => {
                let cfg = self.transformer_config(prompt.d, prompt.k).expect("transformer spec");
                let mut m = Transformer::new(cfg, config.seed)?;
                let log = training::train_with_progress(&mut m, prompt, config, progress)?;
                Ok((ModelParams::Transformer(m), log))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub n_prompts: usize,
    pub seed: u64,
    /// `id`, `mild`, `severe` or `custom:<c>`.
    pub shifts: Vec<String>,
    pub sigmas: Vec<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n_prompts: 1280,
            seed: 1,
            shifts: vec!["id".into(), "mild".into(), "severe".into()],
            sigmas: vec![0.0, 1.0],
        }
    }
}

/// Everything a reproduction run needs. The `sigma` of `prompt` is replaced
/// by each entry of `eval.sigmas`; models are trained once per noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub output_dir: PathBuf,
    /// Worker threads for training and evaluation cells; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub models: Vec<ModelSpec>,
    pub eval: EvalSpec,
}

impl ExperimentSpec {
    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Tiny => Self {
                name: "tiny".into(),
                output_dir: "runs/tiny".into(),
                workers: 0,
                prompt: PromptConfig::isotropic(3, 8, 0.0, 0),
                train: TrainConfig {
                    steps: 40,
                    batch_size: 16,
                    eval_every: 20,
                    eval_prompts: 32,
                    ..TrainConfig::default()
                },
                models: vec![
                    ModelSpec::MlpSet {
                        preset: 0,
                        width: 16,
                        steps: None,
                        learning_rate: None,
                    },
                    ModelSpec::Transformer {
                        n_layers: 1,
                        n_heads: 2,
                        embed_dim: 8,
                        steps: None,
                        learning_rate: None,
                    },
                ],
                eval: EvalSpec {
                    n_prompts: 64,
                    ..EvalSpec::default()
                },
            },
            Scale::Desk => Self {
                name: "desk".into(),
                output_dir: "runs/desk".into(),
                workers: 0,
                prompt: PromptConfig::isotropic(5, PromptConfig::default_k(5), 0.0, 0),
                train: TrainConfig {
                    steps: DESK_MLP_STEPS,
                    ..TrainConfig::default()
                },
                models: vec![
                    ModelSpec::MlpSet {
                        preset: 0,
                        width: 128,
                        steps: None,
                        learning_rate: None,
                    },
                    ModelSpec::Transformer {
                        n_layers: 4,
                        n_heads: 4,
                        embed_dim: 64,
                        steps: Some(DESK_TRANSFORMER_STEPS),
                        learning_rate: Some(DESK_TRANSFORMER_LR),
                    },
                ],
                eval: EvalSpec::default(),
            },
            Scale::Full => Self {
                name: "full".into(),
                output_dir: "runs/full".into(),
                workers: 0,
                prompt: PromptConfig::isotropic(10, PromptConfig::default_k(10), 0.0, 0),
                train: TrainConfig {
                    steps: 50_000,
                    eval_every: 2000,
                    ..TrainConfig::default()
                },
                models: (0..MLP_SET_DEPTHS.len())
                    .map(|preset| ModelSpec::MlpSet {
                        preset,
                        width: 500,
                        steps: None,
                        learning_rate: None,
                    })
                    .chain([ModelSpec::Transformer {
                        n_layers: 12,
                        n_heads: 8,
                        embed_dim: 256,
                        steps: None,
                        learning_rate: None,
                    }])
                    .collect(),
                eval: EvalSpec::default(),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Parses and validates. Unknown keys are rejected by name.
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let spec: Self = toml::from_str(text).map_err(|e| ExperimentError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn shifts(&self) -> Result<Vec<ShiftSpec>, ExperimentError> {
        self.eval.shifts.iter().map(|s| Ok(s.parse::<ShiftSpec>()?)).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let spec_err = |m: String| Err(ExperimentError::Spec(m));
        self.prompt.validate()?;
        self.train.validate().map_err(|e| ExperimentError::Spec(e.to_string()))?;
        if self.models.is_empty() {
            return spec_err("at least one model is required".into());
        }
        let mut labels: Vec<String> = self.models.iter().map(ModelSpec::label).collect();
        for m in &self.models {
            m.validate(self.prompt.d, self.prompt.k)?;
            m.train_config(&self.train)
                .validate()
                .map_err(|e| ExperimentError::Spec(format!("{}: {e}", m.label())))?;
        }
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return spec_err(format!("model '{}' appears twice", w[0]));
        }
        if self.eval.n_prompts < 2 {
            return spec_err(format!("eval.n_prompts must be at least 2, got {}", self.eval.n_prompts));
        }
        if self.eval.shifts.is_empty() || self.eval.sigmas.is_empty() {
            return spec_err("eval.shifts and eval.sigmas must be non-empty".into());
        }
        self.shifts()?;
        for &s in &self.eval.sigmas {
            if !(s >= 0.0 && s.is_finite()) {
                return spec_err(format!("eval.sigmas entries must be finite and non-negative, got {s}"));
            }
        }
        Ok(())
    }

    /// The training and evaluation prompt distribution at noise level `sigma`.
    pub fn prompt_at(&self, sigma: f64) -> PromptConfig {
        PromptConfig {
            sigma,
            ..self.prompt.clone()
        }
    }
}

/// MLP-set steps in the desk preset (about 11 ms per step at width 128).
pub const DESK_MLP_STEPS: usize = 30_000;
/// Transformer steps in the desk preset (about 0.15 s per step). Held-out
/// error stays near the zero predictor for the first 1500 steps.
pub const DESK_TRANSFORMER_STEPS: usize = 5000;
/// At 1e-3 the desk transformer does not leave the zero-predictor plateau.
pub const DESK_TRANSFORMER_LR: f64 = 3e-4;

/// Git-style blob hash with SHA-256: `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Filesystem-safe rendering of a noise level: `0`, `1`, `0.5`.
pub fn sigma_tag(sigma: f64) -> String {
    format!("sigma{sigma}")
}

pub fn panel_name(sigma: f64, shift: &str) -> String {
    format!("{}_{}", sigma_tag(sigma), shift.replace([':', '(', ')'], "-"))
}

/// Runs `jobs` on up to `workers` threads; results come back in job order.
pub fn run_pool<T: Send, R: Send>(jobs: Vec<T>, workers: usize, f: impl Fn(T) -> R + Sync) -> Vec<R> {
    let n = jobs.len();
    let workers = if workers == 0 {
        std::thread::available_parallelism().map_or(1, |p| p.get())
    } else {
        workers
    }
    .clamp(1, n.max(1));
    let queue: Vec<Mutex<Option<T>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let job = queue[i].lock().unwrap().take().expect("each job runs once");
                let r = f(job);
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });
    results.into_iter().map(|r| r.into_inner().unwrap().expect("every job ran")).collect()
}

/// A trained model at one noise level.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub label: String,
    pub sigma: f64,
    pub model: ModelParams,
    pub log: TrainLog,
}

/// The curves of one (noise level, shift) panel, in predictor order
/// `ridge, ols, models...`.
#[derive(Debug, Clone)]
pub struct Panel {
    pub sigma: f64,
    pub shift: ShiftSpec,
    pub curves: Vec<EvalCurve>,
}

impl Panel {
    pub fn name(&self) -> String {
        panel_name(self.sigma, &self.shift.name())
    }

    pub fn curve(&self, predictor: &str) -> Option<&EvalCurve> {
        self.curves.iter().find(|c| c.predictor == predictor)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub models: Vec<TrainedModel>,
    pub panels: Vec<Panel>,
    pub checks: CheckTable,
    pub flags: Vec<String>,
}

impl RunSummary {
    pub fn passes(&self) -> bool {
        self.checks.passes()
    }

    pub fn panel(&self, sigma: f64, shift: ShiftLabel) -> Option<&Panel> {
        self.panels.iter().find(|p| p.sigma == sigma && p.shift.label() == shift)
    }
}

/// Trains every model at every noise level.
pub fn train_grid(spec: &ExperimentSpec, log: &(dyn Fn(&str) + Sync)) -> Result<Vec<TrainedModel>, ExperimentError> {
    let jobs: Vec<(f64, &ModelSpec)> = spec
        .eval
        .sigmas
        .iter()
        .flat_map(|&s| spec.models.iter().map(move |m| (s, m)))
        .collect();
    run_pool(jobs, spec.workers, |(sigma, m)| {
        let label = m.label();
        let cfg = m.train_config(&spec.train);
        let prompt = spec.prompt_at(sigma);
        log(&format!("training {label} at sigma {sigma} for {} steps", cfg.steps));
        let (model, tlog) = m
            .train(&prompt, &cfg, |p| {
                if let Some(s) = p.snapshot {
                    let last = s.mse.last().copied().unwrap_or(f64::NAN);
                    log(&format!("  {label} sigma {sigma} step {}/{} loss {:.4} held-out final-j mse {last:.4}", p.step, p.steps, p.loss));
                }
            })
            .map_err(|source| ExperimentError::Train {
                model: label.clone(),
                sigma,
                source,
            })?;
        log(&format!("trained {label} at sigma {sigma} in {:.1} s", tlog.wall_clock_secs));
        Ok(TrainedModel {
            label,
            sigma,
            model,
            log: tlog,
        })
    })
    .into_iter()
    .collect()
}

/// Evaluates oracles and the models trained at each panel's noise level.
pub fn evaluate_grid(spec: &ExperimentSpec, models: &[TrainedModel]) -> Result<Vec<Panel>, ExperimentError> {
    let shifts = spec.shifts()?;
    let jobs: Vec<(f64, ShiftSpec)> = spec
        .eval
        .sigmas
        .iter()
        .flat_map(|&s| shifts.iter().map(move |&sh| (s, sh)))
        .collect();
    run_pool(jobs, spec.workers, |(sigma, shift)| {
        let config = spec.prompt_at(sigma);
        let ridge = RidgePredictor::for_config(&config)?;
        let named: Vec<NamedModel> = models
            .iter()
            .filter(|m| m.sigma == sigma)
            .map(|m| NamedModel {
                name: m.label.clone(),
                model: m.model.clone(),
            })
            .collect();
        let mut predictors: Vec<&dyn Predictor> = vec![&ridge, &OlsPredictor];
        predictors.extend(named.iter().map(|m| m as &dyn Predictor));
        let setup = EvalSetup {
            config,
            shift,
            n_prompts: spec.eval.n_prompts,
            seed: spec.eval.seed,
        };
        Ok(Panel {
            sigma,
            shift,
            curves: evalshift::evaluate_many(&predictors, &setup)?,
        })
    })
    .into_iter()
    .collect()
}

fn combined_se(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Checks embedded in every run, plus non-failing flags.
///
/// * With noise, ridge never loses to least squares by more than two
///   standard errors.
/// * For every trained model, final-`j` error is ordered id ≤ mild ≤ severe
///   with two combined standard errors of slack, and severe is at least five
///   times id.
///
/// A transformer doing worse than an MLP-set in distribution is flagged.
pub fn embedded_checks(spec: &ExperimentSpec, panels: &[Panel]) -> (CheckTable, Vec<String>) {
    let mut table = CheckTable::default();
    let mut flags = Vec::new();
    for p in panels.iter().filter(|p| p.sigma > 0.0) {
        if let (Some(r), Some(o)) = (p.curve("ridge"), p.curve("ols")) {
            let worst = (1..=r.k())
                .map(|j| r.at(j).0 - o.at(j).0 - 2.0 * o.at(j).1)
                .fold(f64::NEG_INFINITY, f64::max);
            table.push(CheckRow::at_most(format!("ridge_le_ols_{}", p.name()), worst, 0.0));
        }
    }
    let find = |sigma: f64, label: ShiftLabel| panels.iter().find(|p| p.sigma == sigma && p.shift.label() == label);
    for &sigma in &spec.eval.sigmas {
        let (Some(id), Some(mild), Some(severe)) = (
            find(sigma, ShiftLabel::Id),
            find(sigma, ShiftLabel::Mild),
            find(sigma, ShiftLabel::Severe),
        ) else {
            continue;
        };
        for m in &spec.models {
            let label = m.label();
            let (Some(a), Some(b), Some(c)) = (id.curve(&label), mild.curve(&label), severe.curve(&label)) else {
                continue;
            };
            let ((ia, sa), (ib, sb), (ic, sc)) = (a.last(), b.last(), c.last());
            let order = (ia - ib - 2.0 * combined_se(sa, sb)).max(ib - ic - 2.0 * combined_se(sb, sc));
            let tag = format!("{label}_{}", sigma_tag(sigma));
            table.push(CheckRow::at_most(format!("shift_order_{tag}"), order, 0.0));
            table.push(CheckRow::at_least(format!("severe_over_id_{tag}"), ic / ia, 5.0));
        }
        let last = |spec: &ModelSpec| id.curve(&spec.label()).map(EvalCurve::last);
        for t in spec.models.iter().filter(|m| m.is_transformer()) {
            for m in spec.models.iter().filter(|m| !m.is_transformer()) {
                if let (Some((tm, ts)), Some((mm, _))) = (last(t), last(m)) {
                    if tm > mm + 2.0 * ts {
                        flags.push(format!(
                            "{} final-j id mse {tm:.4} exceeds {} {mm:.4} + 2 SE at {} (ordering reversed)",
                            t.label(),
                            m.label(),
                            sigma_tag(sigma)
                        ));
                    }
                }
            }
        }
    }
    (table, flags)
}

/// Trains, evaluates and writes the full run directory.
pub fn reproduce(spec: &ExperimentSpec, log: &(dyn Fn(&str) + Sync)) -> Result<RunSummary, ExperimentError> {
    spec.validate()?;
    let dir = spec.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let spec_text = spec.to_toml();
    write_file(&dir, "spec.toml", spec_text.as_bytes())?;
    let binary = std::env::current_exe()
        .ok()
        .and_then(|p| fs::read(p).ok())
        .map_or_else(|| "unavailable".to_string(), |b| blob_hash(&b));
    write_file(
        &dir,
        "content_hashes.txt",
        format!("spec {}\nbinary {binary}\n", blob_hash(spec_text.as_bytes())).as_bytes(),
    )?;

    let models = train_grid(spec, log)?;
    for m in &models {
        let stem = format!("{}_{}", m.label, sigma_tag(m.sigma));
        write_file(&dir, &format!("checkpoints/{stem}.iclm"), &checkpoint::encode(&m.model))?;
        write_file(&dir, &format!("logs/{stem}.csv"), m.log.to_csv().as_bytes())?;
    }

    log("evaluating");
    let panels = evaluate_grid(spec, &models)?;
    for p in &panels {
        let name = p.name();
        write_file(&dir, &format!("curves/{name}.csv"), evalshift::curves_to_csv(&p.curves).as_bytes())?;
        let noise = if p.sigma > 0.0 { format!("sigma = {}", p.sigma) } else { "noiseless".into() };
        let chart = svg::render_chart(&p.curves, &ChartOptions::new(format!("{noise}, shift {}", p.shift.name())));
        write_file(&dir, &format!("plots/{name}.svg"), chart.as_bytes())?;
    }

    let (checks, flags) = embedded_checks(spec, &panels);
    write_file(&dir, "checks.csv", checks.to_csv().as_bytes())?;
    let mut flag_text = flags.join("\n");
    if !flag_text.is_empty() {
        flag_text.push('\n');
    }
    write_file(&dir, "flags.txt", flag_text.as_bytes())?;
    write_manifest(&dir)?;
    Ok(RunSummary {
        dir,
        models,
        panels,
        checks,
        flags,
    })
}

/// Writes `MANIFEST` listing every other file under `dir` with its SHA-256.
pub fn write_manifest(dir: &Path) -> Result<String, ExperimentError> {
    let mut rows: Vec<String> = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| ExperimentError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        let name = rel.to_string_lossy().replace('\\', "/");
        if name == "MANIFEST" {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(io_err(entry.path()))?;
        rows.push(format!("{}  {name}", sha256_hex(&bytes)));
    }
    rows.sort_by(|a, b| a[66..].cmp(&b[66..]));
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    write_file(dir, "MANIFEST", text.as_bytes())?;
    Ok(text)
}
