//! `icl`: command-line driver for the in-context regression workbench.
//!
//! Settings are resolved as built-in defaults, then the experiment or prompt config file
//! (`--spec` / `--config`), then individual flags. Flags are named after the
//! file keys they override.
//!
//! Exit codes: 0 success (all checks pass), 1 a check failed, 2 usage or
//! input error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use icl_core::evalshift::{self, EvalSetup, NamedModel, OlsPredictor, Predictor, RidgePredictor, ZeroPredictor};
use icl_core::experiment::{self, ExperimentSpec, ModelSpec, Scale};
use icl_core::models::checkpoint;
use icl_core::prompting::{self, BetaFamily, PromptConfig, PromptSampler, ShiftSpec};
use icl_core::rng::Domain;
use icl_core::svg::{self, ChartOptions, YScale};
use icl_core::verify;
use mimalloc::MiMalloc;

/// The tape allocates and frees many short-lived buffers per step; the
/// system allocator returns them to the kernel each time.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "icl", version, about = "In-context linear regression workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample prompts and write them to an ICLP binary file.
    Generate(GenerateArgs),
    /// Train one model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate an oracle or a checkpoint and write its curve as CSV.
    Eval(EvalArgs),
    /// Check the closed-form oracles against independent references.
    OracleCheck(OracleCheckArgs),
    /// Train and evaluate the full grid and write a run directory.
    Reproduce(ReproduceArgs),
    /// Render an evaluation CSV as an SVG chart.
    Plot(PlotArgs),
}

/// Prompt distribution keys.
#[derive(Args, Default)]
struct PromptFlags {
    /// Prompt config file (TOML, keys as below).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input dimension; resets covariances to the identity when changed.
    #[arg(long)]
    d: Option<usize>,
    /// Pairs per prompt.
    #[arg(long)]
    k: Option<usize>,
    /// Label noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Task law: gaussian, uniform or laplace.
    #[arg(long)]
    beta_family: Option<BetaFamily>,
    /// Prompt seed.
    #[arg(long)]
    prompt_seed: Option<u64>,
}

impl PromptFlags {
    fn resolve(&self, base: PromptConfig) -> Result<PromptConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => PromptConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
            None => base,
        };
        if let Some(d) = self.d {
            if d != cfg.d {
                let k = self.k.unwrap_or_else(|| PromptConfig::default_k(d));
                cfg = PromptConfig::isotropic(d, k, cfg.sigma, cfg.seed).with_beta_family(cfg.beta_family);
            }
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(s) = self.sigma {
            cfg.sigma = s;
        }
        if let Some(b) = self.beta_family {
            cfg.beta_family = b;
        }
        if let Some(s) = self.prompt_seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    prompt: PromptFlags,
    /// Input shift: id, mild, severe or custom:<c>.
    #[arg(long, default_value = "id")]
    shift: ShiftSpec,
    /// Number of prompts.
    #[arg(long)]
    count: usize,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

/// Training keys.
#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Training seed (model init, training and held-out prompts).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_prompts: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut icl_core::training::TrainConfig) {
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.eval_prompts {
            cfg.eval_prompts = v;
        }
        if self.grad_clip.is_some() {
            cfg.grad_clip = self.grad_clip;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment spec supplying prompt, training and model settings.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Scale preset used when no spec is given.
    #[arg(long, default_value = "desk")]
    scale: String,
    /// Model to train: `mlp-set-p<N>` or `transformer-l<N>` from the experiment,
    /// or any MLP-set preset `mlp-set-p0`..`mlp-set-p4`.
    #[arg(long, default_value = "mlp-set-p0")]
    model: String,
    /// MLP-set width (for models not listed in the experiment).
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[command(flatten)]
    prompt: PromptFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV path.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// `ridge`, `ols`, `zero`, or a checkpoint path.
    #[arg(long)]
    predictor: String,
    /// Series name for checkpoints (defaults to the architecture).
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "id")]
    shift: ShiftSpec,
    #[command(flatten)]
    prompt: PromptFlags,
    #[arg(long, default_value_t = 1280)]
    n_prompts: usize,
    /// Evaluation seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV output path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompts per Monte-Carlo dominance run.
    #[arg(long, default_value_t = 2000)]
    n_prompts: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Experiment spec file; overrides the scale preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Scale preset: tiny, desk or full.
    #[arg(long, default_value = "desk")]
    scale: String,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    prompt: PromptFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Evaluation prompts per panel.
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Comma-separated shift grid.
    #[arg(long, value_delimiter = ',')]
    shifts: Option<Vec<String>>,
    /// Comma-separated noise grid.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// Only validate and print the resolved spec.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Evaluation CSV.
    #[arg(long)]
    csv: PathBuf,
    /// SVG output path; defaults to the CSV path with an .svg extension.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    title: Option<String>,
    /// Linear instead of log y-axis.
    #[arg(long)]
    linear: bool,
}

/// Error carrying the exit code it maps to.
struct Failure(u8, String);

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure(2, msg.to_string())
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| usage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn base_spec(spec: &Option<PathBuf>, scale: &str) -> Result<ExperimentSpec, Failure> {
    match spec {
        Some(p) => ExperimentSpec::load(p).map_err(usage),
        None => Ok(ExperimentSpec::preset(scale.parse::<Scale>().map_err(usage)?)),
    }
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let cfg = a.prompt.resolve(PromptConfig::isotropic(5, 20, 0.0, 0)).map_err(usage)?;
    let sampler = PromptSampler::new(&prompting::shifted(&cfg, a.shift)).map_err(usage)?;
    let prompts = sampler.sample_many(Domain::Prompts, cfg.seed, 0, a.count);
    let mut buf = Vec::new();
    prompting::write_prompts(&mut buf, cfg.d, cfg.k, &prompts).map_err(usage)?;
    write_out(&a.out, &buf)?;
    eprintln!("wrote {} prompts (d={}, k={}) to {}", a.count, cfg.d, cfg.k, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let spec = base_spec(&a.spec, &a.scale)?;
    let prompt = a.prompt.resolve(spec.prompt.clone()).map_err(usage)?;
    let model = match spec.models.iter().find(|m| m.label() == a.model) {
        Some(m) => m.clone(),
        None => match a.model.strip_prefix("mlp-set-p").and_then(|p| p.parse::<usize>().ok()) {
            Some(preset) => ModelSpec::MlpSet {
                preset,
                width: a.width,
                steps: None,
                learning_rate: None,
            },
            None => return Err(usage(format!("model '{}' is not in the experiment", a.model))),
        },
    };
    model.validate(prompt.d, prompt.k).map_err(usage)?;
    let mut cfg = model.train_config(&spec.train);
    a.train.apply(&mut cfg);
    cfg.validate().map_err(usage)?;
    let label = model.label();
    let result = model.train(&prompt, &cfg, |p| {
        if let Some(s) = p.snapshot {
            eprintln!("{label} step {}/{} loss {:.4} held-out final-j mse {:.4}", p.step, p.steps, p.loss, s.mse.last().unwrap_or(&f64::NAN));
        }
    });
    let (trained, log) = match result {
        Ok(r) => r,
        Err(icl_core::training::TrainError::Diverged { step, loss, grad_norm, lr, log }) => {
            if let Some(path) = &a.log {
                write_out(path, log.to_csv().as_bytes())?;
            }
            return Err(Failure(
                1,
                format!("training diverged at step {step}: loss {loss}, grad norm {grad_norm}, lr {lr}"),
            ));
        }
        Err(e) => return Err(usage(e)),
    };
    write_out(&a.out, &checkpoint::encode(&trained))?;
    if let Some(path) = &a.log {
        write_out(path, log.to_csv().as_bytes())?;
    }
    eprintln!("trained {label} in {:.1} s, checkpoint {}", log.wall_clock_secs, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = a.prompt.resolve(PromptConfig::isotropic(5, 20, 0.0, 0)).map_err(usage)?;
    let owned: Box<dyn Predictor> = match a.predictor.as_str() {
        "ridge" => Box::new(RidgePredictor::for_config(&cfg).map_err(usage)?),
        "ols" => Box::new(OlsPredictor),
        "zero" => Box::new(ZeroPredictor),
        path => {
            let path = Path::new(path);
            if !path.exists() {
                return Err(usage(format!("checkpoint {} not found (or use ridge, ols, zero)", path.display())));
            }
            let model = checkpoint::load_checkpoint(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            if model.d() != cfg.d {
                return Err(usage(format!("checkpoint has d={}, prompts have d={}", model.d(), cfg.d)));
            }
            let name = a.name.clone().unwrap_or_else(|| model.arch().to_string());
            Box::new(NamedModel { name, model })
        }
    };
    let setup = EvalSetup {
        config: cfg,
        shift: a.shift,
        n_prompts: a.n_prompts,
        seed: a.seed,
    };
    let curves = evalshift::evaluate_many(&[owned.as_ref()], &setup).map_err(usage)?;
    let csv = evalshift::curves_to_csv(&curves);
    match &a.out {
        Some(p) => write_out(p, csv.as_bytes()),
        None => io::stdout().write_all(csv.as_bytes()).map_err(usage),
    }
}

fn oracle_check(a: OracleCheckArgs) -> Result<(), Failure> {
    let table = verify::run_all(a.seed, a.n_prompts).map_err(usage)?;
    print!("{}", table.to_text());
    if let Some(p) = &a.csv {
        write_out(p, table.to_csv().as_bytes())?;
    }
    if table.passes() {
        Ok(())
    } else {
        Err(Failure(1, "oracle checks failed".into()))
    }
}

fn reproduce(a: ReproduceArgs) -> Result<(), Failure> {
    let mut spec = base_spec(&a.spec, &a.scale)?;
    spec.prompt = a.prompt.resolve(spec.prompt.clone()).map_err(usage)?;
    a.train.apply(&mut spec.train);
    if a.train.steps.is_some() {
        // a global step count wins over per-model overrides
        for m in &mut spec.models {
            match m {
                ModelSpec::MlpSet { steps, .. } | ModelSpec::Transformer { steps, .. } => *steps = None,
            }
        }
    }
    if let Some(d) = a.output_dir {
        spec.output_dir = d;
    }
    if let Some(w) = a.workers {
        spec.workers = w;
    }
    if let Some(n) = a.n_prompts {
        spec.eval.n_prompts = n;
    }
    if let Some(s) = a.eval_seed {
        spec.eval.seed = s;
    }
    if let Some(s) = a.shifts {
        spec.eval.shifts = s;
    }
    if let Some(s) = a.sigmas {
        spec.eval.sigmas = s;
    }
    spec.validate().map_err(usage)?;
    if a.dry_run {
        print!("{}", spec.to_toml());
        return Ok(());
    }
    let summary = experiment::reproduce(&spec, &|line| eprintln!("{line}")).map_err(usage)?;
    print!("{}", summary.checks.to_text());
    for f in &summary.flags {
        println!("FLAG {f}");
    }
    println!("run directory: {}", summary.dir.display());
    if summary.passes() {
        Ok(())
    } else {
        Err(Failure(1, "embedded checks failed".into()))
    }
}

fn plot(a: PlotArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.csv).map_err(|e| usage(format!("{}: {e}", a.csv.display())))?;
    let curves = evalshift::curves_from_csv(&text).map_err(usage)?;
    let title = a.title.unwrap_or_else(|| match curves.first() {
        Some(c) => format!("sigma = {}, shift {}", c.sigma, c.shift),
        None => String::new(),
    });
    let mut options = ChartOptions::new(title);
    if a.linear {
        options.y_scale = YScale::Linear;
    }
    let out = a.out.unwrap_or_else(|| a.csv.with_extension("svg"));
    write_out(&out, svg::render_chart(&curves, &options).as_bytes())?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::OracleCheck(a) => oracle_check(a),
        Command::Reproduce(a) => reproduce(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
