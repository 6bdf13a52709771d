//! Per-prefix risk curves under in-distribution and shifted test prompts.

use std::fmt::Write as _;

use thiserror::Error;

use crate::models::ModelParams;
use crate::oracles::{ols_predict, OracleError, RidgeOracle};
use crate::prompting::{prefix, shifted, Prompt, PromptConfig, PromptError, PromptSampler, ShiftSpec};
use crate::rng::Domain;
use crate::stats::MeanAccumulator;

/// Prompts handed to a predictor at once.
const CHUNK: usize = 256;

/// Ratios are only taken where the reference risk exceeds this.
pub const RATIO_FLOOR: f64 = 1e-9;

pub const CSV_HEADER: &str = "predictor,shift,sigma,j,mse_mean,mse_stderr,n_prompts,seed";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictor '{predictor}' failed on prompt {index} (seed {seed}): {detail}")]
    Predictor {
        predictor: String,
        index: usize,
        seed: u64,
        detail: String,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("curves do not share a grid: {0}")]
    Mismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed curve CSV at line {line}: {detail}")]
    Csv { line: usize, detail: String },
}

/// Anything that maps whole prompts to one prediction per prefix.
pub trait Predictor {
    fn name(&self) -> String;
    /// Row `i` holds the `k` predictions for `prompts[i]`.
    fn predict_prompts(&self, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, String>;
}

fn per_prefix<F>(prompts: &[Prompt], mut f: F) -> Result<Vec<Vec<f64>>, String>
where
    F: FnMut(&crate::prompting::Prefix) -> Result<f64, String>,
{
    prompts
        .iter()
        .map(|p| {
            (1..=p.k())
                .map(|j| f(&prefix(p, j).map_err(|e| e.to_string())?))
                .collect()
        })
        .collect()
}

/// Posterior-mean predictor; at `sigma = 0` the noiseless limit.
#[derive(Debug, Clone)]
pub struct RidgePredictor(pub RidgeOracle);

impl RidgePredictor {
    pub fn for_config(config: &PromptConfig) -> Result<Self, EvalError> {
        Ok(Self(RidgeOracle::new(config.sigma, &config.task_cov_matrix())?))
    }
}

impl Predictor for RidgePredictor {
    fn name(&self) -> String {
        "ridge".into()
    }

    fn predict_prompts(&self, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, String> {
        per_prefix(prompts, |p| self.0.predict(p).map_err(|e| e.to_string()))
    }
}

/// Minimum-norm least squares.
#[derive(Debug, Clone, Copy, Default)]
pub struct OlsPredictor;

impl Predictor for OlsPredictor {
    fn name(&self) -> String {
        "ols".into()
    }

    fn predict_prompts(&self, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, String> {
        per_prefix(prompts, |p| Ok(ols_predict(p)))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn name(&self) -> String {
        "zero".into()
    }

    fn predict_prompts(&self, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, String> {
        Ok(prompts.iter().map(|p| vec![0.0; p.k()]).collect())
    }
}

impl Predictor for ModelParams {
    fn name(&self) -> String {
        self.arch().to_string()
    }

    fn predict_prompts(&self, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, String> {
        self.predict_batch(prompts).map_err(|e| e.to_string())
    }
}

/// A trained model under a chosen series name.
#[derive(Debug, Clone)]
pub struct NamedModel {
    pub name: String,
    pub model: ModelParams,
}

impl Predictor for NamedModel {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict_prompts(&self, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, String> {
        self.model.predict_prompts(prompts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    pub predictor: String,
    pub shift: String,
    pub sigma: f64,
    pub mse_mean: Vec<f64>,
    pub mse_stderr: Vec<f64>,
    pub n_prompts: usize,
    pub seed: u64,
}

impl EvalCurve {
    pub fn k(&self) -> usize {
        self.mse_mean.len()
    }

    /// `(mean, stderr)` at the 1-based prefix length `j`.
    pub fn at(&self, j: usize) -> (f64, f64) {
        (self.mse_mean[j - 1], self.mse_stderr[j - 1])
    }

    pub fn last(&self) -> (f64, f64) {
        self.at(self.k())
    }

    pub fn write_csv_rows(&self, out: &mut String) {
        for j in 1..=self.k() {
            let (m, s) = self.at(j);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.predictor, self.shift, self.sigma, j, m, s, self.n_prompts, self.seed
            )
            .unwrap();
        }
    }
}

/// Header plus one row per (curve, j).
pub fn curves_to_csv(curves: &[EvalCurve]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in curves {
        c.write_csv_rows(&mut out);
    }
    out
}

/// Inverse of [`curves_to_csv`]. Rows of one curve must be contiguous and
/// ordered by `j`.
pub fn curves_from_csv(text: &str) -> Result<Vec<EvalCurve>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(EvalError::Csv {
                line: 1,
                detail: format!("expected header '{CSV_HEADER}'"),
            })
        }
    }
    let mut curves: Vec<EvalCurve> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| EvalError::Csv { line: i + 1, detail };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("'{s}': {e}")));
        let int = |s: &str| s.parse::<u64>().map_err(|e| err(format!("'{s}': {e}")));
        let (sigma, j, m, s, n, seed) = (num(f[2])?, int(f[3])?, num(f[4])?, num(f[5])?, int(f[6])?, int(f[7])?);
        let continues = curves
            .last()
            .is_some_and(|c| c.predictor == f[0] && c.shift == f[1] && c.sigma == sigma && c.k() + 1 == j as usize);
        if continues {
            let c = curves.last_mut().unwrap();
            c.mse_mean.push(m);
            c.mse_stderr.push(s);
        } else if j == 1 {
            curves.push(EvalCurve {
                predictor: f[0].to_string(),
                shift: f[1].to_string(),
                sigma,
                mse_mean: vec![m],
                mse_stderr: vec![s],
                n_prompts: n as usize,
                seed,
            });
        } else {
            return Err(err(format!("row j={j} does not continue a curve")));
        }
    }
    Ok(curves)
}

/// Sampling recipe for one evaluation cell.
#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub config: PromptConfig,
    pub shift: ShiftSpec,
    pub n_prompts: usize,
    pub seed: u64,
}

impl EvalSetup {
    pub fn prompts(&self) -> Result<Vec<Prompt>, EvalError> {
        if self.n_prompts < 2 {
            return Err(EvalError::InvalidArgument(format!("n_prompts must be at least 2, got {}", self.n_prompts)));
        }
        let sampler = PromptSampler::new(&shifted(&self.config, self.shift))?;
        Ok(sampler.sample_many(Domain::Eval, self.seed, 0, self.n_prompts))
    }
}

/// Evaluates every predictor on the same prompts.
pub fn evaluate_many(predictors: &[&dyn Predictor], setup: &EvalSetup) -> Result<Vec<EvalCurve>, EvalError> {
    let prompts = setup.prompts()?;
    let k = setup.config.k;
    predictors
        .iter()
        .map(|p| {
            let mut acc = vec![MeanAccumulator::default(); k];
            for (c, chunk) in prompts.chunks(CHUNK).enumerate() {
                let preds = p.predict_prompts(chunk).map_err(|detail| {
                    let index = locate_failure(*p, chunk).unwrap_or(0) + c * CHUNK;
                    EvalError::Predictor {
                        predictor: p.name(),
                        index,
                        seed: setup.seed,
                        detail,
                    }
                })?;
                for (i, (prompt, row)) in chunk.iter().zip(&preds).enumerate() {
                    if row.len() != k || row.iter().any(|v| !v.is_finite()) {
                        return Err(EvalError::Predictor {
                            predictor: p.name(),
                            index: c * CHUNK + i,
                            seed: setup.seed,
                            detail: "prediction row has wrong length or non-finite entries".into(),
                        });
                    }
                    for ((a, &y), &yhat) in acc.iter_mut().zip(prompt.ys.iter()).zip(row) {
                        a.push((yhat - y) * (yhat - y));
                    }
                }
            }
            Ok(EvalCurve {
                predictor: p.name(),
                shift: setup.shift.name(),
                sigma: setup.config.sigma,
                mse_mean: acc.iter().map(MeanAccumulator::mean).collect(),
                mse_stderr: acc.iter().map(MeanAccumulator::stderr).collect(),
                n_prompts: setup.n_prompts,
                seed: setup.seed,
            })
        })
        .collect()
}

fn locate_failure(p: &dyn Predictor, chunk: &[Prompt]) -> Option<usize> {
    (0..chunk.len()).find(|&i| p.predict_prompts(&chunk[i..=i]).is_err())
}

pub fn evaluate(
    predictor: &dyn Predictor,
    config: &PromptConfig,
    shift: ShiftSpec,
    n_prompts: usize,
    seed: u64,
) -> Result<EvalCurve, EvalError> {
    let setup = EvalSetup {
        config: config.clone(),
        shift,
        n_prompts,
        seed,
    };
    Ok(evaluate_many(&[predictor], &setup)?.remove(0))
}

/// Total variation across `j`.
pub fn erraticism(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Trapezoid rule with unit spacing.
pub fn trapezoid(values: &[f64]) -> f64 {
    values.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummary {
    pub predictor: String,
    /// `mse(j) - reference_mse(j)`.
    pub gaps: Vec<f64>,
    pub excess_auc: f64,
    /// Largest `mse / reference_mse` over `j` where the reference exceeds
    /// [`RATIO_FLOOR`]; `None` if it never does.
    pub max_ratio: Option<f64>,
    pub erraticism: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub reference: String,
    pub shift: String,
    pub sigma: f64,
    pub summaries: Vec<CurveSummary>,
}

impl ComparisonReport {
    pub fn get(&self, predictor: &str) -> Option<&CurveSummary> {
        self.summaries.iter().find(|s| s.predictor == predictor)
    }
}

/// The oracle used as the reference: ridge with noise, least squares without.
pub fn default_reference(sigma: f64) -> &'static str {
    if sigma > 0.0 {
        "ridge"
    } else {
        "ols"
    }
}

/// Gaps and summary statistics of every curve against `reference` (or the
/// default reference for the curves' noise level).
pub fn compare(curves: &[EvalCurve], reference: Option<&str>) -> Result<ComparisonReport, EvalError> {
    let first = curves.first().ok_or_else(|| EvalError::Mismatch("no curves".into()))?;
    for c in curves {
        if c.k() != first.k() || c.shift != first.shift || c.sigma != first.sigma {
            return Err(EvalError::Mismatch(format!(
                "'{}' (k={}, shift={}, sigma={}) vs '{}' (k={}, shift={}, sigma={})",
                c.predictor, c.k(), c.shift, c.sigma, first.predictor, first.k(), first.shift, first.sigma
            )));
        }
    }
    let name = reference.unwrap_or_else(|| default_reference(first.sigma));
    let reference = curves
        .iter()
        .find(|c| c.predictor == name)
        .ok_or_else(|| EvalError::Mismatch(format!("reference curve '{name}' missing")))?;
    let summaries = curves
        .iter()
        .map(|c| {
            let gaps: Vec<f64> = c.mse_mean.iter().zip(&reference.mse_mean).map(|(a, r)| a - r).collect();
            let max_ratio = c
                .mse_mean
                .iter()
                .zip(&reference.mse_mean)
                .filter(|(_, &r)| r > RATIO_FLOOR)
                .map(|(a, r)| a / r)
                .reduce(f64::max);
            CurveSummary {
                predictor: c.predictor.clone(),
                excess_auc: trapezoid(&gaps),
                gaps,
                max_ratio,
                erraticism: erraticism(&c.mse_mean),
            }
        })
        .collect();
    Ok(ComparisonReport {
        reference: name.to_string(),
        shift: first.shift.clone(),
        sigma: first.sigma,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, k: usize, sigma: f64) -> PromptConfig {
        PromptConfig::isotropic(d, k, sigma, 3)
    }

    #[test]
    fn ridge_first_prefix_risk_is_d_plus_noise() {
        let c = evaluate(&RidgePredictor::for_config(&cfg(10, 12, 1.0)).unwrap(), &cfg(10, 12, 1.0), ShiftSpec::ID, 4000, 1)
            .unwrap();
        let (m, s) = c.at(1);
        assert!((m - 11.0).abs() <= 2.0 * s, "{m} ± {s}");
    }

    #[test]
    fn ols_interpolates_without_noise() {
        let c = evaluate(&OlsPredictor, &cfg(4, 10, 0.0), ShiftSpec::ID, 200, 2).unwrap();
        for j in 6..=10 {
            assert!(c.at(j).0 < 1e-20, "j={j}: {}", c.at(j).0);
        }
    }

    #[test]
    fn ridge_is_shift_robust_without_noise() {
        let config = cfg(4, 10, 0.0);
        let c = evaluate(&RidgePredictor::for_config(&config).unwrap(), &config, ShiftSpec::SEVERE, 200, 3).unwrap();
        assert!(c.at(1).0 > 1.0);
        for j in 6..=10 {
            assert!(c.at(j).0 < 1e-10, "j={j}: {}", c.at(j).0);
        }
    }

    #[test]
    fn ridge_dominates_ols_with_noise() {
        let config = cfg(5, 15, 1.0);
        let ridge = RidgePredictor::for_config(&config).unwrap();
        let setup = EvalSetup {
            config: config.clone(),
            shift: ShiftSpec::ID,
            n_prompts: 1280,
            seed: 4,
        };
        let curves = evaluate_many(&[&ridge, &OlsPredictor], &setup).unwrap();
        for j in 1..=15 {
            let (r, rs) = curves[0].at(j);
            let (o, _) = curves[1].at(j);
            assert!(r <= o + 2.0 * rs, "j={j}: ridge {r} ols {o}");
        }
    }

    #[test]
    fn evaluation_is_reproducible() {
        let config = cfg(3, 6, 0.5);
        let a = evaluate(&OlsPredictor, &config, ShiftSpec::MILD, 50, 9).unwrap();
        let b = evaluate(&OlsPredictor, &config, ShiftSpec::MILD, 50, 9).unwrap();
        assert_eq!(curves_to_csv(&[a.clone()]), curves_to_csv(&[b]));
        let c = evaluate(&OlsPredictor, &config, ShiftSpec::MILD, 50, 10).unwrap();
        assert_ne!(a.mse_mean, c.mse_mean);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let config = cfg(2, 4, 1.0);
        let setup = EvalSetup {
            config: config.clone(),
            shift: ShiftSpec::custom(1.5),
            n_prompts: 20,
            seed: 5,
        };
        let ridge = RidgePredictor::for_config(&config).unwrap();
        let curves = evaluate_many(&[&ridge, &ZeroPredictor], &setup).unwrap();
        let text = curves_to_csv(&curves);
        assert!(text.starts_with("predictor,shift,sigma,j,mse_mean,mse_stderr,n_prompts,seed\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert_eq!(curves_from_csv(&text).unwrap(), curves);
        assert!(curves_from_csv("a,b\n").is_err());
    }

    #[test]
    fn too_few_prompts_rejected() {
        assert!(evaluate(&ZeroPredictor, &cfg(2, 3, 0.0), ShiftSpec::ID, 1, 0).is_err());
    }

    struct Failing;
    impl Predictor for Failing {
        fn name(&self) -> String {
            "failing".into()
        }
        fn predict_prompts(&self, prompts: &[Prompt]) -> Result<Vec<Vec<f64>>, String> {
            if prompts.iter().any(|p| p.ys[0] > 2.0) {
                Err("boom".into())
            } else {
                Ok(prompts.iter().map(|p| vec![0.0; p.k()]).collect())
            }
        }
    }

    #[test]
    fn failures_name_the_prompt() {
        let config = cfg(3, 4, 0.0);
        match evaluate(&Failing, &config, ShiftSpec::ID, 400, 6) {
            Err(EvalError::Predictor { index, seed, .. }) => {
                assert_eq!(seed, 6);
                let setup = EvalSetup { config, shift: ShiftSpec::ID, n_prompts: 400, seed: 6 };
                let prompts = setup.prompts().unwrap();
                assert!(prompts[index].ys[0] > 2.0);
                assert!(prompts[..index].iter().all(|p| p.ys[0] <= 2.0));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn comparison_against_self_is_zero() {
        let config = cfg(3, 8, 1.0);
        let ridge = RidgePredictor::for_config(&config).unwrap();
        let c = evaluate(&ridge, &config, ShiftSpec::ID, 100, 7).unwrap();
        let report = compare(&[c], None).unwrap();
        let s = report.get("ridge").unwrap();
        assert!(s.gaps.iter().all(|&g| g == 0.0));
        assert_eq!(s.excess_auc, 0.0);
        assert_eq!(s.max_ratio, Some(1.0));
    }

    #[test]
    fn zero_predictor_excess_approaches_d() {
        let (d, k) = (4, 60);
        let config = cfg(d, k, 1.0);
        let ridge = RidgePredictor::for_config(&config).unwrap();
        let setup = EvalSetup { config, shift: ShiftSpec::ID, n_prompts: 4000, seed: 8 };
        let curves = evaluate_many(&[&ridge, &ZeroPredictor], &setup).unwrap();
        let report = compare(&curves, None).unwrap();
        let gap = *report.get("zero").unwrap().gaps.last().unwrap();
        // ridge risk at j is about 1 + d/(j - d), so the gap sits just under d
        assert!((gap - d as f64).abs() < 0.35, "{gap}");
    }

    #[test]
    fn noise_raises_erraticism() {
        let oracle: Vec<f64> = (1..=20).map(|j| 5.0 / j as f64).collect();
        let max_step = oracle.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        let c = max_step * 1.5;
        let noisy: Vec<f64> = oracle.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { c } else { -c }).collect();
        assert!(erraticism(&oracle) <= erraticism(&noisy));
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = evaluate(&ZeroPredictor, &cfg(2, 4, 0.0), ShiftSpec::ID, 10, 1).unwrap();
        let b = evaluate(&OlsPredictor, &cfg(2, 5, 0.0), ShiftSpec::ID, 10, 1).unwrap();
        assert!(matches!(compare(&[a.clone(), b], None), Err(EvalError::Mismatch(_))));
        assert!(matches!(compare(&[a], None), Err(EvalError::Mismatch(_))));
    }
}
