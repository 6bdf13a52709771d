//! Closed-form Bayes-optimal predictors for linear-Gaussian prompts.
//!
//! With `beta ~ N(0, Σ)` and noise variance `σ² > 0`, the posterior of the
//! task given a prefix is Gaussian with covariance `(XᵀX + σ²Σ⁻¹)⁻¹` and mean
//! `(XᵀX + σ²Σ⁻¹)⁻¹Xᵀy`, so the optimal prediction is the ridge predictor
//! `x_jᵀ(XᵀX + σ²Σ⁻¹)⁻¹Xᵀy`. In the noiseless limit with `Σ = I` it becomes
//! `x_jᵀX⁺y`; for other `Σ` the limit is `ΣXᵀ(XΣXᵀ)⁺`, which need not equal
//! `X⁺` when `X` is rank deficient.
//!
//! The `σ > 0` path factors the regularized Gram matrix with Cholesky; the
//! pseudo-inverse path uses an SVD.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::prompting::{prefix, PromptConfig, PromptError, PromptSampler, Prefix};
use crate::rng::{Domain, RandomStream};
use crate::stats::MeanAccumulator;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("sigma must be positive for the ridge posterior (got {0}); use the pseudo-inverse predictor")]
    NonPositiveSigma(f64),
    #[error("context has {got} columns, task covariance is {expected}x{expected}")]
    Dimension { got: usize, expected: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Ridge / posterior-mean predictor for a fixed `(σ, Σ)`.
#[derive(Debug, Clone)]
pub struct RidgeOracle {
    sigma: f64,
    task_cov: DMatrix<f64>,
    prior_precision: DMatrix<f64>,
}

impl RidgeOracle {
    /// `sigma = 0` is allowed here: the oracle then predicts with the
    /// noiseless limit `ΣXᵀ(XΣXᵀ)⁺`. The posterior itself needs `sigma > 0`.
    pub fn new(sigma: f64, task_cov: &DMatrix<f64>) -> Result<Self, OracleError> {
        if !(sigma >= 0.0) {
            return Err(OracleError::NonPositiveSigma(sigma));
        }
        linalg::check_symmetric(task_cov, 1e-12)?;
        let prior_precision = linalg::spd_inverse(task_cov)?;
        Ok(Self {
            sigma,
            task_cov: task_cov.clone(),
            prior_precision,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn d(&self) -> usize {
        self.task_cov.nrows()
    }

    fn check_dim(&self, cols: usize) -> Result<(), OracleError> {
        if cols != self.d() {
            return Err(OracleError::Dimension {
                got: cols,
                expected: self.d(),
            });
        }
        Ok(())
    }

    /// Cholesky factor of `XᵀX + σ²Σ⁻¹`.
    fn gram_factor(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
        if self.sigma <= 0.0 {
            return Err(OracleError::NonPositiveSigma(self.sigma));
        }
        self.check_dim(x.ncols())?;
        let s2 = self.sigma * self.sigma;
        let gram = x.transpose() * x + &self.prior_precision * s2;
        Ok(linalg::cholesky_lower(&gram)?)
    }

    pub fn posterior(&self, prefix: &Prefix) -> Result<Posterior, OracleError> {
        let l = self.gram_factor(&prefix.context_x)?;
        let rhs = prefix.context_x.transpose() * &prefix.context_y;
        let mean = linalg::cholesky_solve_vec(&l, &rhs)?;
        let mut cov = linalg::cholesky_solve(&l, &DMatrix::identity(self.d(), self.d()))?;
        linalg::symmetrize(&mut cov);
        Ok(Posterior { mean, cov })
    }

    /// `m(X)` such that the prediction is `x_jᵀ m(X) y`; shape `d x (j-1)`.
    pub fn weight_matrix(&self, context_x: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
        if self.sigma > 0.0 {
            let l = self.gram_factor(context_x)?;
            Ok(linalg::cholesky_solve(&l, &context_x.transpose())?)
        } else {
            self.check_dim(context_x.ncols())?;
            noiseless_limit_matrix(context_x, &self.task_cov)
        }
    }

    /// Posterior-mean estimate of the task.
    pub fn estimate(&self, prefix: &Prefix) -> Result<DVector<f64>, OracleError> {
        if prefix.context_len() == 0 {
            self.check_dim(prefix.d())?;
            return Ok(DVector::zeros(self.d()));
        }
        if self.sigma > 0.0 {
            Ok(self.posterior(prefix)?.mean)
        } else {
            Ok(self.weight_matrix(&prefix.context_x)? * &prefix.context_y)
        }
    }

    pub fn predict(&self, prefix: &Prefix) -> Result<f64, OracleError> {
        Ok(prefix.query.dot(&self.estimate(prefix)?))
    }
}

pub fn posterior(prefix: &Prefix, sigma: f64, task_cov: &DMatrix<f64>) -> Result<Posterior, OracleError> {
    if !(sigma > 0.0) {
        return Err(OracleError::NonPositiveSigma(sigma));
    }
    RidgeOracle::new(sigma, task_cov)?.posterior(prefix)
}

pub fn ridge_predict(prefix: &Prefix, sigma: f64, task_cov: &DMatrix<f64>) -> Result<f64, OracleError> {
    if !(sigma > 0.0) {
        return Err(OracleError::NonPositiveSigma(sigma));
    }
    RidgeOracle::new(sigma, task_cov)?.predict(prefix)
}

/// `(XᵀX + σ²Σ⁻¹)⁻¹Xᵀ` for `σ > 0`.
pub fn ridge_limit_matrix(
    context_x: &DMatrix<f64>,
    task_cov: &DMatrix<f64>,
    sigma: f64,
) -> Result<DMatrix<f64>, OracleError> {
    if !(sigma > 0.0) {
        return Err(OracleError::NonPositiveSigma(sigma));
    }
    RidgeOracle::new(sigma, task_cov)?.weight_matrix(context_x)
}

/// `lim_{σ→0} (XᵀX + σ²Σ⁻¹)⁻¹Xᵀ = ΣXᵀ(XΣXᵀ)⁺`. Equals `X⁺` when `Σ = I`.
///
/// Evaluated as `L (XL)⁺` with `Σ = LLᵀ`, which is the same matrix but
/// avoids squaring the condition number of `X`.
pub fn noiseless_limit_matrix(context_x: &DMatrix<f64>, task_cov: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    let l = linalg::cholesky_lower(task_cov)?;
    Ok(&l * linalg::pseudo_inverse(&(context_x * &l)))
}

/// `x_jᵀ X⁺ y`; zero for an empty context.
pub fn ols_predict(prefix: &Prefix) -> f64 {
    if prefix.context_len() == 0 {
        return 0.0;
    }
    let beta = linalg::pseudo_inverse(&prefix.context_x) * &prefix.context_y;
    prefix.query.dot(&beta)
}

type WeightMap = dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + Send + Sync;

/// A predictor `x_jᵀ m(X) y`: linear in the query and in the context labels.
pub struct LinearInLabelPredictor {
    name: String,
    weight_map: Box<WeightMap>,
}

impl LinearInLabelPredictor {
    pub fn new(name: impl Into<String>, weight_map: impl Fn(&DMatrix<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            weight_map: Box::new(weight_map),
        }
    }

    pub fn ridge(oracle: RidgeOracle) -> Self {
        Self::new("ridge", move |x| {
            oracle
                .weight_matrix(x)
                .expect("ridge weight map on a validated oracle")
        })
    }

    pub fn ols() -> Self {
        Self::new("ols", linalg::pseudo_inverse)
    }

    /// `m(X) = (I + P) m_base(X)`.
    pub fn perturbed(name: impl Into<String>, base: LinearInLabelPredictor, perturbation: DMatrix<f64>) -> Self {
        let d = perturbation.nrows();
        let left = DMatrix::identity(d, d) + perturbation;
        Self::new(name, move |x| &left * (base.weight_map)(x))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight_matrix(&self, context_x: &DMatrix<f64>) -> DMatrix<f64> {
        (self.weight_map)(context_x)
    }

    pub fn predict(&self, prefix: &Prefix) -> f64 {
        if prefix.context_len() == 0 {
            return 0.0;
        }
        let m = self.weight_matrix(&prefix.context_x);
        prefix.query.dot(&(m * &prefix.context_y))
    }
}

impl std::fmt::Debug for LinearInLabelPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearInLabelPredictor").field("name", &self.name).finish()
    }
}

/// Monte-Carlo risk of one predictor at one prefix length, and its paired
/// difference to the ridge oracle (`competitor − ridge`).
#[derive(Debug, Clone, PartialEq)]
pub struct RiskCell {
    pub j: usize,
    pub risk: f64,
    pub risk_se: f64,
    pub excess_over_ridge: f64,
    pub excess_se: f64,
}

impl RiskCell {
    /// Ridge is not beaten beyond two paired standard errors.
    pub fn ridge_dominates(&self) -> bool {
        -self.excess_over_ridge <= 2.0 * self.excess_se
    }
}

#[derive(Debug, Clone)]
pub struct PredictorRisk {
    pub name: String,
    pub cells: Vec<RiskCell>,
}

#[derive(Debug, Clone)]
pub struct DominanceReport {
    pub family: crate::prompting::BetaFamily,
    pub sigma: f64,
    pub n_prompts: usize,
    /// Index 0 is the ridge oracle itself.
    pub predictors: Vec<PredictorRisk>,
}

impl DominanceReport {
    pub fn ridge(&self) -> &PredictorRisk {
        &self.predictors[0]
    }

    /// `(predictor, j)` pairs where ridge is beaten by more than 2 SE.
    pub fn violations(&self) -> Vec<(String, usize)> {
        self.predictors[1..]
            .iter()
            .flat_map(|p| {
                p.cells
                    .iter()
                    .filter(|c| !c.ridge_dominates())
                    .map(move |c| (p.name.clone(), c.j))
            })
            .collect()
    }

    pub fn passes(&self) -> bool {
        self.violations().is_empty()
    }

    /// Long-format CSV: `predictor,j,risk,risk_se,excess_over_ridge,excess_se`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("predictor,j,risk,risk_se,excess_over_ridge,excess_se\n");
        for p in &self.predictors {
            for c in &p.cells {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    p.name, c.j, c.risk, c.risk_se, c.excess_over_ridge, c.excess_se
                ));
            }
        }
        out
    }
}

/// Norms of the random perturbations, cycled over the competitors.
pub const PERTURBATION_RADII: [f64; 4] = [0.1, 0.2, 0.3, 0.5];

/// Fixed random perturbation matrices with Frobenius norms from
/// [`PERTURBATION_RADII`], drawn from `seed`.
pub fn perturbation_matrices(d: usize, count: usize, seed: u64) -> Vec<DMatrix<f64>> {
    (0..count)
        .map(|c| {
            let mut s = RandomStream::derive(seed, Domain::Check, 1_000_000 + c as u64);
            let raw = DMatrix::from_fn(d, d, |_, _| s.normal());
            let r = PERTURBATION_RADII[c % PERTURBATION_RADII.len()];
            raw.scale(r / raw.norm())
        })
        .collect()
}

/// Paired Monte-Carlo comparison of the ridge oracle against OLS and
/// `n_perturbed` perturbed linear-in-label predictors. Every predictor is
/// scored on the same prompts.
pub fn risk_dominance_check_with(
    config: &PromptConfig,
    n_prompts: usize,
    n_perturbed: usize,
) -> Result<DominanceReport, OracleError> {
    if !(config.sigma > 0.0) {
        return Err(OracleError::NonPositiveSigma(config.sigma));
    }
    let sampler = PromptSampler::new(config)?;
    let oracle = RidgeOracle::new(config.sigma, &config.task_cov_matrix())?;
    let d = config.d;
    let k = config.k;
    let perturbations: Vec<DMatrix<f64>> = perturbation_matrices(d, n_perturbed, config.seed)
        .into_iter()
        .map(|p| DMatrix::identity(d, d) + p)
        .collect();

    let mut names = vec!["ridge".to_string(), "ols".to_string()];
    names.extend((0..n_perturbed).map(|c| format!("perturbed{c:02}")));
    let n_pred = names.len();

    // risk[p][j] and diff[p][j] accumulators
    let mut risk = vec![vec![MeanAccumulator::default(); k]; n_pred];
    let mut diff = vec![vec![MeanAccumulator::default(); k]; n_pred];
    let mut preds = vec![0.0; n_pred];

    for i in 0..n_prompts {
        let prompt = sampler.sample_indexed(Domain::Prompts, config.seed, i as u64);
        for j in 1..=k {
            let pre = prefix(&prompt, j)?;
            let y = prompt.ys[j - 1];
            let est = oracle.estimate(&pre)?;
            preds[0] = pre.query.dot(&est);
            preds[1] = ols_predict(&pre);
            for (c, left) in perturbations.iter().enumerate() {
                preds[2 + c] = pre.query.dot(&(left * &est));
            }
            let base = (preds[0] - y).powi(2);
            for p in 0..n_pred {
                let loss = (preds[p] - y).powi(2);
                risk[p][j - 1].push(loss);
                diff[p][j - 1].push(loss - base);
            }
        }
    }

    let predictors = names
        .into_iter()
        .enumerate()
        .map(|(p, name)| PredictorRisk {
            name,
            cells: (0..k)
                .map(|j| RiskCell {
                    j: j + 1,
                    risk: risk[p][j].mean(),
                    risk_se: risk[p][j].stderr(),
                    excess_over_ridge: diff[p][j].mean(),
                    excess_se: diff[p][j].stderr(),
                })
                .collect(),
        })
        .collect();

    Ok(DominanceReport {
        family: config.beta_family,
        sigma: config.sigma,
        n_prompts,
        predictors,
    })
}

/// [`risk_dominance_check_with`] with 16 perturbed competitors.
pub fn risk_dominance_check(config: &PromptConfig, n_prompts: usize) -> Result<DominanceReport, OracleError> {
    risk_dominance_check_with(config, n_prompts, 16)
}
