/// Running statistics of one batch-norm layer.
///
/// Running variance uses the unbiased batch estimate, as is conventional.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
    training: bool,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self::with_params(features, BN_MOMENTUM, BN_EPS)
    }

    pub fn with_params(features: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum,
            eps,
            training: true,
        }
    }

    /// Rebuilds a state from stored statistics (checkpoint loading).
    pub fn from_parts(running_mean: Vec<f64>, running_var: Vec<f64>, momentum: f64, eps: f64) -> Option<Self> {
        (running_mean.len() == running_var.len() && running_var.iter().all(|v| *v >= 0.0)).then_some(Self {
            running_mean,
            running_var,
            momentum,
            eps,
            training: false,
        })
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Folds one batch's (biased) statistics over `n` rows into the running estimates.
    pub(crate) fn update(&mut self, mean: &[f64], biased_var: &[f64], n: usize) {
        let m = self.momentum;
        let correction = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(biased_var) {
            *r = ((1.0 - m) * *r + m * b * correction).max(0.0);
        }
    }
}
