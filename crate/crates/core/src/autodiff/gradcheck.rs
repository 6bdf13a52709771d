//! Central finite-difference check of reverse-mode gradients in `f64`.

use super::tape::{AutogradError, Tape, Var};
use super::tensor::Tensor;
use crate::rng::{Domain, RandomStream};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    /// Coordinates rejected because `±h` crossed a ReLU kink.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn run<F>(params: &[Tensor<f64>], forward: &F) -> Result<(Tape<f64>, Vec<Var>, Var), AutogradError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutogradError>,
{
    let mut tape = Tape::with_kink_tracking();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of `forward` against central differences
/// with step `h` on `n_coords` randomly chosen parameter coordinates.
/// `forward` must be a pure function of the parameter values.
pub fn check_gradients<F>(
    params: &[Tensor<f64>],
    forward: F,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutogradError>,
{
    let (tape, vars, loss) = run(params, &forward)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss)?;

    let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut stream = RandomStream::derive(seed, Domain::Check, 0);
    let mut report = GradCheckReport::default();
    let mut attempts = 0;
    while report.coords.len() < n_coords && attempts < 50 * n_coords.max(1) && total > 0 {
        attempts += 1;
        let mut flat = stream.index(total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let analytic = grads.get(vars[p]).map_or(0.0, |g| g.data()[flat]);

        let mut shifted = params.to_vec();
        let orig = params[p].data()[flat];
        shifted[p].data_mut()[flat] = orig + h;
        let (tp, _, lp) = run(&shifted, &forward)?;
        shifted[p].data_mut()[flat] = orig - h;
        let (tm, _, lm) = run(&shifted, &forward)?;
        if tp.kink_signature() != base_sig || tm.kink_signature() != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
        report.coords.push(CoordCheck {
            param: p,
            index: flat,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}
