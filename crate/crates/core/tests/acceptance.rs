//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails. Run with `cargo test --test acceptance`.

mod common;

use std::fs;
use std::time::Instant;

use nalgebra::DMatrix;

use icl_core::autodiff::Tape;
use icl_core::evalshift::{self, EvalCurve};
use icl_core::experiment::{self, ExperimentSpec, Panel, RunSummary, Scale, TrainedModel};
use icl_core::linalg;
use icl_core::models::{
    checkpoint, gradcheck_model, predict_batch_as, MlpSet, MlpSetConfig, Model, ModelParams, Transformer, TransformerConfig,
};
use icl_core::oracles::{self, risk_dominance_check, RidgeOracle};
use icl_core::prompting::{prefix, BetaFamily, Prefix, Prompt, PromptConfig, PromptSampler, ShiftLabel};
use icl_core::rng::{Domain, RandomStream};
use icl_core::stats;
use icl_core::training::{self, TrainConfig};
use mimalloc::MiMalloc;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

struct Outcome {
    id: u8,
    title: &'static str,
    status: Status,
    detail: String,
}

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    /// Passes, but reports a deviation from the expected ordering.
    Flagged,
}

impl Outcome {
    fn new(id: u8, title: &'static str, pass: bool, detail: String) -> Self {
        Self {
            id,
            title,
            status: if pass { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    fn line(&self) -> String {
        let s = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Flagged => "PASS (FLAGGED deviation)",
        };
        format!("criterion {} [{}]: {s}; {}", self.id, self.title, self.detail)
    }
}

fn report(o: Outcome) -> Outcome {
    println!("{}", o.line());
    o
}

fn eval_prompts(d: usize, k: usize, n: usize, seed: u64) -> Vec<Prompt> {
    let cfg = PromptConfig::isotropic(d, k, 0.0, seed);
    PromptSampler::new(&cfg).unwrap().sample_many(Domain::Eval, seed, 0, n)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut s = RandomStream::new(101);

    // posterior mean against Simpson quadrature, d = 2
    let mut quad_err: f64 = 0.0;
    for (n, sigma) in [(0usize, 1.0), (1, 0.5), (2, 1.0), (4, 0.8), (7, 1.5)] {
        let (_, cov) = common::random_spd_rows(&mut s, 2);
        let prec = cov.clone().try_inverse().unwrap();
        let x: Vec<[f64; 2]> = (0..n).map(|_| [s.normal(), s.normal()]).collect();
        let y: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let xv: Vec<Vec<f64>> = x.iter().map(|r| r.to_vec()).collect();
        let p = common::prefix_from(&xv, &y, &[0.3, -0.2]);
        let closed = oracles::posterior(&p, sigma, &cov).unwrap().mean;
        let pp = [[prec[(0, 0)], prec[(0, 1)]], [prec[(1, 0)], prec[(1, 1)]]];
        let q = common::simpson_posterior_mean(&x, &y, sigma, pp, 30.0, 2000);
        quad_err = quad_err.max((closed[0] - q[0]).abs()).max((closed[1] - q[1]).abs());
    }

    // ridge estimate against coordinate descent on the regularized objective
    let mut cd_err: f64 = 0.0;
    for (n, d, sigma) in [(3usize, 4usize, 1.0), (8, 4, 0.5), (15, 6, 1.0), (30, 5, 2.0)] {
        let (_, cov) = common::random_spd_rows(&mut s, d);
        let prec = cov.clone().try_inverse().unwrap();
        let prec_rows: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| prec[(i, j)]).collect()).collect();
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| s.normal()).collect()).collect();
        let y: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let q: Vec<f64> = (0..d).map(|_| s.normal()).collect();
        let p = common::prefix_from(&x, &y, &q);
        let closed = RidgeOracle::new(sigma, &cov).unwrap().estimate(&p).unwrap();
        let cd = common::coordinate_descent_ridge(&x, &y, sigma, &prec_rows, 1e-15);
        for i in 0..d {
            cd_err = cd_err.max((closed[i] - cd[i]).abs());
        }
    }

    // σ → 0 limit against pseudo-inverses known by construction
    let mut limit_err: f64 = 0.0;
    let mut deficient = 0;
    for trial in 0..100 {
        let d = 2 + s.index(5);
        let rows = 1 + s.index(2 * d);
        let full = rows.min(d);
        let rank = if trial % 3 == 0 && full > 1 { 1 + s.index(full - 1) } else { full };
        if rank < full {
            deficient += 1;
        }
        let (x, pinv) = common::matrix_with_known_pinv(&mut s, rows, d, rank);
        let eye = DMatrix::identity(d, d);
        let small = oracles::ridge_limit_matrix(&x, &eye, 1e-4).unwrap();
        let exact = oracles::noiseless_limit_matrix(&x, &eye).unwrap();
        limit_err = limit_err.max((small - &pinv).abs().max()).max((exact - &pinv).abs().max());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = quad_err <= 1e-3 && cd_err <= 1e-6 && limit_err <= 1e-5 && deficient > 0 && secs < 60.0;
    Outcome::new(
        1,
        "oracle exactness",
        pass,
        format!(
            "quadrature {quad_err:.2e} (<=1e-3), coordinate descent {cd_err:.2e} (<=1e-6), limit vs X+ {limit_err:.2e} (<=1e-5, {deficient}/100 rank deficient), {secs:.1} s (<60)"
        ),
    )
}

fn criterion_2() -> Outcome {
    let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    // Σ⁻¹ = [[2, 1], [1, 1]] has inverse [[1, -1], [-1, 2]]
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 2.0]);
    let limit = oracles::ridge_limit_matrix(&x, &cov, 1e-4).unwrap();
    let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
    let pinv_expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let err = (&limit - &expected).abs().max();
    let pinv = linalg::pseudo_inverse(&x);
    let pinv_ok = (&pinv - &pinv_expected).abs().max() < 1e-15;
    let gap = (limit[(1, 0)] - pinv[(1, 0)]).abs();
    Outcome::new(
        2,
        "counterexample pinned",
        err <= 1e-6 && pinv_ok && (gap - 1.0).abs() <= 1e-6,
        format!("limit error {err:.2e} (<=1e-6), entry (2,1) differs from X+ by {gap:.6}"),
    )
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for family in BetaFamily::ALL {
        let cfg = PromptConfig::isotropic(5, 20, 1.0, 7).with_beta_family(family);
        let r = risk_dominance_check(&cfg, 20_000).unwrap();
        let v = r.violations();
        pass &= v.is_empty() && r.predictors.len() == 18;
        // at j = 1 every predictor outputs 0, so its risk is E[(βᵀx)²] + σ² = d + 1
        let c = &r.ridge().cells[0];
        let z = (c.risk - 6.0).abs() / c.risk_se;
        pass &= z <= 2.0;
        parts.push(format!("{family}: {} violations, j=1 risk {:.3} (z {z:.2})", v.len(), c.risk));
    }
    Outcome::new(
        3,
        "ridge dominance",
        pass,
        format!("{}; 20000 prompts, OLS + 16 perturbed, {:.0} s", parts.join(", "), t0.elapsed().as_secs_f64()),
    )
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let batch = eval_prompts(4, 6, 4, 41);
    let mlp = MlpSet::new(MlpSetConfig::preset(1, 4, 16).unwrap(), 42).unwrap();
    let tf = Transformer::new(
        TransformerConfig {
            d: 4,
            n_layers: 2,
            n_heads: 2,
            embed_dim: 16,
            max_positions: 12,
        },
        43,
    )
    .unwrap();
    let a = gradcheck_model(&mlp, &batch, 64, 1e-4, 44).unwrap();
    let b = gradcheck_model(&tf, &batch, 64, 1e-4, 45).unwrap();
    let (wa, wb) = (a.max_rel_err(), b.max_rel_err());
    Outcome::new(
        4,
        "autodiff correctness",
        a.coords.len() == 64 && b.coords.len() == 64 && wa < 1e-4 && wb < 1e-4,
        format!(
            "worst relative error mlp-set {wa:.2e}, transformer {wb:.2e} (<1e-4, 64 coords each), {:.1} s",
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn reorder(p: &Prefix, order: &[usize]) -> Prefix {
    let d = p.d();
    Prefix {
        context_x: DMatrix::from_fn(order.len(), d, |r, c| p.context_x[(order[r], c)]),
        context_y: nalgebra::DVector::from_fn(order.len(), |r, _| p.context_y[order[r]]),
        ..p.clone()
    }
}

/// Largest change under random context permutations (f64 forward) and
/// under duplicating every context pair (f32 forward).
fn set_invariance(m: &MlpSet, prompts: &[Prompt], seed: u64) -> (f64, f64) {
    let mut s = RandomStream::new(seed);
    let (mut perm, mut dup): (f64, f64) = (0.0, 0.0);
    for p in prompts {
        let k = p.k();
        let pre = prefix(p, k).unwrap();
        let n = k - 1;
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, s.index(i + 1));
        }
        let a = m.predict_prefix_as::<f64>(&pre).unwrap();
        let b = m.predict_prefix_as::<f64>(&reorder(&pre, &order)).unwrap();
        perm = perm.max((a - b).abs());
        let twice: Vec<usize> = (0..n).chain(0..n).collect();
        let c = m.predict_prefix(&pre).unwrap();
        let e = m.predict_prefix(&reorder(&pre, &twice)).unwrap();
        dup = dup.max((c - e).abs());
    }
    (perm, dup)
}

fn causal_violation(m: &Transformer, prompts: &[Prompt]) -> f64 {
    let base = predict_batch_as::<f64, _>(m, prompts).unwrap();
    let k = prompts[0].k();
    let mut worst: f64 = 0.0;
    for j in 1..k {
        let mut edited = prompts.to_vec();
        for p in &mut edited {
            for i in j..k {
                p.ys[i] = 3.0 - 2.0 * p.ys[i];
                for c in 0..p.d() {
                    p.xs[(i, c)] = -p.xs[(i, c)] + 0.5;
                }
            }
        }
        let out = predict_batch_as::<f64, _>(m, &edited).unwrap();
        for (rb, ro) in base.iter().zip(&out) {
            for i in 0..j {
                worst = worst.max((rb[i] - ro[i]).abs());
            }
        }
    }
    worst
}

fn criterion_5() -> Outcome {
    let prompts = eval_prompts(5, 12, 16, 51);
    let mut mlp = MlpSet::new(MlpSetConfig::preset(2, 5, 32).unwrap(), 52).unwrap();
    // move the batch-norm running statistics off their initial values
    let mut bn = mlp.batchnorm().to_vec();
    for _ in 0..3 {
        let mut tape = Tape::<f32>::new();
        let vars = mlp.params().register(&mut tape, false);
        mlp.forward_batch(&mut tape, &vars, &mut bn, &prompts).unwrap();
    }
    mlp.batchnorm_mut().clone_from_slice(&bn);
    mlp.set_training(false);
    let (perm, dup) = set_invariance(&mlp, &prompts, 53);
    let tf = Transformer::new(TransformerConfig::desk(5, 12), 54).unwrap();
    let causal = causal_violation(&tf, &prompts[..4]);
    Outcome::new(
        5,
        "architecture invariants",
        perm <= 1e-12 && dup <= 1e-6 && causal <= 1e-6,
        format!("permutation {perm:.2e} (<=1e-12), duplication {dup:.2e} (<=1e-6), causal mask {causal:.2e} (<=1e-6)"),
    )
}

/// Desk-scale noiseless run shared by criteria 6 to 9.
fn desk_run(dir: &std::path::Path) -> RunSummary {
    let mut spec = ExperimentSpec::preset(Scale::Desk);
    spec.output_dir = dir.to_path_buf();
    spec.eval.sigmas = vec![0.0];
    spec.workers = 1;
    experiment::reproduce(&spec, &|line| eprintln!("  {line}")).expect("desk run completes")
}

fn model_of<'a>(run: &'a RunSummary, label: &str) -> &'a TrainedModel {
    run.models.iter().find(|m| m.label.starts_with(label)).expect("model trained")
}

fn id_panel(run: &RunSummary) -> &Panel {
    run.panel(0.0, ShiftLabel::Id).expect("id panel")
}

fn curve<'a>(p: &'a Panel, prefix: &str) -> &'a EvalCurve {
    p.curves.iter().find(|c| c.predictor.starts_with(prefix)).expect("curve present")
}

fn criterion_6(run: &RunSummary, eval_secs: f64) -> Outcome {
    let id = id_panel(run);
    let mlp = curve(id, "mlp-set");
    let ols = curve(id, "ols");
    let d = 5;
    let j = 2 * d + 1;
    let (m, _) = mlp.at(j);
    let (o, _) = ols.at(j);
    let bound = 2.0 * o + 0.05;
    let js: Vec<f64> = (2..=mlp.k()).map(|j| j as f64).collect();
    let rho = stats::spearman(&js, &mlp.mse_mean[1..]);
    let secs = model_of(run, "mlp-set").log.wall_clock_secs + eval_secs;
    Outcome::new(
        6,
        "ID-ICL mlp-set",
        m <= bound && rho < -0.8 && secs <= 600.0,
        format!(
            "mse at j={j} {m:.4} vs bound 2*ols+0.05 = {bound:.4}; spearman(j, mse) over j>=2 {rho:.3} (< -0.8); {secs:.0} s (<=600)"
        ),
    )
}

fn criterion_7(run: &RunSummary, eval_secs: f64) -> Outcome {
    let id = id_panel(run);
    let (tm, ts) = curve(id, "transformer").last();
    let (mm, ms) = curve(id, "mlp-set").last();
    let secs = model_of(run, "transformer").log.wall_clock_secs + eval_secs;
    let ordered = tm <= mm + 2.0 * ts;
    let detail = format!(
        "final-j mse transformer {tm:.4} (se {ts:.4}) vs mlp-set {mm:.4} (se {ms:.4}); {secs:.0} s (<=1200)"
    );
    let mut o = Outcome::new(7, "ID-ICL transformer", secs <= 1200.0, detail);
    if o.status == Status::Pass && !ordered {
        o.status = Status::Flagged;
        o.detail.push_str("; ordering reversed at desk scale");
    }
    o
}

fn criterion_8(run: &RunSummary) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let find = |l| run.panel(0.0, l).expect("panel");
    let (id, mild, severe) = (find(ShiftLabel::Id), find(ShiftLabel::Mild), find(ShiftLabel::Severe));
    for m in &run.models {
        let (a, sa) = id.curve(&m.label).unwrap().last();
        let (b, sb) = mild.curve(&m.label).unwrap().last();
        let (c, sc) = severe.curve(&m.label).unwrap().last();
        let slack_ab = 2.0 * (sa * sa + sb * sb).sqrt();
        let slack_bc = 2.0 * (sb * sb + sc * sc).sqrt();
        let ok = a <= b + slack_ab && b <= c + slack_bc && c >= 5.0 * a;
        pass &= ok;
        parts.push(format!("{}: id {a:.3}, mild {b:.3}, severe {c:.3}, severe/id {:.1}", m.label, c / a));
    }
    // training must not break the set structure
    if let ModelParams::MlpSet(m) = &model_of(run, "mlp-set").model {
        let (perm, dup) = set_invariance(m, &eval_prompts(5, 20, 16, 81), 82);
        pass &= perm <= 1e-12 && dup <= 1e-6;
        parts.push(format!("trained mlp-set permutation {perm:.1e}, duplication {dup:.1e}"));
    }
    Outcome::new(8, "shift degradation", pass, parts.join("; "))
}

fn criterion_9(run: &RunSummary) -> Outcome {
    let mut checks: Vec<(String, bool)> = Vec::new();
    let tmp = tempfile::tempdir().unwrap();

    // dominance CSVs
    let cfg = PromptConfig::isotropic(5, 20, 1.0, 7).with_beta_family(BetaFamily::Laplace);
    let a = risk_dominance_check(&cfg, 1000).unwrap().to_csv();
    let b = risk_dominance_check(&cfg, 1000).unwrap().to_csv();
    checks.push(("dominance csv".into(), a == b));

    // short training runs: logs, checkpoints and curves
    let pc = PromptConfig::isotropic(5, 20, 0.0, 0);
    let tc = TrainConfig {
        steps: 40,
        eval_every: 20,
        ..TrainConfig::default()
    };
    let train_mlp = || {
        let mut m = MlpSet::new(MlpSetConfig::preset(0, 5, 128).unwrap(), tc.seed).unwrap();
        let log = training::train(&mut m, &pc, &tc).unwrap();
        (log.to_csv(), checkpoint::encode(&ModelParams::MlpSet(m)))
    };
    let train_tf = || {
        let tc = TrainConfig { steps: 6, eval_every: 3, ..tc.clone() };
        let mut m = Transformer::new(TransformerConfig::desk(5, 20), tc.seed).unwrap();
        let log = training::train(&mut m, &pc, &tc).unwrap();
        (log.to_csv(), checkpoint::encode(&ModelParams::Transformer(m)))
    };
    let (m1, m2) = (train_mlp(), train_mlp());
    checks.push(("mlp-set train log".into(), m1.0 == m2.0));
    checks.push(("mlp-set checkpoint".into(), m1.1 == m2.1));
    let (t1, t2) = (train_tf(), train_tf());
    checks.push(("transformer train log".into(), t1.0 == t2.0));
    checks.push(("transformer checkpoint".into(), t1.1 == t2.1));

    // re-evaluating the desk checkpoints reproduces the run's curve files
    let spec = ExperimentSpec::load(&run.dir.join("spec.toml")).unwrap();
    let reloaded: Vec<TrainedModel> = run
        .models
        .iter()
        .map(|m| {
            let file = run.dir.join(format!("checkpoints/{}_{}.iclm", m.label, experiment::sigma_tag(m.sigma)));
            TrainedModel {
                model: checkpoint::load_checkpoint(&file).unwrap(),
                ..m.clone()
            }
        })
        .collect();
    for p in experiment::evaluate_grid(&spec, &reloaded).unwrap() {
        let on_disk = fs::read_to_string(run.dir.join(format!("curves/{}.csv", p.name()))).unwrap();
        checks.push((format!("{} curves", p.name()), evalshift::curves_to_csv(&p.curves) == on_disk));
    }

    // whole tiny reproduction, twice
    let mut spec = ExperimentSpec::preset(Scale::Tiny);
    spec.output_dir = tmp.path().join("a");
    let ra = experiment::reproduce(&spec, &|_| {}).unwrap();
    spec.output_dir = tmp.path().join("b");
    let rb = experiment::reproduce(&spec, &|_| {}).unwrap();
    let same = ra.panels.iter().all(|p| {
        let rel = format!("curves/{}.csv", p.name());
        fs::read(ra.dir.join(&rel)).unwrap() == fs::read(rb.dir.join(&rel)).unwrap()
    });
    checks.push(("tiny reproduction csvs".into(), same));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    Outcome::new(
        9,
        "determinism",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} repeated runs bit-identical", checks.len())
        } else {
            format!("differences in: {}", failed.join(", "))
        },
    )
}

fn main() {
    // answer `--list` so test runners can enumerate the target
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut outcomes = vec![
        report(criterion_1()),
        report(criterion_2()),
        report(criterion_3()),
        report(criterion_4()),
        report(criterion_5()),
    ];

    let run_dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let run = desk_run(run_dir.path());
    let total = t0.elapsed().as_secs_f64();
    let train_secs: f64 = run.models.iter().map(|m| m.log.wall_clock_secs).sum();
    // evaluation time is shared; charge it to both models
    let eval_secs = (total - train_secs).max(0.0);
    outcomes.push(report(criterion_6(&run, eval_secs)));
    outcomes.push(report(criterion_7(&run, eval_secs)));
    outcomes.push(report(criterion_8(&run)));
    outcomes.push(report(criterion_9(&run)));

    println!();
    println!("summary:");
    for o in &outcomes {
        println!("  {}", o.line());
    }
    let failed = outcomes.iter().filter(|o| o.status == Status::Fail).count();
    println!("{} of {} criteria pass", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
