//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Each suite builds a small random instance from a seed, compares analytic
//! and central-difference derivatives with the norm-relative error
//! `‖a - b‖ / max(‖a‖, ‖b‖)`, and reports the largest error it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::data::{generate_synthetic, BatchSample, Dataset, SyntheticSpec};
use crate::error::Result;
use crate::fairness::{
    full_list_objective, g2_estimate, topk_objective, FairnessAveraging, G2Mode, Selection,
    SmoothIndicator, ThresholdEstimate,
};
use crate::lambda_solver::{
    cross_grad, implicit_gradient, smoothed_grad, smoothed_hess, smoothed_objective,
    solve_lambda_exactly_smoothed, SmoothingParams,
};
use crate::model::{FactorizationScorer, ScoringModel};
use crate::rank_losses::{g1_estimate, ranking_objective, PairEstimatorTable, RankLossKind};

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Scalar version of [`relative_error`].
pub fn relative_error_scalar(a: f64, b: f64) -> f64 {
    relative_error(&[a], &[b])
}

/// Central differences of `f` over every parameter of `m`.
pub fn fd_gradient<M, F>(m: &M, step: f64, mut f: F) -> Result<Vec<f64>>
where
    M: ScoringModel + Clone,
    F: FnMut(&M) -> Result<f64>,
{
    let mut probe = m.clone();
    let n = m.params().len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let w = m.params().values()[i];
        probe.params_mut().values_mut()[i] = w + step;
        let up = f(&probe)?;
        probe.params_mut().values_mut()[i] = w - step;
        let down = f(&probe)?;
        probe.params_mut().values_mut()[i] = w;
        *o = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// A factorization model with parameters drawn from `N(0, std^2)`, which
/// spreads scores well beyond the near-zero initialization.
pub fn random_model(d: &Dataset, dim: usize, std: f64, seed: u64) -> Result<FactorizationScorer> {
    let mut m = FactorizationScorer::zeros(d.query_slots(), d.num_items(), dim, 10.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("valid normal");
    for w in m.params_mut().values_mut() {
        *w = normal.sample(&mut rng);
    }
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<CheckEntry>,
}

impl SuiteReport {
    fn new(suite: &'static str) -> SuiteReport {
        SuiteReport {
            suite,
            checks: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, error: f64) {
        self.checks.push(CheckEntry {
            name: name.into(),
            error,
        });
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.error).fold(0.0, f64::max)
    }
}

/// Full-batch `G1` with `γ₀ = 1` against differences of `L(w)` for the NDCG
/// and ListNet losses on `num_queries × items_per_query` data.
pub fn rank_loss_suite(
    num_queries: usize,
    items_per_query: usize,
    dim: usize,
    seed: u64,
) -> Result<SuiteReport> {
    let d = generate_synthetic(&SyntheticSpec {
        num_queries,
        items_per_query,
        minority_fraction: 0.3,
        bias: 1.0,
        seed,
    })?;
    let m = random_model(&d, dim, 0.5, seed.wrapping_add(1))?;
    let batch = BatchSample::full(&d);
    let mut report = SuiteReport::new("rank_losses");
    for (name, kind) in [
        ("ndcg", RankLossKind::Ndcg { margin: 1.0 }),
        ("listnet", RankLossKind::ListNet),
    ] {
        let mut table = PairEstimatorTable::new(1.0);
        let analytic = g1_estimate(&m, &d, &batch, kind, &mut table)?;
        let numeric = fd_gradient(&m, FD_STEP, |p| ranking_objective(p, &d, kind))?;
        report.push(format!("G1 {name}"), relative_error(&analytic, &numeric));
    }
    Ok(report)
}

/// Fixture for the fairness suite: 5-item queries with both groups present.
pub fn five_item_fixture(num_queries: usize, seed: u64) -> Result<(Dataset, FactorizationScorer)> {
    let d = generate_synthetic(&SyntheticSpec {
        num_queries,
        items_per_query: 5,
        minority_fraction: 0.4,
        bias: 0.5,
        seed,
    })?;
    let m = random_model(&d, 4, 0.15, seed.wrapping_add(1))?;
    Ok((d, m))
}

/// Full-batch `G2` with `γ₁ = γ₂ = γ₃ = 1` against differences of `U(w)`:
/// top-K mode with the implicit threshold gradient (thresholds re-solved at
/// every perturbed point) and full-list mode.
pub fn fairness_suite(num_queries: usize, k: usize, seed: u64) -> Result<SuiteReport> {
    let (d, m) = five_item_fixture(num_queries, seed)?;
    let p = SmoothingParams {
        k,
        ..SmoothingParams::default()
    };
    let psi = SmoothIndicator::sigmoid(0.1);
    let batch = BatchSample::full(&d);
    let mut report = SuiteReport::new("fairness");

    let mut thresholds = std::collections::HashMap::new();
    for q in d.queries() {
        let items = q.item_ids();
        let scores = m.scores(q.index, &items)?;
        let lambda = solve_lambda_exactly_smoothed(&scores, &p, 1e-10)?;
        let hess = smoothed_hess(lambda, &scores, &p);
        let gradient = implicit_gradient(lambda, hess, &m, q.index, &items, &p)?;
        thresholds.insert(
            q.index,
            ThresholdEstimate {
                lambda,
                gradient: Some(gradient),
            },
        );
    }
    let mut states = Default::default();
    let analytic = g2_estimate(
        &m,
        &d,
        &batch,
        &mut states,
        Selection::TopK {
            thresholds: &thresholds,
            psi,
            mode: G2Mode::FullImplicit,
        },
        FairnessAveraging::uniform(1.0),
    )?;
    let numeric = fd_gradient(&m, FD_STEP, |w| topk_objective(w, &d, &p, psi, 1e-13))?;
    report.push("G2 top_k full_implicit", relative_error(&analytic, &numeric));

    let mut states = Default::default();
    let analytic = g2_estimate(
        &m,
        &d,
        &batch,
        &mut states,
        Selection::FullList,
        FairnessAveraging::uniform(1.0),
    )?;
    let numeric = fd_gradient(&m, FD_STEP, |w| full_list_objective(w, &d))?;
    report.push("G2 full_list", relative_error(&analytic, &numeric));
    Ok(report)
}

/// Derivatives of the smoothed threshold objective and the implicit
/// gradient of its minimizer on random score lists.
pub fn lambda_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("lambda_solver");
    let (mut e_grad, mut e_hess) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let n = rng.random_range(3..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = SmoothingParams {
            tau1: rng.random_range(0.05..0.5),
            tau2: 1e-4,
            epsilon: 0.5,
            k: rng.random_range(1..n),
        };
        let lambda = rng.random_range(-3.0..3.0);
        let h = 1e-5;
        let fd = (smoothed_objective(lambda + h, &scores, n, &p)
            - smoothed_objective(lambda - h, &scores, n, &p))
            / (2.0 * h);
        e_grad = e_grad.max(relative_error_scalar(smoothed_grad(lambda, &scores, n, &p), fd));
        let fd = (smoothed_grad(lambda + h, &scores, n, &p) - smoothed_grad(lambda - h, &scores, n, &p))
            / (2.0 * h);
        e_hess = e_hess.max(relative_error_scalar(smoothed_hess(lambda, &scores, &p), fd));
    }
    report.push("dG/dlambda", e_grad);
    report.push("d2G/dlambda2", e_hess);

    let d = generate_synthetic(&SyntheticSpec {
        num_queries: 3,
        items_per_query: 8,
        minority_fraction: 0.4,
        bias: 0.5,
        seed,
    })?;
    let m = random_model(&d, 4, 0.6, seed.wrapping_add(1))?;
    let p = SmoothingParams {
        tau1: 0.1,
        k: 3,
        ..SmoothingParams::default()
    };
    let (mut e_cross, mut e_implicit) = (0.0f64, 0.0f64);
    for q in d.queries() {
        let items = q.item_ids();
        let scores = m.scores(q.index, &items)?;
        let n = items.len();
        let lambda = solve_lambda_exactly_smoothed(&scores, &p, 1e-12)?;
        let analytic = cross_grad(lambda, &m, q.index, &items, &p)?;
        let numeric = fd_gradient(&m, FD_STEP, |w| {
            Ok(smoothed_grad(lambda, &w.scores(q.index, &items)?, n, &p))
        })?;
        e_cross = e_cross.max(relative_error(&analytic, &numeric));

        let hess = smoothed_hess(lambda, &scores, &p);
        let analytic = implicit_gradient(lambda, hess, &m, q.index, &items, &p)?;
        let numeric = fd_gradient(&m, FD_STEP, |w| {
            solve_lambda_exactly_smoothed(&w.scores(q.index, &items)?, &p, 1e-13)
        })?;
        e_implicit = e_implicit.max(relative_error(&analytic, &numeric));
    }
    report.push("d2G/dlambda dw", e_cross);
    report.push("implicit dlambda/dw", e_implicit);
    Ok(report)
}

/// Score gradients of the factorization model against central differences
/// on `trials` random (query, item, parameter) triples.
pub fn model_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let m = FactorizationScorer::init(6, 7, 3, 10.0, 1.5, seed.wrapping_add(t as u64))?;
        let mut m = m;
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        for w in m.params_mut().values_mut() {
            *w = normal.sample(&mut rng);
        }
        let q = rng.random_range(0..6);
        let x = rng.random_range(0..7);
        let analytic = m.score_gradient(q, x)?;
        let numeric = fd_gradient(&m, FD_STEP, |w| w.score(q, x))?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    let mut report = SuiteReport::new("model");
    report.push("score gradient", worst);
    Ok(report)
}

/// The three suites run by `grad-check`, at their default sizes.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        rank_loss_suite(20, 50, 8, seed)?,
        fairness_suite(8, 2, seed)?,
        lambda_suite(200, seed)?,
    ])
}
