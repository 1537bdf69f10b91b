//! Top-K threshold: the exact (K+1)-th largest score, the smoothed strongly
//! convex lower-level objective
//!
//! ```text
//! G(λ) = (K+ε)/N λ + τ₂/2 λ² + 1/|B| Σ_{i∈B} τ₁ ln(1 + exp((h_i - λ)/τ₁))
//! ```
//!
//! its derivatives, an offline safeguarded-Newton solver, the online
//! moving-average state update, and the implicit gradient of the minimizer
//! with respect to model parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ScoringModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    pub tau1: f64,
    pub tau2: f64,
    pub epsilon: f64,
    pub k: usize,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams {
            tau1: 1e-2,
            tau2: 1e-4,
            epsilon: 0.5,
            k: 10,
        }
    }
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(Error::Config(format!(
                "tau1 and tau2 must be positive, got {} and {}",
                self.tau1, self.tau2
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie strictly inside (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// The (K+1)-th largest score, duplicates counted with multiplicity.
pub fn exact_lambda(scores: &[f64], k: usize) -> Result<f64> {
    if k + 1 > scores.len() {
        return Err(Error::Range {
            index: k,
            len: scores.len(),
        });
    }
    let mut buf = scores.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    Ok(*nth)
}

/// `G(λ)` over the supplied scores; `n_total` is the full list size `N_q`.
pub fn smoothed_objective(lambda: f64, scores: &[f64], n_total: usize, p: &SmoothingParams) -> f64 {
    let mean: f64 = scores
        .iter()
        .map(|&h| p.tau1 * softplus((h - lambda) / p.tau1))
        .sum::<f64>()
        / scores.len() as f64;
    (p.k as f64 + p.epsilon) / n_total as f64 * lambda + 0.5 * p.tau2 * lambda * lambda + mean
}

/// `∂G/∂λ = (K+ε)/N + τ₂λ - mean σ((h_i - λ)/τ₁)`.
pub fn smoothed_grad(lambda: f64, scores: &[f64], n_total: usize, p: &SmoothingParams) -> f64 {
    let mean: f64 = scores
        .iter()
        .map(|&h| sigmoid((h - lambda) / p.tau1))
        .sum::<f64>()
        / scores.len() as f64;
    (p.k as f64 + p.epsilon) / n_total as f64 + p.tau2 * lambda - mean
}

/// `∂²G/∂λ² = τ₂ + 1/(|B| τ₁) Σ σ(1-σ)`, never below `τ₂`.
pub fn smoothed_hess(lambda: f64, scores: &[f64], p: &SmoothingParams) -> f64 {
    let sum: f64 = scores
        .iter()
        .map(|&h| {
            let s = sigmoid((h - lambda) / p.tau1);
            s * (1.0 - s)
        })
        .sum();
    p.tau2 + sum / (scores.len() as f64 * p.tau1)
}

/// Adds `coef * ∂²G/∂λ∂w` into `out`:
/// `-1/(|B| τ₁) Σ σ(1-σ) ∇h_i` over `items` of query row `q`.
pub fn accumulate_cross_grad(
    lambda: f64,
    m: &impl ScoringModel,
    q: usize,
    items: &[usize],
    p: &SmoothingParams,
    coef: f64,
    out: &mut [f64],
) -> Result<()> {
    let scale = -coef / (items.len() as f64 * p.tau1);
    for &x in items {
        let h = m.score(q, x)?;
        let s = sigmoid((h - lambda) / p.tau1);
        m.accumulate_gradient(q, x, scale * s * (1.0 - s), out);
    }
    Ok(())
}

/// `∂²G/∂λ∂w` estimated over `items`.
pub fn cross_grad(
    lambda: f64,
    m: &impl ScoringModel,
    q: usize,
    items: &[usize],
    p: &SmoothingParams,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m.params().len()];
    accumulate_cross_grad(lambda, m, q, items, p, 1.0, &mut out)?;
    Ok(out)
}

/// Implicit-function gradient `∇λ = -∂²G/∂λ∂w / hess`.
pub fn implicit_gradient(
    lambda: f64,
    hess: f64,
    m: &impl ScoringModel,
    q: usize,
    items: &[usize],
    p: &SmoothingParams,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m.params().len()];
    accumulate_cross_grad(lambda, m, q, items, p, -1.0 / hess, &mut out)?;
    Ok(out)
}

/// Minimizes `G` over the full list (`N_q = scores.len()`) to `|G'| <= tol`.
pub fn solve_lambda_exactly_smoothed(scores: &[f64], p: &SmoothingParams, tol: f64) -> Result<f64> {
    solve_smoothed(scores, scores.len(), p, tol)
}

/// Safeguarded Newton on `G'`, with bisection whenever a Newton step leaves
/// the current bracket or fails to shrink it fast enough.
pub fn solve_smoothed(scores: &[f64], n_total: usize, p: &SmoothingParams, tol: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Range { index: 0, len: 0 });
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let grad = |l: f64| smoothed_grad(l, scores, n_total, p);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = min - 1.0;
    let mut hi = max + (p.k as f64 + p.epsilon) / (p.tau2 * n_total as f64) + 1.0;
    // G' is strictly increasing; widen until the bracket straddles the root.
    let mut widen = 1.0;
    while grad(lo) > 0.0 {
        widen *= 2.0;
        lo = min - widen;
        if widen > 1e300 {
            return Err(Error::Internal("lower bracket for lambda not found".into()));
        }
    }
    widen = 1.0;
    while grad(hi) < 0.0 {
        widen *= 2.0;
        hi = max + widen;
        if widen > 1e300 {
            return Err(Error::Internal("upper bracket for lambda not found".into()));
        }
    }
    // Warm start at the order statistic when it lies inside the bracket.
    let mut x = if p.k < scores.len() {
        exact_lambda(scores, p.k)?.clamp(lo, hi)
    } else {
        0.5 * (lo + hi)
    };
    let mut step_old = hi - lo;
    let mut step = step_old;
    let mut g = grad(x);
    for _ in 0..1000 {
        if g.abs() <= tol {
            return Ok(x);
        }
        if g > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let h = smoothed_hess(x, scores, p);
        let newton_outside = ((x - hi) * h - g) * ((x - lo) * h - g) > 0.0;
        let newton_slow = (2.0 * g).abs() > (step_old * h).abs();
        step_old = step;
        if newton_outside || newton_slow {
            step = 0.5 * (hi - lo);
            x = lo + step;
        } else {
            step = g / h;
            x -= step;
        }
        g = grad(x);
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            break;
        }
    }
    if g.abs() <= tol {
        Ok(x)
    } else {
        Err(Error::Internal(format!(
            "lambda solver did not reach tolerance {tol}, residual {g}"
        )))
    }
}

/// Per-query online threshold state `(λ, s, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    pub lambda: f64,
    /// Moving average of `∂²G/∂λ²`.
    pub s: f64,
    /// Moving average of `∂G/∂λ`.
    pub v: f64,
}

impl LambdaState {
    /// First-touch initialization from a sampled sub-list of a query with
    /// `n_total` items: `λ` is the order statistic at the proportional rank
    /// `ceil((K+1) |B| / N)`, `s = τ₂ + 1/(4τ₁)`, `v = 0`.
    pub fn warm_start(batch_scores: &[f64], n_total: usize, p: &SmoothingParams) -> LambdaState {
        let b = batch_scores.len();
        let rank = (((p.k + 1) * b) as f64 / n_total as f64).ceil() as usize;
        let rank = rank.clamp(1, b.max(1));
        let lambda = if b == 0 {
            0.0
        } else {
            exact_lambda(batch_scores, rank - 1).expect("rank within batch")
        };
        LambdaState {
            lambda,
            s: p.tau2 + 1.0 / (4.0 * p.tau1),
            v: 0.0,
        }
    }

    /// Moving-average update of `s` and `v` on one mini-batch followed by
    /// `λ ← λ - η₀ v`.
    pub fn step(
        &mut self,
        batch_scores: &[f64],
        n_total: usize,
        p: &SmoothingParams,
        gamma4: f64,
        eta0: f64,
    ) {
        let hess = smoothed_hess(self.lambda, batch_scores, p);
        let grad = smoothed_grad(self.lambda, batch_scores, n_total, p);
        self.s = (1.0 - gamma4) * self.s + gamma4 * hess;
        self.v = (1.0 - gamma4) * self.v + gamma4 * grad;
        self.lambda -= eta0 * self.v;
    }
}

/// [`LambdaState::step`] on the model's scores for `items` of query row `q`.
#[allow(clippy::too_many_arguments)]
pub fn state_step(
    st: &mut LambdaState,
    m: &impl ScoringModel,
    q: usize,
    items: &[usize],
    n_total: usize,
    p: &SmoothingParams,
    gamma4: f64,
    eta0: f64,
) -> Result<()> {
    let scores = m.scores(q, items)?;
    st.step(&scores, n_total, p, gamma4, eta0);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn order_statistic_examples() {
        assert_eq!(exact_lambda(&[5.0, 4.0, 3.0, 2.0, 1.0], 2).unwrap(), 3.0);
        assert_eq!(exact_lambda(&[7.0, 7.0, 7.0], 1).unwrap(), 7.0);
        assert!(matches!(exact_lambda(&[1.0, 2.0], 2), Err(Error::Range { .. })));
    }

    #[test]
    fn order_statistic_matches_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(2..60);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let k = rng.random_range(0..n - 1);
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert_eq!(exact_lambda(&v, k).unwrap(), sorted[k]);
        }
    }

    #[test]
    fn gradient_sign_for_large_lambda() {
        let p = SmoothingParams::default();
        assert!(smoothed_grad(1e3, &[0.0, 1.0, 2.0], 3, &p) > 0.0);
    }

    #[test]
    fn two_point_root_is_analytic() {
        let p = SmoothingParams {
            tau1: 0.2,
            tau2: 1e-300,
            epsilon: 0.5,
            k: 1,
        };
        // σ(-λ/τ₁) = 0.75 at the root.
        let expected = -p.tau1 * 3f64.ln();
        assert!(smoothed_grad(expected, &[0.0, 0.0], 2, &p).abs() < 1e-12);
        let solved = solve_lambda_exactly_smoothed(&[0.0, 0.0], &p, 1e-13).unwrap();
        assert!((solved - expected).abs() < 1e-10, "{solved} vs {expected}");
    }

    #[test]
    fn hessian_lower_bound_and_saturation() {
        let p = SmoothingParams {
            tau1: 1e-3,
            tau2: 0.5,
            epsilon: 0.5,
            k: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let l = rng.random_range(-3.0..3.0);
            assert!(smoothed_hess(l, &s, &p) >= p.tau2);
        }
        let far = smoothed_hess(0.0, &[5.0, -5.0, 7.0], &p);
        assert!((far - p.tau2).abs() < 1e-9);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let p = SmoothingParams {
            tau1: 0.3,
            tau2: 0.01,
            epsilon: 0.5,
            k: 3,
        };
        let s = [0.3, -1.2, 2.0, 0.9, 0.1, -0.4];
        let n = 9;
        for &l in &[-1.0, 0.0, 0.45, 1.7] {
            let h = 1e-5;
            let fd = (smoothed_objective(l + h, &s, n, &p) - smoothed_objective(l - h, &s, n, &p))
                / (2.0 * h);
            let g = smoothed_grad(l, &s, n, &p);
            assert!((fd - g).abs() / g.abs().max(1e-3) < 1e-8, "{fd} {g}");
            let fd2 = (smoothed_grad(l + h, &s, n, &p) - smoothed_grad(l - h, &s, n, &p)) / (2.0 * h);
            let hs = smoothed_hess(l, &s, &p);
            assert!((fd2 - hs).abs() / hs < 1e-6, "{fd2} {hs}");
        }
    }

    #[test]
    fn solver_contract() {
        let p = SmoothingParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..50).map(|_| rng.random_range(-4.0..4.0)).collect();
        let l = solve_lambda_exactly_smoothed(&s, &p, 1e-12).unwrap();
        assert!(smoothed_grad(l, &s, s.len(), &p).abs() <= 1e-12);
        assert!(smoothed_hess(l, &s, &p) > 0.0);
    }

    #[test]
    fn wide_smoothing_still_brackets() {
        let p = SmoothingParams {
            tau1: 5.0,
            tau2: 1e-4,
            epsilon: 0.9,
            k: 8,
        };
        let s: Vec<f64> = (0..10).map(|i| i as f64 + 100.0).collect();
        let l = solve_lambda_exactly_smoothed(&s, &p, 1e-10).unwrap();
        assert!(smoothed_grad(l, &s, 10, &p).abs() <= 1e-10);
    }

    #[test]
    fn frozen_step_keeps_lambda() {
        let p = SmoothingParams::default();
        let mut st = LambdaState {
            lambda: 0.3,
            s: 1.0,
            v: 0.0,
        };
        st.step(&[1.0, 0.0, -1.0], 3, &p, 1.0, 0.0);
        assert_eq!(st.lambda, 0.3);
        assert_eq!(st.s, smoothed_hess(0.3, &[1.0, 0.0, -1.0], &p));
        assert_eq!(st.v, smoothed_grad(0.3, &[1.0, 0.0, -1.0], 3, &p));
    }

    #[test]
    fn online_iteration_reaches_offline_solution() {
        let p = SmoothingParams {
            tau1: 0.05,
            tau2: 1e-3,
            epsilon: 0.5,
            k: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = solve_lambda_exactly_smoothed(&s, &p, 1e-13).unwrap();
        let mut st = LambdaState::warm_start(&s, s.len(), &p);
        let eta0 = 1.0 / smoothed_hess(st.lambda, &s, &p);
        for _ in 0..10_000 {
            st.step(&s, s.len(), &p, 1.0, eta0);
            if st.v.abs() <= 1e-10 {
                break;
            }
        }
        assert!((st.lambda - target).abs() < 1e-6);
        // stationarity at the fixed point
        let mut at = LambdaState {
            lambda: target,
            s: 1.0,
            v: 0.0,
        };
        at.step(&s, s.len(), &p, 1.0, eta0);
        assert!(at.v.abs() < 1e-12 && (at.lambda - target).abs() < 1e-12);
    }

    #[test]
    fn warm_start_uses_proportional_rank() {
        let p = SmoothingParams {
            k: 3,
            ..SmoothingParams::default()
        };
        let full: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(LambdaState::warm_start(&full, 10, &p).lambda, 6.0);
        // half the list sampled: rank ceil(4 * 5 / 10) = 2
        let half = [9.0, 7.0, 5.0, 3.0, 1.0];
        assert_eq!(LambdaState::warm_start(&half, 10, &p).lambda, 7.0);
    }
}
