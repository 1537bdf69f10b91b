//! Exposure, group exposure disparity (full-list and top-K), and the
//! moving-average estimator `G2` of the fairness-regularizer gradient.
//!
//! The per-query regularizer is written as `f_q(g_a, g_b, g_q)` with
//!
//! ```text
//! f_q(z1, z2, z3) = 1/2 * ((z1 - z2) / (N_q z3))^2
//! g_a = mean_{i in A} ψ(h_i - λ) exp(h_i)      g_b likewise over B
//! g_q = mean_{j in S_q} exp(h_j)
//! ```
//!
//! `f_q` only depends on the ratios `z1/z3`, `z2/z3`, so every `exp(h)` is taken
//! relative to a per-query shift; the shift cancels in all returned values.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{BatchSample, Dataset, Group, QueryGroup};
use crate::error::{Error, Result};
use crate::lambda_solver::{sigmoid, solve_lambda_exactly_smoothed, SmoothingParams};
use crate::model::ScoringModel;

/// Smooth surrogate `ψ` of the indicator `1(x > 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SmoothIndicator {
    /// `ψ(x) = 1 / (1 + exp(-x/τ))`.
    Sigmoid { temperature: f64 },
    /// `ψ ≡ 1`: reduces the top-K regularizer to the full-list one.
    One,
}

impl SmoothIndicator {
    pub fn sigmoid(temperature: f64) -> SmoothIndicator {
        SmoothIndicator::Sigmoid { temperature }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            SmoothIndicator::Sigmoid { temperature } => sigmoid(x / temperature),
            SmoothIndicator::One => 1.0,
        }
    }

    /// `ψ'(x) = ψ(1-ψ)/τ`.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            SmoothIndicator::Sigmoid { temperature } => {
                let s = sigmoid(x / temperature);
                s * (1.0 - s) / temperature
            }
            SmoothIndicator::One => 0.0,
        }
    }
}

/// Softmax of `scores` with max subtraction.
pub fn exposures(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&h| (h - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Exposure of item `x` within `items` for query row `q`.
pub fn exposure(m: &impl ScoringModel, q: usize, x: usize, items: &[usize]) -> Result<f64> {
    let pos = items.iter().position(|&i| i == x).ok_or(Error::Lookup {
        kind: "item in list",
        index: x,
        len: items.len(),
    })?;
    Ok(exposures(&m.scores(q, items)?)[pos])
}

fn group_means(values: &[f64], groups: &[Group]) -> Option<(f64, f64)> {
    let (mut sa, mut na, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &g) in values.iter().zip(groups) {
        match g {
            Group::A => {
                sa += v;
                na += 1;
            }
            Group::B => {
                sb += v;
                nb += 1;
            }
        }
    }
    if na == 0 || nb == 0 {
        None
    } else {
        Some((sa / na as f64, sb / nb as f64))
    }
}

/// `1/2 (mean_A e - mean_B e)^2`; `None` when a group is empty.
pub fn full_list_disparity_from_scores(scores: &[f64], groups: &[Group]) -> Option<f64> {
    let e = exposures(scores);
    group_means(&e, groups).map(|(a, b)| 0.5 * (a - b) * (a - b))
}

pub fn full_list_disparity(m: &impl ScoringModel, q: &QueryGroup) -> Result<Option<f64>> {
    let scores = m.scores(q.index, &q.item_ids())?;
    Ok(full_list_disparity_from_scores(&scores, &q.groups()))
}

/// Positions of the top `k` items ordered by descending score, then
/// ascending id. `k >= len` selects everything.
pub fn top_k_positions(scores: &[f64], ids: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    order.truncate(k.min(scores.len()));
    order
}

/// Signed top-K exposure gap `mean_A[1(top-K) e] - mean_B[1(top-K) e]`, with
/// exposures over the whole list and means over whole group sizes. `None`
/// when a group is empty.
pub fn topk_disparity_exact_from_scores(
    scores: &[f64],
    groups: &[Group],
    ids: &[usize],
    k: usize,
) -> Option<f64> {
    let e = exposures(scores);
    let mut selected = vec![0.0; scores.len()];
    for p in top_k_positions(scores, ids, k) {
        selected[p] = e[p];
    }
    group_means(&selected, groups).map(|(a, b)| a - b)
}

pub fn topk_disparity_exact(m: &impl ScoringModel, q: &QueryGroup, k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let ids = q.item_ids();
    let scores = m.scores(q.index, &ids)?;
    Ok(topk_disparity_exact_from_scores(&scores, &q.groups(), &ids, k))
}

/// `f_q` and its partial derivatives.
#[derive(Clone, Copy, Debug)]
struct Outer {
    value: f64,
    d1: f64,
    d3: f64,
}

fn outer(z1: f64, z2: f64, z3: f64, n_q: f64) -> Outer {
    let r = (z1 - z2) / (n_q * z3);
    Outer {
        value: 0.5 * r * r,
        d1: r / (n_q * z3),
        d3: -r * r / z3,
    }
}

/// Inner quantities `(g_a, g_b, g_q)` of one query relative to `shift`.
fn inner_values(
    scores: &[f64],
    groups: &[Group],
    lambda: f64,
    psi: SmoothIndicator,
    shift: f64,
) -> (f64, f64, f64) {
    let (mut sa, mut na, mut sb, mut nb, mut sq) = (0.0, 0usize, 0.0, 0usize, 0.0);
    for (&h, &g) in scores.iter().zip(groups) {
        let e = (h - shift).exp();
        sq += e;
        let w = psi.value(h - lambda) * e;
        match g {
            Group::A => {
                sa += w;
                na += 1;
            }
            Group::B => {
                sb += w;
                nb += 1;
            }
        }
    }
    (
        sa / na as f64,
        sb / nb as f64,
        sq / scores.len() as f64,
    )
}

/// `U_q^K(w, λ) = f_q(g_a, g_b, g_q)` for a given threshold `λ`; `None` when
/// a group is empty.
pub fn topk_disparity_surrogate_from_scores(
    scores: &[f64],
    groups: &[Group],
    lambda: f64,
    psi: SmoothIndicator,
) -> Option<f64> {
    if !groups.contains(&Group::A) || !groups.contains(&Group::B) {
        return None;
    }
    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (a, b, g) = inner_values(scores, groups, lambda, psi, shift);
    Some(outer(a, b, g, scores.len() as f64).value)
}

pub fn topk_disparity_surrogate(
    m: &impl ScoringModel,
    q: &QueryGroup,
    lambda: f64,
    psi: SmoothIndicator,
) -> Result<Option<f64>> {
    let scores = m.scores(q.index, &q.item_ids())?;
    Ok(topk_disparity_surrogate_from_scores(&scores, &q.groups(), lambda, psi))
}

/// Moving averages `(u_a, u_b, u_g)` of one query's inner quantities, all
/// relative to `exp(shift)`, fixed at the query's first touch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryFairnessState {
    pub u_a: f64,
    pub u_b: f64,
    pub u_g: f64,
    pub shift: f64,
}

impl QueryFairnessState {
    /// The tracked quantities on the unshifted scale.
    pub fn unshifted(&self) -> (f64, f64, f64) {
        let s = self.shift.exp();
        (self.u_a * s, self.u_b * s, self.u_g * s)
    }
}

/// Averaging weights `γ1, γ2, γ3` for `u_a, u_b, u_g`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessAveraging {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl FairnessAveraging {
    pub fn uniform(gamma: f64) -> FairnessAveraging {
        FairnessAveraging {
            gamma1: gamma,
            gamma2: gamma,
            gamma3: gamma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum G2Mode {
    /// Drops the `ψ'(h - λ)(∇h - ∇λ)` selector terms.
    Simplified,
    /// Keeps the selector terms, using the supplied `∇λ`.
    FullImplicit,
}

/// Current threshold estimate `λ_{q,t}` and, for [`G2Mode::FullImplicit`],
/// its parameter gradient `∇λ_{q,t}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdEstimate {
    pub lambda: f64,
    pub gradient: Option<Vec<f64>>,
}

/// How the group terms select items.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Smoothed top-K with per-query thresholds keyed by model query row.
    TopK {
        thresholds: &'a HashMap<usize, ThresholdEstimate>,
        psi: SmoothIndicator,
        mode: G2Mode,
    },
    /// Whole-list exposure disparity (`ψ ≡ 1`, no threshold).
    FullList,
}

/// Computes `G2 = 1/|B_Q| sum_q [∇₁f_q ∇ĝ_a + ∇₂f_q ∇ĝ_b + ∇₃f_q ∇ĝ_q]`,
/// updating each sampled query's `(u_a, u_b, u_g)` first. Queries flagged
/// `fairness_skipped` count in `|B_Q|` but contribute nothing.
pub fn g2_estimate(
    m: &impl ScoringModel,
    d: &Dataset,
    batch: &BatchSample,
    states: &mut HashMap<usize, QueryFairnessState>,
    selection: Selection<'_>,
    averaging: FairnessAveraging,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m.params().len()];
    g2_accumulate(m, d, batch, states, selection, averaging, &mut out)?;
    Ok(out)
}

/// As [`g2_estimate`] but adds into `out`; returns the batch estimate of `U`
/// at the updated states.
pub fn g2_accumulate(
    m: &impl ScoringModel,
    d: &Dataset,
    batch: &BatchSample,
    states: &mut HashMap<usize, QueryFairnessState>,
    selection: Selection<'_>,
    averaging: FairnessAveraging,
    out: &mut [f64],
) -> Result<f64> {
    if batch.queries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv_q = 1.0 / batch.queries.len() as f64;
    let mut loss = 0.0;
    for qb in &batch.queries {
        if qb.fairness_skipped || qb.group_a.is_empty() || qb.group_b.is_empty() {
            continue;
        }
        let q = &d.queries()[qb.query];
        let row = q.index;
        let (lambda, dlambda, psi, full) = match selection {
            Selection::TopK {
                thresholds,
                psi,
                mode,
            } => {
                let t = thresholds.get(&row).ok_or_else(|| {
                    Error::State(format!("no threshold estimate for query {}", q.id))
                })?;
                let dl = match mode {
                    G2Mode::FullImplicit => Some(t.gradient.as_ref().ok_or_else(|| {
                        Error::State(format!("no threshold gradient for query {}", q.id))
                    })?),
                    G2Mode::Simplified => None,
                };
                (t.lambda, dl, psi, mode == G2Mode::FullImplicit)
            }
            Selection::FullList => (0.0, None, SmoothIndicator::One, false),
        };
        let score_of = |p: usize| -> Result<f64> { m.score(row, q.items[p].item) };
        let ha: Vec<f64> = qb.group_a.iter().map(|&p| score_of(p)).collect::<Result<_>>()?;
        let hb: Vec<f64> = qb.group_b.iter().map(|&p| score_of(p)).collect::<Result<_>>()?;
        let hq: Vec<f64> = qb.items.iter().map(|&p| score_of(p)).collect::<Result<_>>()?;

        let state = states.entry(row).or_insert_with(|| {
            let shift = ha
                .iter()
                .chain(&hb)
                .chain(&hq)
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            QueryFairnessState {
                u_a: f64::NAN,
                u_b: f64::NAN,
                u_g: f64::NAN,
                shift,
            }
        });
        let shift = state.shift;
        let mean_sel = |hs: &[f64]| -> f64 {
            hs.iter()
                .map(|&h| psi.value(h - lambda) * (h - shift).exp())
                .sum::<f64>()
                / hs.len() as f64
        };
        let est_a = mean_sel(&ha);
        let est_b = mean_sel(&hb);
        let est_q = hq.iter().map(|&h| (h - shift).exp()).sum::<f64>() / hq.len() as f64;
        let blend = |old: f64, new: f64, g: f64| {
            if old.is_nan() {
                new
            } else {
                g * new + (1.0 - g) * old
            }
        };
        state.u_a = blend(state.u_a, est_a, averaging.gamma1);
        state.u_b = blend(state.u_b, est_b, averaging.gamma2);
        state.u_g = blend(state.u_g, est_q, averaging.gamma3);

        let f = outer(state.u_a, state.u_b, state.u_g, q.len() as f64);
        loss += inv_q * f.value;
        let coef_a = inv_q * f.d1;
        let coef_b = -inv_q * f.d1;
        let coef_q = inv_q * f.d3;

        let mut lambda_coef = 0.0;
        let mut push_group = |positions: &[usize], hs: &[f64], coef: f64| {
            let scale = coef / positions.len() as f64;
            for (&p, &h) in positions.iter().zip(hs) {
                let e = (h - shift).exp();
                let mut c = psi.value(h - lambda) * e;
                if full {
                    let dpsi = psi.derivative(h - lambda) * e;
                    c += dpsi;
                    lambda_coef -= scale * dpsi;
                }
                m.accumulate_gradient(row, q.items[p].item, scale * c, out);
            }
        };
        push_group(&qb.group_a, &ha, coef_a);
        push_group(&qb.group_b, &hb, coef_b);
        let scale_q = coef_q / qb.items.len() as f64;
        for (&p, &h) in qb.items.iter().zip(&hq) {
            m.accumulate_gradient(row, q.items[p].item, scale_q * (h - shift).exp(), out);
        }
        if let Some(dl) = dlambda {
            if lambda_coef != 0.0 {
                for (o, &g) in out.iter_mut().zip(dl) {
                    *o += lambda_coef * g;
                }
            }
        }
    }
    Ok(loss)
}

/// Full-batch top-K regularizer `U(w) = 1/N sum_q U_q^K(w, λ̂_q(w))` with each
/// `λ̂_q` re-solved to `tol`; queries with an empty group contribute 0 but
/// count in `N`.
pub fn topk_objective(
    m: &impl ScoringModel,
    d: &Dataset,
    p: &SmoothingParams,
    psi: SmoothIndicator,
    tol: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for q in d.queries() {
        let scores = m.scores(q.index, &q.item_ids())?;
        let lambda = solve_lambda_exactly_smoothed(&scores, p, tol)?;
        total += topk_disparity_surrogate_from_scores(&scores, &q.groups(), lambda, psi)
            .unwrap_or(0.0);
    }
    Ok(total / d.num_queries() as f64)
}

/// Full-batch full-list regularizer `1/N sum_q U_q(w)`.
pub fn full_list_objective(m: &impl ScoringModel, d: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for q in d.queries() {
        total += full_list_disparity(m, q)?.unwrap_or(0.0);
    }
    Ok(total / d.num_queries() as f64)
}

/// Mean absolute and mean squared signed gaps over the defined entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub mae: f64,
    pub mse: f64,
    pub count: usize,
    pub skipped: usize,
}

pub fn summarize_gaps(gaps: &[Option<f64>]) -> GapSummary {
    let defined: Vec<f64> = gaps.iter().flatten().copied().collect();
    let count = defined.len();
    let skipped = gaps.len() - count;
    if count == 0 {
        return GapSummary {
            mae: 0.0,
            mse: 0.0,
            count,
            skipped,
        };
    }
    GapSummary {
        mae: defined.iter().map(|g| g.abs()).sum::<f64>() / count as f64,
        mse: defined.iter().map(|g| g * g).sum::<f64>() / count as f64,
        count,
        skipped,
    }
}
