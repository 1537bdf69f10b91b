//! Rank functions, smooth rank surrogates, the NDCG and ListNet losses, and
//! the moving-average estimator `G1` of the ranking-loss gradient.
//!
//! The ranking objective is the finite-sum composition
//! `L(w) = 1/|S| * sum_{(q,i)} f_{q,i}(g(w; x_i, S_q))` where `g` is a
//! per-item mean over the query's list:
//!
//! | loss    | inner `g`                              | outer `f_{q,i}(g)`                          |
//! |---------|----------------------------------------|---------------------------------------------|
//! | NDCG    | `mean_j (h_j - h_i + c)_+^2`           | `(1 - 2^y_i) / (Z_q log2(N_q g + 1))`       |
//! | ListNet | `mean_j exp(h_j - h_i)`                | `softmax(y)_i * ln(N_q g)`                  |

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{BatchSample, Dataset};
use crate::error::{Error, Result};
use crate::model::ScoringModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RankLossKind {
    /// Squared-hinge NDCG surrogate with margin `c > 0`.
    Ndcg { margin: f64 },
    ListNet,
}

impl RankLossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankLossKind::Ndcg { margin } if !(margin > 0.0 && margin.is_finite()) => Err(
                Error::Config(format!("hinge margin must be positive, got {margin}")),
            ),
            _ => Ok(()),
        }
    }

    /// Pairwise surrogate `l(h_j - h_i)`.
    #[inline]
    pub fn pair_term(&self, diff: f64) -> f64 {
        match *self {
            RankLossKind::Ndcg { margin } => squared_hinge(diff, margin),
            RankLossKind::ListNet => diff.exp(),
        }
    }

    #[inline]
    pub fn pair_term_derivative(&self, diff: f64) -> f64 {
        match *self {
            RankLossKind::Ndcg { margin } => 2.0 * (diff + margin).max(0.0),
            RankLossKind::ListNet => diff.exp(),
        }
    }
}

/// `sum_j 1(scores[j] - scores[i] >= 0)`; the top item has rank 1 and tied
/// items share the pessimistic rank.
pub fn exact_rank(scores: &[f64], i: usize) -> usize {
    let si = scores[i];
    scores.iter().filter(|&&s| s - si >= 0.0).count()
}

#[inline]
pub fn squared_hinge(x: f64, margin: f64) -> f64 {
    let t = (x + margin).max(0.0);
    t * t
}

pub fn gain(relevance: f64) -> f64 {
    relevance.exp2() - 1.0
}

/// DCG of the label multiset sorted descending (log base 2 discount).
pub fn ideal_dcg(labels: &[f64]) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted
        .iter()
        .enumerate()
        .map(|(r, &y)| gain(y) / ((r + 2) as f64).log2())
        .sum()
}

fn position_of(items: &[usize], i: usize) -> Result<usize> {
    items
        .iter()
        .position(|&x| x == i)
        .ok_or(Error::Lookup {
            kind: "item in list",
            index: i,
            len: items.len(),
        })
}

/// `sum_{x' in items} (h(x') - h(x_i) + c)_+^2`, at least `c^2`.
pub fn surrogate_rank_hinge(
    m: &impl ScoringModel,
    q: usize,
    i: usize,
    items: &[usize],
    margin: f64,
) -> Result<f64> {
    let pos = position_of(items, i)?;
    let scores = m.scores(q, items)?;
    Ok(surrogate_rank_from_scores(
        &scores,
        pos,
        RankLossKind::Ndcg { margin },
    ))
}

/// `sum_{x' in items} exp(h(x') - h(x_i))`, at least 1. Its reciprocal is the
/// exposure of `x_i`.
pub fn surrogate_rank_exp(m: &impl ScoringModel, q: usize, i: usize, items: &[usize]) -> Result<f64> {
    let pos = position_of(items, i)?;
    let scores = m.scores(q, items)?;
    Ok(surrogate_rank_from_scores(&scores, pos, RankLossKind::ListNet))
}

pub fn surrogate_rank_from_scores(scores: &[f64], pos: usize, kind: RankLossKind) -> f64 {
    let hi = scores[pos];
    scores.iter().map(|&h| kind.pair_term(h - hi)).sum()
}

/// Gradient of the hinge surrogate rank with respect to the model parameters.
pub fn surrogate_rank_hinge_gradient(
    m: &impl ScoringModel,
    q: usize,
    i: usize,
    items: &[usize],
    margin: f64,
) -> Result<Vec<f64>> {
    let pos = position_of(items, i)?;
    let scores = m.scores(q, items)?;
    let kind = RankLossKind::Ndcg { margin };
    let mut out = vec![0.0; m.params().len()];
    let hi = scores[pos];
    let mut self_coef = 0.0;
    for (&x, &h) in items.iter().zip(&scores) {
        let dl = kind.pair_term_derivative(h - hi);
        m.accumulate_gradient(q, x, dl, &mut out);
        self_coef -= dl;
    }
    m.accumulate_gradient(q, i, self_coef, &mut out);
    Ok(out)
}

/// A loss value that may be degenerate (no positive-gain labels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub degenerate: bool,
}

/// `-(1/Z_q) sum_i (2^y_i - 1) / log2(1 + gbar_i)` with `Z_q` the ideal DCG.
/// All-zero labels give 0 with `degenerate` set.
pub fn ndcg_loss(
    m: &impl ScoringModel,
    q: usize,
    items: &[usize],
    labels: &[f64],
    margin: f64,
) -> Result<LossValue> {
    check_aligned(items, labels)?;
    let scores = m.scores(q, items)?;
    Ok(ndcg_loss_from_scores(&scores, labels, margin))
}

pub fn ndcg_loss_from_scores(scores: &[f64], labels: &[f64], margin: f64) -> LossValue {
    let z = ideal_dcg(labels);
    if z <= 0.0 {
        return LossValue {
            value: 0.0,
            degenerate: true,
        };
    }
    let kind = RankLossKind::Ndcg { margin };
    let total: f64 = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > 0.0)
        .map(|(i, &y)| gain(y) / (1.0 + surrogate_rank_from_scores(scores, i, kind)).log2())
        .sum();
    LossValue {
        value: -total / z,
        degenerate: false,
    }
}

/// `sum_i softmax(labels)_i * ln(sum_j exp(h_j - h_i))`.
pub fn listnet_loss(m: &impl ScoringModel, q: usize, items: &[usize], labels: &[f64]) -> Result<f64> {
    check_aligned(items, labels)?;
    let scores = m.scores(q, items)?;
    Ok(listnet_loss_from_scores(&scores, labels))
}

pub fn listnet_loss_from_scores(scores: &[f64], labels: &[f64]) -> f64 {
    let p = label_softmax(labels);
    p.iter()
        .enumerate()
        .map(|(i, &pi)| pi * surrogate_rank_from_scores(scores, i, RankLossKind::ListNet).ln())
        .sum()
}

fn label_softmax(labels: &[f64]) -> Vec<f64> {
    let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = labels.iter().map(|&y| (y - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn check_aligned(items: &[usize], labels: &[f64]) -> Result<()> {
    if items.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} items but {} labels",
            items.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// `L(w) = 1/|S| * sum_q L_q(w)` over every query of `d`.
pub fn ranking_objective(m: &impl ScoringModel, d: &Dataset, kind: RankLossKind) -> Result<f64> {
    let mut total = 0.0;
    for q in d.queries() {
        let items = q.item_ids();
        let labels = q.labels();
        let scores = m.scores(q.index, &items)?;
        total += match kind {
            RankLossKind::Ndcg { margin } => ndcg_loss_from_scores(&scores, &labels, margin).value,
            RankLossKind::ListNet => listnet_loss_from_scores(&scores, &labels),
        };
    }
    Ok(total / d.total_pairs() as f64)
}

/// Per-pair moving averages `u_{q,i}` of the inner functions `g(w; x_i, S_q)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairEstimatorTable {
    values: HashMap<(usize, usize), f64>,
    pub gamma0: f64,
}

impl PairEstimatorTable {
    pub fn new(gamma0: f64) -> PairEstimatorTable {
        PairEstimatorTable {
            values: HashMap::new(),
            gamma0,
        }
    }

    /// Keyed by (model query row, catalog item).
    pub fn get(&self, query: usize, item: usize) -> Option<f64> {
        self.values.get(&(query, item)).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Moves `u` toward `estimate`; the first touch stores `estimate` itself.
    pub fn update(&mut self, query: usize, item: usize, estimate: f64) -> f64 {
        let g = self.gamma0;
        let entry = self.values.entry((query, item)).or_insert(estimate);
        *entry = g * estimate + (1.0 - g) * *entry;
        *entry
    }
}

/// Outer function value and derivative `f_{q,i}(u)`, `f'_{q,i}(u)`.
fn outer(kind: RankLossKind, u: f64, n_q: f64, weight: f64) -> (f64, f64) {
    match kind {
        // weight = (2^y - 1) / Z_q
        RankLossKind::Ndcg { .. } => {
            if weight == 0.0 {
                return (0.0, 0.0);
            }
            let arg = n_q * u + 1.0;
            let l = arg.log2();
            let f = -weight / l;
            let df = weight * n_q / (arg * std::f64::consts::LN_2 * l * l);
            (f, df)
        }
        // weight = softmax(labels)_i
        RankLossKind::ListNet => (weight * (n_q * u).ln(), weight / u),
    }
}

/// Computes `G1 = 1/|B| sum_{(q,i) in B} f'_{q,i}(u_{q,i}) grad ghat_{q,i}`,
/// updating `u_{q,i}` for every pair first.
///
/// `ghat_{q,i}` keeps the self term `l(0)` exact and estimates the remaining
/// `N_q - 1` terms from `B_q \ {i}`; with `B_q = S_q` it equals `g` exactly.
pub fn g1_estimate(
    m: &impl ScoringModel,
    d: &Dataset,
    batch: &BatchSample,
    kind: RankLossKind,
    table: &mut PairEstimatorTable,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m.params().len()];
    g1_accumulate(m, d, batch, kind, table, &mut out)?;
    Ok(out)
}

/// As [`g1_estimate`] but adds into `out`; returns the batch estimate of `L`
/// evaluated at the updated `u` values.
pub fn g1_accumulate(
    m: &impl ScoringModel,
    d: &Dataset,
    batch: &BatchSample,
    kind: RankLossKind,
    table: &mut PairEstimatorTable,
    out: &mut [f64],
) -> Result<f64> {
    let n_pairs = batch.num_pairs();
    if n_pairs == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv_b = 1.0 / n_pairs as f64;
    let self_term = kind.pair_term(0.0);
    let mut loss = 0.0;
    for qb in &batch.queries {
        let q = &d.queries()[qb.query];
        let qrow = q.index;
        let n_q = q.len() as f64;
        let labels = q.labels();
        let weights: Vec<f64> = match kind {
            RankLossKind::Ndcg { .. } => {
                let z = ideal_dcg(&labels);
                labels
                    .iter()
                    .map(|&y| if z > 0.0 { gain(y) / z } else { 0.0 })
                    .collect()
            }
            RankLossKind::ListNet => label_softmax(&labels),
        };
        for &x in qb.items.iter().chain(&qb.pairs) {
            m.check_ids(qrow, q.items[x].item)?;
        }
        let bq_scores: Vec<f64> = qb
            .items
            .iter()
            .map(|&p| m.score_raw(qrow, q.items[p].item))
            .collect();
        let mut bq_coef = vec![0.0; qb.items.len()];
        for &pos in &qb.pairs {
            let item = q.items[pos].item;
            let hi = m.score_raw(qrow, item);
            let others = qb.items.iter().filter(|&&p| p != pos).count();
            let rest = if others > 0 {
                (n_q - 1.0) / others as f64
            } else {
                0.0
            };
            let mut sum = 0.0;
            for (&p, &h) in qb.items.iter().zip(&bq_scores) {
                if p != pos {
                    sum += kind.pair_term(h - hi);
                }
            }
            let estimate = (self_term + rest * sum) / n_q;
            let u = table.update(qrow, item, estimate);
            let (f, df) = outer(kind, u, n_q, weights[pos]);
            loss += inv_b * f;
            if df == 0.0 {
                continue;
            }
            let scale = inv_b * df * rest / n_q;
            let mut self_coef = 0.0;
            for ((&p, &h), c) in qb.items.iter().zip(&bq_scores).zip(bq_coef.iter_mut()) {
                if p != pos {
                    let dl = scale * kind.pair_term_derivative(h - hi);
                    *c += dl;
                    self_coef -= dl;
                }
            }
            m.accumulate_gradient(qrow, item, self_coef, out);
        }
        for (&p, &c) in qb.items.iter().zip(&bq_coef) {
            if c != 0.0 {
                m.accumulate_gradient(qrow, q.items[p].item, c, out);
            }
        }
    }
    Ok(loss)
}
