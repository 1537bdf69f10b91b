//! Evaluation: NDCG@K, top-K exposure disparity MAE/MSE over sampled
//! evaluation lists, the C-sweep tradeoff harness, and ranking-strip export.
//!
//! # File formats
//!
//! Tradeoff CSV columns, in order:
//! `C,K,ndcg_mean,ndcg_std,mae,mse,ndcg_skipped,fairness_skipped,status`.
//! The JSON form is an object `{"rows": [...]}` with the same field names
//! (`c`, `k`, ...).
//!
//! Ranking strips: `<prefix>.csv` has header `query_id,gap,rank_1,...,rank_L`
//! and one row per query with cells `A`/`B` (empty past the end of a shorter
//! list); `<prefix>.ppm` is a binary P6 image, one pixel row per query, red for
//! A, green for B, gray padding.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Group};
use crate::error::{Error, Result};
use crate::fairness::{summarize_gaps, top_k_positions, topk_disparity_exact_from_scores};
use crate::model::{FactorizationScorer, ScoringModel};
use crate::optimizer::{self, TrainConfig, TrainOutcome};
use crate::rank_losses::gain;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub relevant_per_query: usize,
    pub irrelevant_per_query: usize,
    pub k_list: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            relevant_per_query: 5,
            irrelevant_per_query: 300,
            k_list: vec![50, 100, 200],
            seed: 0,
        }
    }
}

/// NDCG@K of `scores` against `labels`, ranking by descending score then
/// ascending id. `None` when no label is positive.
pub fn ndcg_at_k_from_scores(scores: &[f64], labels: &[f64], ids: &[usize], k: usize) -> Option<f64> {
    if !labels.iter().any(|&y| y > 0.0) || k == 0 {
        return None;
    }
    let dcg: f64 = top_k_positions(scores, ids, k)
        .iter()
        .enumerate()
        .map(|(r, &p)| gain(labels[p]) / ((r + 2) as f64).log2())
        .sum();
    let mut ideal = labels.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, &y)| gain(y) / ((r + 2) as f64).log2())
        .sum();
    Some((dcg / idcg).clamp(0.0, 1.0))
}

/// NDCG@K of the model's ranking of `items` for query row `q`.
pub fn ndcg_at_k(
    m: &impl ScoringModel,
    q: usize,
    items: &[usize],
    labels: &[f64],
    k: usize,
) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let scores = m.scores(q, items)?;
    Ok(ndcg_at_k_from_scores(&scores, labels, items, k))
}

/// A sampled evaluation list for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalList {
    pub query_row: usize,
    pub items: Vec<usize>,
    pub labels: Vec<f64>,
    pub groups: Vec<Group>,
}

/// Samples each query's evaluation list: up to `relevant_per_query` positive
/// items, then up to `irrelevant_per_query` unrated items taken from the
/// query's zero-label items and, when those run out, from catalog items the
/// query never observed (in `d` or any of `exclude`) with relevance 0.
pub fn sample_eval_lists(d: &Dataset, proto: &EvalProtocol, exclude: &[&Dataset]) -> Vec<EvalList> {
    let mut rng = ChaCha8Rng::seed_from_u64(proto.seed);
    let mut observed: Vec<HashSet<usize>> = vec![HashSet::new(); d.query_slots()];
    for ds in std::iter::once(&d).chain(exclude) {
        for q in ds.queries() {
            if q.index < observed.len() {
                observed[q.index].extend(q.items.iter().map(|it| it.item));
            }
        }
    }
    let mut lists = Vec::with_capacity(d.num_queries());
    for q in d.queries() {
        let relevant: Vec<usize> = (0..q.len()).filter(|&p| q.items[p].relevance > 0.0).collect();
        let zeros: Vec<usize> = (0..q.len()).filter(|&p| q.items[p].relevance <= 0.0).collect();
        let pick = |rng: &mut ChaCha8Rng, src: &[usize], n: usize| -> Vec<usize> {
            if n >= src.len() {
                src.to_vec()
            } else {
                index::sample(rng, src.len(), n)
                    .into_iter()
                    .map(|k| src[k])
                    .collect()
            }
        };
        let mut list = EvalList {
            query_row: q.index,
            items: Vec::new(),
            labels: Vec::new(),
            groups: Vec::new(),
        };
        for p in pick(&mut rng, &relevant, proto.relevant_per_query) {
            let it = &q.items[p];
            list.items.push(it.item);
            list.labels.push(it.relevance);
            list.groups.push(it.group);
        }
        let from_zero = pick(&mut rng, &zeros, proto.irrelevant_per_query);
        let missing = proto.irrelevant_per_query - from_zero.len();
        for p in from_zero {
            let it = &q.items[p];
            list.items.push(it.item);
            list.labels.push(0.0);
            list.groups.push(it.group);
        }
        if missing > 0 {
            let seen = &observed[q.index];
            let unobserved: Vec<usize> = (0..d.num_items()).filter(|i| !seen.contains(i)).collect();
            for x in pick(&mut rng, &unobserved, missing) {
                list.items.push(x);
                list.labels.push(0.0);
                list.groups.push(d.item_group(x));
            }
        }
        lists.push(list);
    }
    lists
}

/// Aggregated metrics at one cutoff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub mae: f64,
    pub mse: f64,
    pub ndcg_skipped: usize,
    pub fairness_skipped: usize,
}

/// Per-list scores, reused across cutoffs.
fn score_lists(m: &impl ScoringModel, lists: &[EvalList]) -> Result<Vec<Vec<f64>>> {
    lists.iter().map(|l| m.scores(l.query_row, &l.items)).collect()
}

fn metrics_at(lists: &[EvalList], scores: &[Vec<f64>], k: usize) -> KMetrics {
    let mut ndcgs = Vec::with_capacity(lists.len());
    let mut gaps = Vec::with_capacity(lists.len());
    for (l, s) in lists.iter().zip(scores) {
        if let Some(v) = ndcg_at_k_from_scores(s, &l.labels, &l.items, k) {
            ndcgs.push(v);
        }
        gaps.push(topk_disparity_exact_from_scores(s, &l.groups, &l.items, k));
    }
    let n = ndcgs.len();
    let (mean, std) = if n == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let mean = ndcgs.iter().sum::<f64>() / n as f64;
        let var = ndcgs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    let g = summarize_gaps(&gaps);
    KMetrics {
        k,
        ndcg_mean: mean,
        ndcg_std: std,
        mae: g.mae,
        mse: g.mse,
        ndcg_skipped: lists.len() - n,
        fairness_skipped: g.skipped,
    }
}

/// Metrics for every cutoff in `k_list` over pre-sampled lists.
pub fn evaluate_lists(m: &impl ScoringModel, lists: &[EvalList], k_list: &[usize]) -> Result<Vec<KMetrics>> {
    if k_list.contains(&0) {
        return Err(Error::Config("evaluation cutoffs must be at least 1".into()));
    }
    let scores = score_lists(m, lists)?;
    Ok(k_list.iter().map(|&k| metrics_at(lists, &scores, k)).collect())
}

pub fn evaluate(m: &impl ScoringModel, d: &Dataset, proto: &EvalProtocol) -> Result<Vec<KMetrics>> {
    evaluate_excluding(m, d, proto, &[])
}

/// As [`evaluate`], treating items observed in `exclude` as rated.
pub fn evaluate_excluding(
    m: &impl ScoringModel,
    d: &Dataset,
    proto: &EvalProtocol,
    exclude: &[&Dataset],
) -> Result<Vec<KMetrics>> {
    if d.num_queries() == 0 {
        return Err(Error::EmptyDataset);
    }
    let lists = sample_eval_lists(d, proto, exclude);
    evaluate_lists(m, &lists, &proto.k_list)
}

/// Fixed validation lists scored at a single cutoff during training.
#[derive(Clone, Debug)]
pub struct Validation {
    pub lists: Vec<EvalList>,
    pub k: usize,
}

impl Validation {
    pub fn new(d: &Dataset, proto: &EvalProtocol, exclude: &[&Dataset], k: usize) -> Validation {
        Validation {
            lists: sample_eval_lists(d, proto, exclude),
            k,
        }
    }

    pub fn measure(&self, m: &impl ScoringModel) -> Result<KMetrics> {
        Ok(metrics_at(&self.lists, &score_lists(m, &self.lists)?, self.k))
    }
}

/// Spearman rank correlation with average ranks for ties; `NaN` when either
/// input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &o in &order[i..=j] {
                r[o] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub c: f64,
    pub k: usize,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub mae: f64,
    pub mse: f64,
    pub ndcg_skipped: usize,
    pub fairness_skipped: usize,
    /// `ok`, or `failed: <reason>` for aborted trainings.
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffReport {
    pub fn row(&self, c: f64, k: usize) -> Option<&TradeoffRow> {
        self.rows.iter().find(|r| r.c == c && r.k == k)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "C,K,ndcg_mean,ndcg_std,mae,mse,ndcg_skipped,fairness_skipped,status")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.c,
                r.k,
                r.ndcg_mean,
                r.ndcg_std,
                r.mae,
                r.mse,
                r.ndcg_skipped,
                r.fairness_skipped,
                r.status.replace(',', ";")
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<prefix>.csv` and `<prefix>.json`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let csv = prefix.as_ref().with_extension("csv");
        let json = prefix.as_ref().with_extension("json");
        let mut f = BufWriter::new(File::create(&csv).map_err(|e| Error::io(&csv, e))?);
        self.write_csv(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&csv, e))?;
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        Ok((csv, json))
    }
}

/// Inputs shared by every run of a sweep.
#[derive(Clone, Copy, Debug)]
pub struct SweepData<'a> {
    pub train: &'a Dataset,
    pub valid: Option<&'a Dataset>,
    pub test: &'a Dataset,
}

/// One training run of a sweep; `outcome` holds the error text on abort.
#[derive(Debug)]
pub struct SweepRun {
    pub c: f64,
    pub outcome: std::result::Result<TrainOutcome<FactorizationScorer>, String>,
}

#[derive(Debug)]
pub struct Sweep {
    pub report: TradeoffReport,
    pub runs: Vec<SweepRun>,
}

/// Trains one model per `C` (same seed and budget), evaluates each final
/// model on the test split with the train and validation items treated as
/// rated, and emits one row per `(C, K)`. Runs are independent and execute
/// on separate threads when `parallel` is set.
pub fn tradeoff_sweep(
    data: SweepData<'_>,
    base: &TrainConfig,
    c_grid: &[f64],
    proto: &EvalProtocol,
    parallel: bool,
) -> Result<Sweep> {
    if c_grid.is_empty() {
        return Err(Error::Config("C grid must not be empty".into()));
    }
    if c_grid.windows(2).any(|w| w[0] > w[1]) || c_grid.iter().any(|c| c.is_nan() || *c < 0.0) {
        return Err(Error::Config("C grid must be nonnegative and ascending".into()));
    }
    let configs: Vec<TrainConfig> = c_grid
        .iter()
        .map(|&c| {
            let mut cfg = base.clone();
            cfg.c = c;
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<_>>()?;

    let run = |cfg: &TrainConfig| -> std::result::Result<TrainOutcome<FactorizationScorer>, String> {
        optimizer::train_new_model(data.train, data.valid, cfg).map_err(|e| e.to_string())
    };
    let outcomes: Vec<_> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().map(|cfg| s.spawn(move || run(cfg))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err("training thread panicked".into())))
                .collect()
        })
    } else {
        configs.iter().map(run).collect()
    };

    let mut exclude = vec![data.train];
    exclude.extend(data.valid);
    let lists = sample_eval_lists(data.test, proto, &exclude);
    let mut report = TradeoffReport::default();
    let mut runs = Vec::with_capacity(outcomes.len());
    for (&c, outcome) in c_grid.iter().zip(outcomes) {
        match &outcome {
            Ok(o) => {
                for km in evaluate_lists(&o.final_model, &lists, &proto.k_list)? {
                    report.rows.push(TradeoffRow {
                        c,
                        k: km.k,
                        ndcg_mean: km.ndcg_mean,
                        ndcg_std: km.ndcg_std,
                        mae: km.mae,
                        mse: km.mse,
                        ndcg_skipped: km.ndcg_skipped,
                        fairness_skipped: km.fairness_skipped,
                        status: "ok".into(),
                    });
                }
            }
            Err(msg) => {
                for &k in &proto.k_list {
                    report.rows.push(TradeoffRow {
                        c,
                        k,
                        ndcg_mean: f64::NAN,
                        ndcg_std: f64::NAN,
                        mae: f64::NAN,
                        mse: f64::NAN,
                        ndcg_skipped: 0,
                        fairness_skipped: 0,
                        status: format!("failed: {msg}"),
                    });
                }
            }
        }
        runs.push(SweepRun { c, outcome });
    }
    Ok(Sweep { report, runs })
}

/// Group sequence of every exported query, most unfair first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingStrips {
    pub query_ids: Vec<String>,
    pub gaps: Vec<f64>,
    pub rows: Vec<Vec<Group>>,
}

impl RankingStrips {
    /// Number of group-A cells within the first `k` columns over all rows.
    pub fn count_a_in_top(&self, k: usize) -> usize {
        self.rows
            .iter()
            .map(|r| r.iter().take(k).filter(|&&g| g == Group::A).count())
            .sum()
    }
}

/// Ranks every query of `d` by score and keeps the `num_queries` queries
/// with the largest `|top-K gap|` (undefined gaps sort last).
pub fn ranking_strips(
    m: &impl ScoringModel,
    d: &Dataset,
    num_queries: usize,
    k: usize,
) -> Result<RankingStrips> {
    if num_queries > d.num_queries() {
        return Err(Error::Range {
            index: num_queries,
            len: d.num_queries(),
        });
    }
    let mut entries = Vec::with_capacity(d.num_queries());
    for (pos, q) in d.queries().iter().enumerate() {
        let ids = q.item_ids();
        let scores = m.scores(q.index, &ids)?;
        let groups = q.groups();
        let gap = topk_disparity_exact_from_scores(&scores, &groups, &ids, k.max(1));
        let order = top_k_positions(&scores, &ids, ids.len());
        let row: Vec<Group> = order.into_iter().map(|p| groups[p]).collect();
        entries.push((gap.map(f64::abs), pos, row));
    }
    entries.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.1.cmp(&b.1)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.1.cmp(&b.1),
    });
    entries.truncate(num_queries);
    Ok(RankingStrips {
        query_ids: entries.iter().map(|e| d.queries()[e.1].id.clone()).collect(),
        gaps: entries.iter().map(|e| e.0.unwrap_or(f64::NAN)).collect(),
        rows: entries.into_iter().map(|e| e.2).collect(),
    })
}

/// Writes `<prefix>.csv` and `<prefix>.ppm` (see the module docs).
pub fn export_ranking_strips(
    m: &impl ScoringModel,
    d: &Dataset,
    num_queries: usize,
    k: usize,
    prefix: impl AsRef<Path>,
) -> Result<RankingStrips> {
    let strips = ranking_strips(m, d, num_queries, k)?;
    let width = strips.rows.iter().map(Vec::len).max().unwrap_or(0);
    let csv = prefix.as_ref().with_extension("csv");
    let ppm = prefix.as_ref().with_extension("ppm");

    let write_csv = || -> std::io::Result<()> {
        let mut f = BufWriter::new(File::create(&csv)?);
        write!(f, "query_id,gap")?;
        for r in 1..=width {
            write!(f, ",rank_{r}")?;
        }
        writeln!(f)?;
        for ((id, gap), row) in strips.query_ids.iter().zip(&strips.gaps).zip(&strips.rows) {
            write!(f, "{id},{gap}")?;
            for c in 0..width {
                match row.get(c) {
                    Some(g) => write!(f, ",{g}")?,
                    None => write!(f, ",")?,
                }
            }
            writeln!(f)?;
        }
        f.flush()
    };
    write_csv().map_err(|e| Error::io(&csv, e))?;

    let write_ppm = || -> std::io::Result<()> {
        let mut f = BufWriter::new(File::create(&ppm)?);
        write!(f, "P6\n{} {}\n255\n", width.max(1), strips.rows.len().max(1))?;
        if strips.rows.is_empty() || width == 0 {
            f.write_all(&[128, 128, 128])?;
        }
        for row in &strips.rows {
            for c in 0..width {
                let px: [u8; 3] = match row.get(c) {
                    Some(Group::A) => [255, 0, 0],
                    Some(Group::B) => [0, 255, 0],
                    None => [128, 128, 128],
                };
                f.write_all(&px)?;
            }
        }
        f.flush()
    };
    write_ppm().map_err(|e| Error::io(&ppm, e))?;
    Ok(strips)
}
