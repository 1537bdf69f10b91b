//! The stochastic training loop: minibatch sampling, the `G1 + C·G2`
//! gradient, the momentum buffer `z`, and the parameter step.
//!
//! Configuration is a flat `key = value` file whose keys are the names in
//! [`FIELDS`]; the same table drives the command-line flags.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch_with, BatchSizes, Dataset};
use crate::error::{Error, Result};
use crate::eval::{EvalProtocol, Validation};
use crate::fairness::{
    g2_accumulate, FairnessAveraging, G2Mode, QueryFairnessState, Selection, SmoothIndicator,
    ThresholdEstimate,
};
use crate::lambda_solver::{implicit_gradient, LambdaState, SmoothingParams};
use crate::model::{FactorizationScorer, ScoringModel};
use crate::rank_losses::{g1_accumulate, PairEstimatorTable, RankLossKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FairnessMode {
    None,
    FullList,
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossName {
    Ndcg,
    ListNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// Multiplies the rate by 0.25 from the midpoint epoch on.
    StepDecay,
}

impl LrSchedule {
    pub fn multiplier(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::StepDecay if 2 * epoch >= epochs.max(1) => 0.25,
            LrSchedule::StepDecay => 1.0,
        }
    }
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $word:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $word),+ })
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($word => Ok($variant),)+
                    _ => Err(format!(
                        "expected one of {}, got `{s}`",
                        [$($word),+].join("|")
                    )),
                }
            }
        }
    };
}

keyword_enum!(FairnessMode {
    FairnessMode::None => "none",
    FairnessMode::FullList => "full_list",
    FairnessMode::TopK => "top_k",
});
keyword_enum!(LossName { LossName::Ndcg => "ndcg", LossName::ListNet => "listnet" });
keyword_enum!(LrSchedule { LrSchedule::Constant => "constant", LrSchedule::StepDecay => "step" });
keyword_enum!(G2Mode { G2Mode::Simplified => "simplified", G2Mode::FullImplicit => "full_implicit" });

/// Every training hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub c: f64,
    pub mode: FairnessMode,
    pub loss: LossName,
    pub margin: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub gamma5: f64,
    pub eta0: f64,
    pub eta1: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub epsilon: f64,
    pub tau_psi: f64,
    pub batch_pairs: usize,
    pub batch_query: usize,
    pub batch_a: usize,
    pub batch_b: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub g2_mode: G2Mode,
    pub dim: usize,
    pub score_bound: f64,
    pub score_scale: f64,
    /// Steps between trace records; 0 logs once per epoch.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            c: 0.0,
            mode: FairnessMode::TopK,
            loss: LossName::Ndcg,
            margin: 1.0,
            gamma0: 0.3,
            gamma1: 0.2,
            gamma2: 0.2,
            gamma3: 0.2,
            gamma4: 0.5,
            gamma5: 0.9,
            eta0: 1e-3,
            eta1: 4e-4,
            tau1: 1e-2,
            tau2: 1e-4,
            epsilon: 0.5,
            tau_psi: 0.1,
            batch_pairs: 256,
            batch_query: 64,
            batch_a: 32,
            batch_b: 32,
            epochs: 10,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            g2_mode: G2Mode::Simplified,
            dim: 16,
            score_bound: 10.0,
            score_scale: 1.0,
            log_every: 0,
        }
    }
}

/// A configuration key with its help text.
#[derive(Clone, Copy, Debug)]
pub struct Field {
    pub name: &'static str,
    pub help: &'static str,
}

pub const FIELDS: &[Field] = &[
    Field { name: "K", help: "top-K cutoff for the fairness term and validation" },
    Field { name: "C", help: "fairness weight (0 disables the fairness term)" },
    Field { name: "mode", help: "fairness regularizer: none | full_list | top_k" },
    Field { name: "loss", help: "ranking loss: ndcg | listnet" },
    Field { name: "margin", help: "squared-hinge margin of the NDCG surrogate rank" },
    Field { name: "gamma0", help: "moving-average weight of the per-pair rank estimates" },
    Field { name: "gamma1", help: "moving-average weight of the group-A exposure mass" },
    Field { name: "gamma2", help: "moving-average weight of the group-B exposure mass" },
    Field { name: "gamma3", help: "moving-average weight of the total exposure mass" },
    Field { name: "gamma4", help: "moving-average weight of the threshold derivatives" },
    Field { name: "gamma5", help: "momentum weight" },
    Field { name: "eta0", help: "threshold step size" },
    Field { name: "eta1", help: "model learning rate" },
    Field { name: "tau1", help: "softplus smoothing of the threshold objective" },
    Field { name: "tau2", help: "quadratic regularization of the threshold objective" },
    Field { name: "epsilon", help: "threshold offset in (0, 1)" },
    Field { name: "tau_psi", help: "temperature of the smooth top-K indicator" },
    Field { name: "batch_pairs", help: "pairs per minibatch" },
    Field { name: "batch_query", help: "items sampled per query for the inner estimates" },
    Field { name: "batch_a", help: "group-A items sampled per query" },
    Field { name: "batch_b", help: "group-B items sampled per query" },
    Field { name: "epochs", help: "training epochs of ceil(pairs / batch_pairs) steps" },
    Field { name: "seed", help: "seed for initialization and sampling" },
    Field { name: "lr_schedule", help: "constant | step (x0.25 from the midpoint epoch)" },
    Field { name: "g2_mode", help: "simplified | full_implicit" },
    Field { name: "dim", help: "embedding dimension" },
    Field { name: "score_bound", help: "score bound B_h" },
    Field { name: "score_scale", help: "pre-activation scale s" },
    Field { name: "log_every", help: "steps between trace records (0 = once per epoch)" },
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

impl TrainConfig {
    /// Sets one field by its [`FIELDS`] name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "K" => self.k = parse(key, value)?,
            "C" => self.c = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "loss" => self.loss = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "gamma0" => self.gamma0 = parse(key, value)?,
            "gamma1" => self.gamma1 = parse(key, value)?,
            "gamma2" => self.gamma2 = parse(key, value)?,
            "gamma3" => self.gamma3 = parse(key, value)?,
            "gamma4" => self.gamma4 = parse(key, value)?,
            "gamma5" => self.gamma5 = parse(key, value)?,
            "eta0" => self.eta0 = parse(key, value)?,
            "eta1" => self.eta1 = parse(key, value)?,
            "tau1" => self.tau1 = parse(key, value)?,
            "tau2" => self.tau2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "tau_psi" => self.tau_psi = parse(key, value)?,
            "batch_pairs" => self.batch_pairs = parse(key, value)?,
            "batch_query" => self.batch_query = parse(key, value)?,
            "batch_a" => self.batch_a = parse(key, value)?,
            "batch_b" => self.batch_b = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr_schedule" => self.lr_schedule = parse(key, value)?,
            "g2_mode" => self.g2_mode = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "score_bound" => self.score_bound = parse(key, value)?,
            "score_scale" => self.score_scale = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// The current value of a field, formatted as [`TrainConfig::set`] accepts it.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "K" => self.k.to_string(),
            "C" => self.c.to_string(),
            "mode" => self.mode.to_string(),
            "loss" => self.loss.to_string(),
            "margin" => self.margin.to_string(),
            "gamma0" => self.gamma0.to_string(),
            "gamma1" => self.gamma1.to_string(),
            "gamma2" => self.gamma2.to_string(),
            "gamma3" => self.gamma3.to_string(),
            "gamma4" => self.gamma4.to_string(),
            "gamma5" => self.gamma5.to_string(),
            "eta0" => self.eta0.to_string(),
            "eta1" => self.eta1.to_string(),
            "tau1" => self.tau1.to_string(),
            "tau2" => self.tau2.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "tau_psi" => self.tau_psi.to_string(),
            "batch_pairs" => self.batch_pairs.to_string(),
            "batch_query" => self.batch_query.to_string(),
            "batch_a" => self.batch_a.to_string(),
            "batch_b" => self.batch_b.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "lr_schedule" => self.lr_schedule.to_string(),
            "g2_mode" => self.g2_mode.to_string(),
            "dim" => self.dim.to_string(),
            "score_bound" => self.score_bound.to_string(),
            "score_scale" => self.score_scale.to_string(),
            "log_every" => self.log_every.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key = value, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every field as `key = value` lines, in [`FIELDS`] order.
    pub fn to_text(&self) -> String {
        FIELDS
            .iter()
            .map(|f| format!("{} = {}\n", f.name, self.get(f.name).expect("known field")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("gamma0", self.gamma0),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("gamma4", self.gamma4),
            ("gamma5", self.gamma5),
        ];
        for (name, g) in unit {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {g}")));
            }
        }
        if self.gamma5 == 0.0 {
            return Err(Error::Config("gamma5 must be positive".into()));
        }
        for (name, v) in [("eta0", self.eta0), ("eta1", self.eta1), ("C", self.c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.mode == FairnessMode::None && self.c > 0.0 {
            return Err(Error::Config(format!(
                "mode none conflicts with C = {} > 0",
                self.c
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.loss == LossName::Ndcg && (self.margin.is_nan() || self.margin <= 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if [self.batch_pairs, self.batch_query, self.batch_a, self.batch_b].contains(&0) {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if !(self.score_bound > 0.0 && self.score_scale > 0.0) {
            return Err(Error::Config("score_bound and score_scale must be positive".into()));
        }
        if self.mode == FairnessMode::TopK {
            self.smoothing().validate()?;
            if self.tau_psi.is_nan() || self.tau_psi <= 0.0 {
                return Err(Error::Config(format!("tau_psi must be positive, got {}", self.tau_psi)));
            }
        }
        Ok(())
    }

    pub fn rank_loss(&self) -> RankLossKind {
        match self.loss {
            LossName::Ndcg => RankLossKind::Ndcg { margin: self.margin },
            LossName::ListNet => RankLossKind::ListNet,
        }
    }

    pub fn smoothing(&self) -> SmoothingParams {
        SmoothingParams {
            tau1: self.tau1,
            tau2: self.tau2,
            epsilon: self.epsilon,
            k: self.k,
        }
    }

    pub fn batch_sizes(&self) -> BatchSizes {
        BatchSizes {
            pairs: self.batch_pairs,
            per_query: self.batch_query,
            group_a: self.batch_a,
            group_b: self.batch_b,
        }
    }

    /// Whether `G2` is computed at all.
    pub fn fairness_active(&self) -> bool {
        self.mode != FairnessMode::None && self.c > 0.0
    }

    pub fn steps_per_epoch(&self, d: &Dataset) -> usize {
        d.total_pairs().div_ceil(self.batch_pairs.clamp(1, d.total_pairs().max(1)))
    }
}

/// Exponential average `z` of the combined gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub z: Vec<f64>,
    pub gamma5: f64,
}

impl MomentumState {
    pub fn new(len: usize, gamma5: f64) -> MomentumState {
        MomentumState {
            z: vec![0.0; len],
            gamma5,
        }
    }

    /// `z ← (1-γ₅) z + γ₅ g`.
    pub fn update(&mut self, g: &[f64]) {
        let a = 1.0 - self.gamma5;
        for (z, &gi) in self.z.iter_mut().zip(g) {
            *z = a * *z + self.gamma5 * gi;
        }
    }

    pub fn norm(&self) -> f64 {
        self.z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// All estimator tables carried across steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub pairs: PairEstimatorTable,
    /// Keyed by model query row.
    pub fairness: HashMap<usize, QueryFairnessState>,
    /// Keyed by model query row.
    pub lambdas: HashMap<usize, LambdaState>,
    pub momentum: MomentumState,
    pub step: usize,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(num_params: usize, cfg: &TrainConfig) -> TrainState {
        TrainState {
            pairs: PairEstimatorTable::new(cfg.gamma0),
            fairness: HashMap::new(),
            lambdas: HashMap::new(),
            momentum: MomentumState::new(num_params, cfg.gamma5),
            step: 0,
            epoch: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub z_norm: f64,
    /// Minibatch estimate of the ranking loss.
    pub rank_loss: f64,
    /// Minibatch estimate of the fairness regularizer (0 when inactive).
    pub fair_loss: f64,
    pub objective: f64,
}

fn check_finite(v: &[f64], term: &'static str, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { term, step })
    }
}

/// Gradients of one step before the momentum update.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub g1: Vec<f64>,
    pub g2: Option<Vec<f64>>,
    pub rank_loss: f64,
    pub fair_loss: f64,
}

/// Samples a batch, updates every estimator touched by it and returns
/// `G1` and (when fairness is active) `G2` at the current parameters.
pub fn step_gradients<M: ScoringModel>(
    m: &M,
    d: &Dataset,
    cfg: &TrainConfig,
    st: &mut TrainState,
    rng: &mut impl Rng,
) -> Result<StepGradients> {
    let fair = cfg.fairness_active();
    let batch = sample_batch_with(d, cfg.batch_sizes(), fair, rng);
    let len = m.params().len();

    let mut g1 = vec![0.0; len];
    let rank_loss = g1_accumulate(m, d, &batch, cfg.rank_loss(), &mut st.pairs, &mut g1)?;
    check_finite(&g1, "G1", st.step)?;
    if !fair {
        return Ok(StepGradients {
            g1,
            g2: None,
            rank_loss,
            fair_loss: 0.0,
        });
    }

    let averaging = FairnessAveraging {
        gamma1: cfg.gamma1,
        gamma2: cfg.gamma2,
        gamma3: cfg.gamma3,
    };
    let mut g2 = vec![0.0; len];
    let fair_loss = match cfg.mode {
        FairnessMode::FullList => g2_accumulate(
            m,
            d,
            &batch,
            &mut st.fairness,
            Selection::FullList,
            averaging,
            &mut g2,
        )?,
        FairnessMode::TopK => {
            let p = cfg.smoothing();
            let mut thresholds = HashMap::new();
            let mut pending = Vec::new();
            for qb in batch.queries.iter().filter(|qb| !qb.fairness_skipped) {
                let q = &d.queries()[qb.query];
                let items: Vec<usize> = qb.items.iter().map(|&p| q.items[p].item).collect();
                let scores = m.scores(q.index, &items)?;
                let ls = *st
                    .lambdas
                    .entry(q.index)
                    .or_insert_with(|| LambdaState::warm_start(&scores, q.len(), &p));
                let gradient = match cfg.g2_mode {
                    G2Mode::FullImplicit => {
                        Some(implicit_gradient(ls.lambda, ls.s, m, q.index, &items, &p)?)
                    }
                    G2Mode::Simplified => None,
                };
                thresholds.insert(
                    q.index,
                    ThresholdEstimate {
                        lambda: ls.lambda,
                        gradient,
                    },
                );
                pending.push((q.index, q.len(), scores));
            }
            let selection = Selection::TopK {
                thresholds: &thresholds,
                psi: SmoothIndicator::sigmoid(cfg.tau_psi),
                mode: cfg.g2_mode,
            };
            let loss = g2_accumulate(m, d, &batch, &mut st.fairness, selection, averaging, &mut g2)?;
            for (row, n_q, scores) in pending {
                let ls = st.lambdas.get_mut(&row).expect("threshold state inserted above");
                ls.step(&scores, n_q, &p, cfg.gamma4, cfg.eta0);
                if !ls.lambda.is_finite() {
                    return Err(Error::NonFinite {
                        term: "lambda",
                        step: st.step,
                    });
                }
            }
            loss
        }
        FairnessMode::None => unreachable!("fairness inactive in mode none"),
    };
    check_finite(&g2, "G2", st.step)?;
    Ok(StepGradients {
        g1,
        g2: Some(g2),
        rank_loss,
        fair_loss,
    })
}

/// One full iteration: estimator updates, `z ← (1-γ₅) z + γ₅ (G1 + C·G2)`,
/// then `w ← w - η₁ · schedule(epoch) · z`.
pub fn train_step<M: ScoringModel>(
    m: &mut M,
    d: &Dataset,
    cfg: &TrainConfig,
    st: &mut TrainState,
    rng: &mut impl Rng,
) -> Result<StepMetrics> {
    let grads = step_gradients(m, d, cfg, st, rng)?;
    let mut g = grads.g1;
    if let Some(g2) = &grads.g2 {
        for (a, b) in g.iter_mut().zip(g2) {
            *a += cfg.c * b;
        }
    }
    st.momentum.update(&g);
    let lr = cfg.eta1 * cfg.lr_schedule.multiplier(st.epoch, cfg.epochs);
    for (w, z) in m.params_mut().values_mut().iter_mut().zip(&st.momentum.z) {
        *w -= lr * z;
    }
    check_finite(m.params().values(), "parameters", st.step)?;
    let metrics = StepMetrics {
        step: st.step,
        z_norm: st.momentum.norm(),
        rank_loss: grads.rank_loss,
        fair_loss: grads.fair_loss,
        objective: grads.rank_loss + cfg.c * grads.fair_loss,
    };
    st.step += 1;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub z_norm: f64,
    /// Mean minibatch objective estimate since the previous record.
    pub train_loss: f64,
    pub valid_ndcg: f64,
    pub valid_mae: f64,
    pub valid_mse: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    /// `‖z‖` after every step.
    pub z_norms: Vec<f64>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl TrainTrace {
    /// CSV columns: `step,epoch,z_norm,train_loss,valid_ndcg,valid_mae,valid_mse`.
    /// Wall-clock data lives in the metadata sidecar only.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,epoch,z_norm,train_loss,valid_ndcg,valid_mae,valid_mse")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.step, r.epoch, r.z_norm, r.train_loss, r.valid_ndcg, r.valid_mae, r.valid_mse
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// JSON sidecar with the timestamps and per-record wall time.
    pub fn metadata_json(&self) -> String {
        serde_json::json!({
            "started_unix": self.started_unix,
            "finished_unix": self.finished_unix,
            "record_wall_seconds": self.records.iter().map(|r| r.wall_seconds).collect::<Vec<_>>(),
        })
        .to_string()
    }

    /// Mean `‖z‖` over the first and the last `fraction` of steps.
    pub fn z_norm_ends(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = self.z_norms.len();
        let w = ((n as f64 * fraction).ceil() as usize).max(1);
        if n < 2 * w {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.z_norms[..w]), mean(&self.z_norms[n - w..])))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub final_model: M,
    /// Checkpoint with the lowest `(1 - NDCG@K) + C · MSE / 2` on validation;
    /// the final model when no validation set is given.
    pub best_model: M,
    pub best_step: usize,
    pub trace: TrainTrace,
    pub state: TrainState,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Runs `epochs × steps_per_epoch` steps from `m`, recording a trace and
/// keeping the best validation checkpoint.
pub fn train<M: ScoringModel + Clone>(
    mut m: M,
    d: &Dataset,
    validation: Option<&Validation>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if d.total_pairs() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut st = TrainState::new(m.params().len(), cfg);
    let steps_per_epoch = cfg.steps_per_epoch(d);
    let log_every = if cfg.log_every == 0 {
        steps_per_epoch
    } else {
        cfg.log_every
    };
    let clock = Instant::now();
    let mut trace = TrainTrace {
        started_unix: unix_now(),
        ..TrainTrace::default()
    };
    let mut best: Option<(f64, usize, M)> = None;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for epoch in 0..cfg.epochs {
        st.epoch = epoch;
        for _ in 0..steps_per_epoch {
            let sm = train_step(&mut m, d, cfg, &mut st, &mut rng)?;
            trace.z_norms.push(sm.z_norm);
            loss_sum += sm.objective;
            loss_count += 1;
            if st.step.is_multiple_of(log_every) {
                let vm = validation.map(|v| v.measure(&m)).transpose()?;
                let (ndcg, mae, mse) = vm
                    .as_ref()
                    .map(|k| (k.ndcg_mean, k.mae, k.mse))
                    .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
                trace.records.push(TraceRecord {
                    step: st.step,
                    epoch,
                    z_norm: sm.z_norm,
                    train_loss: loss_sum / loss_count as f64,
                    valid_ndcg: ndcg,
                    valid_mae: mae,
                    valid_mse: mse,
                    wall_seconds: clock.elapsed().as_secs_f64(),
                });
                loss_sum = 0.0;
                loss_count = 0;
                if vm.is_some() {
                    let score = (1.0 - ndcg) + cfg.c * mse / 2.0;
                    if best.as_ref().is_none_or(|b| score < b.0) {
                        best = Some((score, st.step, m.clone()));
                    }
                }
            }
        }
    }
    trace.finished_unix = unix_now();
    let (best_step, best_model) = match best {
        Some((_, s, bm)) => (s, bm),
        None => (st.step, m.clone()),
    };
    Ok(TrainOutcome {
        final_model: m,
        best_model,
        best_step,
        trace,
        state: st,
    })
}

/// Initializes a [`FactorizationScorer`] sized for `train` from `cfg` and
/// trains it, validating on `valid` (train items treated as rated).
pub fn train_new_model(
    train_set: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<FactorizationScorer>> {
    cfg.validate()?;
    let m = FactorizationScorer::init(
        train_set.query_slots(),
        train_set.num_items(),
        cfg.dim,
        cfg.score_bound,
        cfg.score_scale,
        cfg.seed,
    )?;
    let validation = valid.map(|v| {
        let proto = EvalProtocol {
            k_list: vec![cfg.k],
            seed: cfg.seed,
            ..EvalProtocol::default()
        };
        Validation::new(v, &proto, &[train_set], cfg.k)
    });
    train(m, train_set, validation.as_ref(), cfg)
}
