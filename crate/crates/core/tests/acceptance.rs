//! Acceptance checks. Each test prints one `PASS`/`FAIL` line tagged with its
//! criterion number. Lines go straight to stdout so they show up even when
//! the harness captures test output.

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fairrank::data::{generate_synthetic, sample_batch, split, BatchSizes, Group, SyntheticSpec};
use fairrank::eval::{
    ndcg_at_k_from_scores, spearman, tradeoff_sweep, EvalProtocol, Sweep, SweepData,
};
use fairrank::fairness::{
    exposures, full_list_disparity_from_scores, topk_disparity_exact_from_scores,
    topk_disparity_surrogate_from_scores, SmoothIndicator,
};
use fairrank::gradcheck::{fairness_suite, rank_loss_suite};
use fairrank::lambda_solver::{smoothed_hess, solve_lambda_exactly_smoothed, LambdaState, SmoothingParams};
use fairrank::model::ScoringModel;
use fairrank::optimizer::{train_new_model, TrainConfig};

fn emit(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(id: u32, name: &str, pass: bool, detail: String) {
    emit(format!(
        "criterion {id} [{}] {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
}

#[test]
fn criterion_1_rank_loss_gradients() {
    let start = Instant::now();
    let r = rank_loss_suite(20, 50, 8, 1).unwrap();
    let elapsed = start.elapsed();
    let pass = r.max_error() <= 1e-4 && elapsed < Duration::from_secs(60);
    report(
        1,
        "G1 vs finite differences",
        pass,
        format!(
            "ndcg {:.2e}, listnet {:.2e} (tol 1e-4), {:.1}s (limit 60s)",
            r.checks[0].error,
            r.checks[1].error,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_fairness_gradients() {
    let worst = [1u64, 7, 42]
        .iter()
        .map(|&s| fairness_suite(8, 2, s).unwrap().max_error())
        .fold(0.0, f64::max);
    let pass = worst <= 1e-3;
    report(
        2,
        "G2 (top_k full_implicit, full_list) vs finite differences",
        pass,
        format!("max relative error {worst:.2e} over 3 seeds (tol 1e-3)"),
    );
    assert!(pass);
}

fn tie_free_scores(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).all(|w| w[1] > w[0]) {
            return s;
        }
    }
}

#[test]
fn criterion_3_lambda_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_oracle, mut worst_online) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(2..=1000);
        let scores = tie_free_scores(&mut rng, n);
        let k = rng.random_range(1..n);
        let p = SmoothingParams {
            tau1: 1e-3,
            tau2: 1e-6,
            epsilon: 0.5,
            k,
        };
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let range = sorted[0] - sorted[n - 1];
        let lambda = solve_lambda_exactly_smoothed(&scores, &p, 1e-12).unwrap();
        worst_oracle = worst_oracle.max((lambda - sorted[k]).abs() / range);

        let mut st = LambdaState::warm_start(&scores, n, &p);
        let eta0 = 1.0 / smoothed_hess(st.lambda, &scores, &p);
        for _ in 0..10_000 {
            st.step(&scores, n, &p, 1.0, eta0);
            if st.v.abs() <= 1e-12 {
                break;
            }
        }
        worst_online = worst_online.max((st.lambda - lambda).abs());
    }
    let pass = worst_oracle <= 1e-2 && worst_online <= 1e-6;
    report(
        3,
        "threshold solver vs order statistic",
        pass,
        format!(
            "max |λ - h(K+1)|/range {worst_oracle:.2e} (tol 1e-2), online gap {worst_online:.2e} (tol 1e-6)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_surrogate_matches_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let psi = SmoothIndicator::sigmoid(1e-3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..=60);
        // tie-free with a minimum spacing of 0.1 between neighbours
        let mut scores: Vec<f64> = Vec::with_capacity(n);
        let mut level = rng.random_range(-4.0..-2.0);
        for _ in 0..n {
            level += rng.random_range(0.1..0.4);
            scores.push(level);
        }
        scores.shuffle(&mut rng);
        let mut groups: Vec<Group> = (0..n)
            .map(|_| if rng.random_bool(0.4) { Group::A } else { Group::B })
            .collect();
        groups[0] = Group::A;
        groups[1] = Group::B;
        let k = rng.random_range(1..n);
        let p = SmoothingParams {
            tau1: 1e-2,
            tau2: 1e-6,
            epsilon: 0.1,
            k,
        };
        let lambda = solve_lambda_exactly_smoothed(&scores, &p, 1e-12).unwrap();
        let u = topk_disparity_surrogate_from_scores(&scores, &groups, lambda, psi).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        let exact = topk_disparity_exact_from_scores(&scores, &groups, &ids, k).unwrap();
        worst = worst.max(((2.0 * u).sqrt() - exact.abs()).abs());
    }
    let pass = worst <= 1e-3;
    report(
        4,
        "smoothed top-K disparity vs exact",
        pass,
        format!("max |sqrt(2U) - |gap|| {worst:.2e} over 100 queries (tol 1e-3)"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_mode_reduction() {
    let d = generate_synthetic(&SyntheticSpec {
        num_queries: 20,
        items_per_query: 30,
        minority_fraction: 0.3,
        bias: 1.0,
        seed: 6,
    })
    .unwrap();
    let base = TrainConfig {
        epochs: 3,
        batch_pairs: 64,
        eta1: 0.5,
        seed: 9,
        ..TrainConfig::default()
    };
    let none = train_new_model(&d, None, &TrainConfig { mode: "none".parse().unwrap(), ..base.clone() }).unwrap();
    let mut identical = true;
    for mode in ["top_k", "full_list"] {
        let other = train_new_model(
            &d,
            None,
            &TrainConfig {
                mode: mode.parse().unwrap(),
                c: 0.0,
                ..base.clone()
            },
        )
        .unwrap();
        identical &= other.final_model.params().values() == none.final_model.params().values()
            && other.trace.z_norms == none.trace.z_norms;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut groups: Vec<Group> = (0..n)
            .map(|_| if rng.random_bool(0.5) { Group::A } else { Group::B })
            .collect();
        groups[0] = Group::A;
        groups[n - 1] = Group::B;
        let lambda = rng.random_range(-10.0..10.0);
        let u = topk_disparity_surrogate_from_scores(&scores, &groups, lambda, SmoothIndicator::One).unwrap();
        let full = full_list_disparity_from_scores(&scores, &groups).unwrap();
        worst = worst.max((u - full).abs());
    }
    let pass = identical && worst <= 1e-12;
    report(
        6,
        "mode reduction",
        pass,
        format!("none == C=0 bit-identical: {identical}; max |U(ψ=1) - U_full| {worst:.2e} (tol 1e-12)"),
    );
    assert!(pass);
}

const SWEEP_GRID: [f64; 5] = [0.0, 1e1, 1e2, 1e3, 1e4];
const SWEEP_K: usize = 50;

fn tradeoff_config(gamma: f64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(
        "K = 50\neta1 = 10\ndim = 8\ntau_psi = 0.5\nlr_schedule = step\nepochs = 8\nseed = 1\n",
    )
    .unwrap();
    cfg.gamma1 = gamma;
    cfg.gamma2 = gamma;
    cfg.gamma3 = gamma;
    cfg
}

struct TradeoffFixture {
    sweep: Sweep,
    elapsed: Duration,
    /// `(γ, NDCG@K, MAE)` at `C = 10³`.
    gamma_points: Vec<(f64, f64, f64)>,
}

fn tradeoff() -> &'static TradeoffFixture {
    static FIXTURE: OnceLock<TradeoffFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let d = generate_synthetic(&SyntheticSpec {
            num_queries: 200,
            items_per_query: 305,
            minority_fraction: 0.3,
            bias: 2.0,
            seed: 1,
        })
        .unwrap();
        let s = split(&d, (0.8, 0.1, 0.1), 1).unwrap();
        let data = SweepData {
            train: &s.train,
            valid: Some(&s.valid),
            test: &s.test,
        };
        let proto = EvalProtocol {
            k_list: vec![50, 100, 200],
            seed: 1,
            ..EvalProtocol::default()
        };
        let start = Instant::now();
        let sweep = tradeoff_sweep(data, &tradeoff_config(0.2), &SWEEP_GRID, &proto, true).unwrap();
        let elapsed = start.elapsed();

        let mut gamma_points = Vec::new();
        let row = sweep.report.row(1e3, SWEEP_K).unwrap();
        gamma_points.push((0.2, row.ndcg_mean, row.mae));
        for gamma in [0.6, 1.0] {
            let g = tradeoff_sweep(data, &tradeoff_config(gamma), &[1e3], &proto, false).unwrap();
            let row = g.report.row(1e3, SWEEP_K).unwrap();
            gamma_points.push((gamma, row.ndcg_mean, row.mae));
        }
        TradeoffFixture {
            sweep,
            elapsed,
            gamma_points,
        }
    })
}

#[test]
fn criterion_5_tradeoff_sweep() {
    let f = tradeoff();
    let rows: Vec<_> = SWEEP_GRID
        .iter()
        .map(|&c| f.sweep.report.row(c, SWEEP_K).unwrap())
        .collect();
    for r in &rows {
        emit(format!(
            "  criterion 5 row: C={:<7} ndcg@{SWEEP_K}={:.4} mae={:.3e} status={}",
            r.c, r.ndcg_mean, r.mae, r.status
        ));
    }
    let (first, last) = (rows[0], rows[rows.len() - 1]);
    let mae_ratio = last.mae / first.mae;
    let ndcg_ratio = last.ndcg_mean / first.ndcg_mean;
    let rho = spearman(
        &SWEEP_GRID,
        &rows.iter().map(|r| r.mae).collect::<Vec<_>>(),
    );
    let ok_status = rows.iter().all(|r| r.status == "ok");
    let pass = ok_status
        && mae_ratio <= 0.5
        && rho <= -0.8
        && ndcg_ratio >= 0.7
        && f.elapsed < Duration::from_secs(30 * 60);
    report(
        5,
        "fairness/utility tradeoff",
        pass,
        format!(
            "MAE ratio {mae_ratio:.3} (<= 0.5), spearman {rho:.2} (<= -0.8), NDCG ratio {ndcg_ratio:.3} (>= 0.7), {:.0}s (< 1800s)",
            f.elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_gamma_ablation() {
    let f = tradeoff();
    for (g, ndcg, mae) in &f.gamma_points {
        emit(format!("  criterion 7 point: gamma={g} ndcg@{SWEEP_K}={ndcg:.4} mae={mae:.3e}"));
    }
    let (_, n02, m02) = f.gamma_points[0];
    let (_, n10, m10) = f.gamma_points[2];
    let weakly_better_somewhere = n02 >= n10 || m02 <= m10;
    let dominated = n10 >= n02 && m10 <= m02 && (n10 > n02 || m10 < m02);
    let pass = weakly_better_somewhere && !dominated;
    // A qualitative comparison: a failure here is reported but does not fail the run.
    emit(format!(
        "criterion 7 [{}] gamma ablation: gamma 0.2 ({n02:.4}, {m02:.3e}) vs gamma 1.0 ({n10:.4}, {m10:.3e})",
        if pass { "PASS" } else { "WARN" }
    ));
}

#[test]
fn criterion_8_convergence_proxy() {
    let f = tradeoff();
    let run = f.sweep.runs.iter().find(|r| r.c == 1e3).unwrap();
    let outcome = run.outcome.as_ref().unwrap();
    let (head, tail) = outcome.trace.z_norm_ends(0.1).unwrap();
    let pass = tail <= head;
    report(
        8,
        "momentum norm decreases",
        pass,
        format!("mean |z| first 10% {head:.3e}, last 10% {tail:.3e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_metric_sanity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut norm_err = 0.0f64;
    let mut shift_err = 0.0f64;
    let mut ndcg_ok = true;
    for _ in 0..500 {
        let n = rng.random_range(2..80);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let e = exposures(&scores);
        norm_err = norm_err.max((e.iter().sum::<f64>() - 1.0).abs());

        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let es = exposures(&shifted);
        for (a, b) in e.iter().zip(&es) {
            shift_err = shift_err.max((a - b).abs());
        }
        let mut groups: Vec<Group> = (0..n)
            .map(|_| if rng.random_bool(0.5) { Group::A } else { Group::B })
            .collect();
        groups[0] = Group::A;
        groups[n - 1] = Group::B;
        let ids: Vec<usize> = (0..n).collect();
        let k = rng.random_range(1..=n);
        let pairs = [
            (
                full_list_disparity_from_scores(&scores, &groups).unwrap(),
                full_list_disparity_from_scores(&shifted, &groups).unwrap(),
            ),
            (
                topk_disparity_exact_from_scores(&scores, &groups, &ids, k).unwrap(),
                topk_disparity_exact_from_scores(&shifted, &groups, &ids, k).unwrap(),
            ),
        ];
        for (a, b) in pairs {
            shift_err = shift_err.max((a - b).abs());
        }
        let lambda = rng.random_range(-10.0..10.0);
        let psi = SmoothIndicator::sigmoid(0.1);
        let u = topk_disparity_surrogate_from_scores(&scores, &groups, lambda, psi).unwrap();
        let us = topk_disparity_surrogate_from_scores(&shifted, &groups, lambda + c, psi).unwrap();
        shift_err = shift_err.max((u - us).abs());

        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        if let Some(v) = ndcg_at_k_from_scores(&scores, &labels, &ids, k) {
            ndcg_ok &= (0.0..=1.0 + 1e-12).contains(&v);
            // scoring by the labels themselves gives a label-optimal prefix
            let perfect = ndcg_at_k_from_scores(&labels, &labels, &ids, k).unwrap();
            ndcg_ok &= (perfect - 1.0).abs() <= 1e-12;
        }
    }

    let d = fairrank::data::Dataset::from_records(
        (0..10).map(|i| ("q".to_string(), format!("x{i}"), 1.0, Group::from_code((i % 2) as u8).unwrap())),
    )
    .unwrap();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let sizes = BatchSizes {
        pairs: 1,
        per_query: 1,
        group_a: 1,
        group_b: 1,
    };
    for _ in 0..10_000 {
        let b = sample_batch(&d, sizes, &mut rng);
        *counts.entry(b.queries[0].items[0]).or_default() += 1;
    }
    let freq: Vec<f64> = (0..10)
        .map(|i| *counts.get(&i).unwrap_or(&0) as f64 / 10_000.0)
        .collect();
    let (fmin, fmax) = freq
        .iter()
        .fold((1.0f64, 0.0f64), |(lo, hi), &f| (lo.min(f), hi.max(f)));
    let uniform = fmin >= 0.07 && fmax <= 0.13;

    let pass = norm_err <= 1e-12 && shift_err <= 1e-12 && ndcg_ok && uniform;
    report(
        9,
        "metric sanity",
        pass,
        format!(
            "exposure sum err {norm_err:.1e}, shift err {shift_err:.1e}, ndcg bounds {ndcg_ok}, item frequencies [{fmin:.3}, {fmax:.3}]"
        ),
    );
    assert!(pass);
}
