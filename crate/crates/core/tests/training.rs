use fairrank::data::{generate_synthetic, split, Dataset, SyntheticSpec};
use fairrank::eval::{evaluate_excluding, EvalProtocol};
use fairrank::model::{FactorizationScorer, ScoringModel};
use fairrank::optimizer::{train_new_model, TrainConfig};
use fairrank::rank_losses::{ranking_objective, RankLossKind};

fn data() -> Dataset {
    generate_synthetic(&SyntheticSpec {
        num_queries: 30,
        items_per_query: 40,
        minority_fraction: 0.3,
        bias: 2.0,
        seed: 5,
    })
    .unwrap()
}

fn config(text: &str) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text("eta1 = 5\nepochs = 6\ndim = 8\nbatch_pairs = 128\nK = 10\nseed = 2\n")
        .unwrap();
    cfg.apply_text(text).unwrap();
    cfg
}

#[test]
fn training_lowers_the_ranking_objective() {
    let d = data();
    let cfg = config("C = 0");
    let start = FactorizationScorer::init(d.query_slots(), d.num_items(), cfg.dim, 10.0, 1.0, cfg.seed).unwrap();
    let out = train_new_model(&d, None, &cfg).unwrap();
    let kind = RankLossKind::Ndcg { margin: 1.0 };
    let before = ranking_objective(&start, &d, kind).unwrap();
    let after = ranking_objective(&out.final_model, &d, kind).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn runs_are_reproducible() {
    let d = data();
    for mode in ["top_k", "full_list"] {
        let cfg = config(&format!("mode = {mode}\nC = 100\ng2_mode = full_implicit\n"));
        let a = train_new_model(&d, None, &cfg).unwrap();
        let b = train_new_model(&d, None, &cfg).unwrap();
        assert_eq!(a.final_model, b.final_model);
        assert_eq!(a.trace.z_norms, b.trace.z_norms);
    }
}

#[test]
fn fairness_weight_reduces_disparity() {
    let d = data();
    let s = split(&d, (0.8, 0.1, 0.1), 0).unwrap();
    let proto = EvalProtocol {
        relevant_per_query: 3,
        irrelevant_per_query: 30,
        k_list: vec![10],
        seed: 0,
    };
    let mae = |c: f64| {
        let out = train_new_model(&s.train, Some(&s.valid), &config(&format!("C = {c}"))).unwrap();
        evaluate_excluding(&out.final_model, &s.test, &proto, &[&s.train, &s.valid]).unwrap()[0].mae
    };
    let (low, high) = (mae(0.0), mae(1e4));
    assert!(high < low, "{low} -> {high}");
}

#[test]
fn trace_has_one_record_per_epoch_and_a_best_checkpoint() {
    let d = data();
    let s = split(&d, (0.8, 0.1, 0.1), 0).unwrap();
    let cfg = config("epochs = 3");
    let out = train_new_model(&s.train, Some(&s.valid), &cfg).unwrap();
    let per_epoch = cfg.steps_per_epoch(&s.train);
    assert_eq!(out.trace.records.len(), 3);
    assert_eq!(out.trace.z_norms.len(), 3 * per_epoch);
    assert!(out.trace.records.iter().all(|r| r.valid_ndcg.is_finite()));
    assert!(out.trace.records.iter().any(|r| r.step == out.best_step));

    let mut csv = Vec::new();
    out.trace.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,epoch,z_norm,train_loss,valid_ndcg,valid_mae,valid_mse\n"));
    assert_eq!(text.lines().count(), 4);
    let meta: serde_json::Value = serde_json::from_str(&out.trace.metadata_json()).unwrap();
    assert!(meta.is_object());
}

#[test]
fn checkpoint_survives_a_file_round_trip() {
    let d = data();
    let out = train_new_model(&d, None, &config("epochs = 1")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.final_model.save(&path).unwrap();
    let back = FactorizationScorer::load(&path).unwrap();
    assert_eq!(back, out.final_model);
    assert_eq!(back.score(3, 7).unwrap(), out.final_model.score(3, 7).unwrap());
}

#[test]
fn listnet_and_step_decay_train() {
    let d = data();
    let out = train_new_model(&d, None, &config("loss = listnet\nlr_schedule = step\nC = 10")).unwrap();
    assert!(out.final_model.params().values().iter().all(|w| w.is_finite()));
}
