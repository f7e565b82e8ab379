mod common;

use common::pair_spec;
use icl_bayes_core::net::{Architecture, TransformerParams};
use icl_bayes_core::risk::{estimate_risks, TransformerPredictor};
use icl_bayes_core::taskgen::sample_batch;
use icl_bayes_core::trainer::{
    erm_train, initial_params, sweep_pn, train_from, training_data, write_sweep_csv, OptimizerKind, TrainConfig,
};
use icl_bayes_core::Error;

fn small_cfg() -> TrainConfig {
    TrainConfig {
        n_prompts: 64,
        steps: 40,
        batch_size: 16,
        eval_every: 10,
        n_heldout: 32,
        seed: 3,
        arch: Architecture {
            m: 4,
            ..Architecture::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn bias_only_model_fits_a_single_target() {
    let spec = pair_spec(1);
    let data = sample_batch(&spec, 1, 1).unwrap();
    // With zero weights only the output bias receives gradient.
    let params = TransformerParams::<f64>::zeros(1, 4, 1.0, spec.b_f(), &[2, 8, 4], &[5, 4, 1]);
    let cfg = TrainConfig {
        n_prompts: 1,
        steps: 400,
        batch_size: 1,
        learning_rate: 0.1,
        optimizer: OptimizerKind::Sgd,
        grad_clip_norm: 0.0,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let (trained, log) = train_from(params, &cfg, &data, &data, false).unwrap();
    let target = data[0].target(1);
    assert!((trained.decoder[1].bias[0] - target).abs() <= 1e-6);
    assert!(log.final_objective <= 1e-12);
}

#[test]
fn training_is_deterministic() {
    let spec = pair_spec(4);
    let (a, la) = erm_train(&spec, &small_cfg()).unwrap();
    let (b, lb) = erm_train(&spec, &small_cfg()).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.records, lb.records);
}

#[test]
fn logged_objective_is_the_network_loss() {
    let spec = pair_spec(4);
    let cfg = small_cfg();
    let (train, _) = training_data(&spec, &cfg).unwrap();
    let (params, log) = erm_train(&spec, &cfg).unwrap();
    let (loss, _) = params.loss_and_grad(&train).unwrap();
    assert!((log.final_objective - loss).abs() <= 1e-12);
    assert!(log.records.windows(2).all(|w| w[0].step < w[1].step));
    assert!(log.records.iter().all(|r| r.train_loss.is_finite()));
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("step,train_loss,heldout_loss"));
}

#[test]
fn spectral_projection_keeps_snapshots_within_budget() {
    let spec = pair_spec(4);
    let cfg = TrainConfig {
        spectral_projection: true,
        learning_rate: 0.05,
        ..small_cfg()
    };
    let (params, log) = erm_train(&spec, &cfg).unwrap();
    let (be, bd) = params.budgets(2.0, 2.0);
    for r in log.records.iter().filter(|r| r.s_encoder.is_some()) {
        assert!(r.s_encoder.unwrap() <= be * (1.0 + 1e-6));
        assert!(r.s_decoder.unwrap() <= bd * (1.0 + 1e-6));
    }
}

#[test]
fn resuming_is_flagged() {
    let spec = pair_spec(4);
    let cfg = small_cfg();
    let (train, held) = training_data(&spec, &cfg).unwrap();
    let (params, _) = erm_train(&spec, &cfg).unwrap();
    let (_, log) = train_from(params, &cfg, &train, &held, true).unwrap();
    assert!(log.resumed_fresh_optimizer);
}

#[test]
fn divergence_returns_the_last_good_parameters() {
    let spec = pair_spec(4);
    let cfg = TrainConfig {
        learning_rate: 1e306,
        optimizer: OptimizerKind::Sgd,
        grad_clip_norm: 0.0,
        ..small_cfg()
    };
    match erm_train(&spec, &cfg) {
        Err(Error::Diverged { last_good, .. }) => assert!(last_good.is_finite()),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_diagnosed() {
    let cfg = TrainConfig {
        learning_rate: 0.0,
        batch_size: 0,
        ..TrainConfig::default()
    };
    let d = cfg.validate_at("train");
    assert!(d.iter().any(|d| d.key == "train.learning_rate"));
    assert!(d.iter().any(|d| d.key == "train.batch_size"));
    assert!(TrainConfig::default().validate_at("train").is_empty());
}

#[test]
fn training_beats_the_initialization() {
    let spec = pair_spec(8);
    let cfg = TrainConfig::default();
    let (params, _) = erm_train(&spec, &cfg).unwrap();
    let trained = estimate_risks(&TransformerPredictor::new(params, "trained"), &spec, 2000, 5).unwrap();
    let init = estimate_risks(&TransformerPredictor::new(initial_params(&spec, &cfg), "init"), &spec, 2000, 5).unwrap();
    assert!(trained.aggregate.r_bg.mean < init.aggregate.r_bg.mean);
}

#[test]
fn single_cell_sweep_keeps_the_bookkeeping() {
    let spec = pair_spec(8);
    let rows = sweep_pn(&spec, &[(4, 64)], &[1], &small_cfg(), 200, 9).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].pn, 256);
    let rows = sweep_pn(&spec, &[(2, 64), (4, 32)], &[1], &small_cfg(), 100, 9).unwrap();
    assert_eq!(rows[0].pn, rows[1].pn);
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
}
