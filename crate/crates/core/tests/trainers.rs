mod common;

use contilearn::data::{make_synthetic_stream, SyntheticSpec, TaskStream};
use contilearn::models::{argmax_rows, init_model, param_digest, ModelConfig};
use contilearn::trainers::{
    average_test_accuracy, train_stream, train_task_der, train_task_lpft, train_task_sgd, train_task_si,
    CheckpointStrategy, LpSolver, Method, MethodParams, Phase, ReplayBuffer, ReplayEntry, SiState, TrainConfig,
    TrainLog,
};
use contilearn::{Error, Model};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        classes_per_task: 2,
        input_dim: 8,
        train_per_class: 40,
        test_per_class: 20,
        cluster_separation: 3.0,
        noise_sigma: 1.0,
        seed: 11,
        ..Default::default()
    }
}

fn small_stream() -> TaskStream {
    make_synthetic_stream(&small_spec(), 0.25, 0).unwrap()
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        hidden_dims: vec![16],
        feature_dim: 8,
        num_groups: 4,
        classes_per_task: 2,
        init_seed: 5,
    }
}

fn config(method: Method, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::default().for_method(method);
    c.epochs_per_task = epochs;
    c.lp_epochs = epochs;
    c.ft_epochs = epochs;
    c.sgd.learning_rate = 0.05;
    c.sgd.batch_size = 16;
    c.seed = 3;
    c
}

fn fresh() -> Model {
    init_model(&small_model_config()).unwrap()
}

fn bitwise_same(a: &Model, b: &Model) -> bool {
    param_digest(a) == param_digest(b)
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let stream = small_stream();
    let mut m = fresh();
    m.add_head(0);
    let before = m.clone();
    train_task_sgd(&mut m, &stream.tasks[0], &config(Method::Sgd, 0), &mut TrainLog::default()).unwrap();
    assert!(bitwise_same(&before, &m));
}

#[test]
fn separable_task_is_fit() {
    let spec = SyntheticSpec {
        num_classes: 2,
        cluster_separation: 5.0,
        noise_sigma: 0.5,
        ..small_spec()
    };
    let stream = make_synthetic_stream(&spec, 1.0, 0).unwrap();
    let task = &stream.tasks[0];
    let mut m = fresh();
    train_task_sgd(&mut m, task, &config(Method::Sgd, 20), &mut TrainLog::default()).unwrap();
    let pred = argmax_rows(&m.predict(0, &task.train.inputs).unwrap());
    let truth = task.local_labels(&task.train);
    let acc = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64;
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn training_is_deterministic() {
    let stream = small_stream();
    for method in Method::ALL {
        let a = train_stream(&stream, &small_model_config(), &config(method, 2)).unwrap();
        let b = train_stream(&stream, &small_model_config(), &config(method, 2)).unwrap();
        assert!(bitwise_same(&a.model, &b.model), "{method}");
        assert_eq!(a.log.epochs, b.log.epochs);
    }
}

#[test]
fn lp_phase_freezes_the_extractor_and_hands_over_its_loss() {
    let stream = small_stream();
    let mut m = fresh();
    let mut log = TrainLog::default();
    for task in &stream.tasks {
        train_task_lpft(&mut m, task, &config(Method::Lpft, 3), &mut log).unwrap();
    }
    assert_eq!(log.lp_audits.len(), 2);
    for audit in &log.lp_audits {
        assert!(audit.theta_unchanged());
        assert_eq!(audit.joint_initial_loss, Some(audit.lp_final_loss));
    }
    assert!(log.epochs.iter().any(|r| r.phase == Phase::Lp));
}

#[test]
fn lpft_without_fine_tuning_is_a_linear_fit() {
    let stream = small_stream();
    let mut cfg = config(Method::Lpft, 5);
    cfg.ft_epochs = 0;
    let mut m = fresh();
    let before = m.extractor.clone();
    let mut log = TrainLog::default();
    train_task_lpft(&mut m, &stream.tasks[0], &cfg, &mut log).unwrap();
    assert_eq!(param_digest(&m.extractor), param_digest(&before));
    assert!(log.epochs.iter().all(|r| r.phase == Phase::Lp));
}

#[test]
fn lbfgs_head_solver_is_used_or_falls_back() {
    let stream = small_stream();
    let mut cfg = config(Method::Lpft, 2);
    cfg.method_params.lp_solver = Some(LpSolver::Lbfgs);
    assert_eq!(cfg.label(), "lpft+sk");
    let out = train_stream(&stream, &small_model_config(), &cfg).unwrap();
    for audit in &out.log.lp_audits {
        assert!(audit.theta_unchanged());
        assert_eq!(audit.joint_initial_loss, Some(audit.lp_final_loss));
        let lp_epochs = out.log.task_losses(audit.task).filter(|r| r.phase == Phase::Lp).count();
        assert_eq!(lp_epochs, if audit.solver_fallback { 2 } else { 0 });
    }
}

fn two_task_trajectory(method: Method, params: MethodParams) -> Vec<String> {
    let stream = small_stream();
    let mut cfg = config(method, 3);
    cfg.method_params = params;
    let mut m = fresh();
    let mut log = TrainLog::default();
    let mut si = SiState::new(&m.extractor, params.si_c(), params.si_xi());
    let mut buffer = ReplayBuffer::new(params.der_capacity(), cfg.seed);
    let mut digests = Vec::new();
    for task in &stream.tasks {
        match method {
            Method::Si => train_task_si(&mut m, task, &mut si, &cfg, &mut log).unwrap(),
            Method::Der => train_task_der(&mut m, task, &mut buffer, &cfg, &mut log).unwrap(),
            _ => train_task_sgd(&mut m, task, &cfg, &mut log).unwrap(),
        }
        digests.push(param_digest(&m));
    }
    digests
}

#[test]
fn degenerate_si_and_der_match_sgd_bitwise() {
    let sgd = two_task_trajectory(Method::Sgd, MethodParams::default());
    let si = two_task_trajectory(
        Method::Si,
        MethodParams {
            si_c: Some(0.0),
            ..Default::default()
        },
    );
    let der_empty = two_task_trajectory(
        Method::Der,
        MethodParams {
            der_alpha: Some(0.0),
            der_capacity: Some(0),
            ..Default::default()
        },
    );
    let der_unsampled = two_task_trajectory(
        Method::Der,
        MethodParams {
            der_alpha: Some(0.0),
            der_capacity: Some(50),
            ..Default::default()
        },
    );
    assert_eq!(sgd, si);
    assert_eq!(sgd, der_empty);
    assert_eq!(sgd, der_unsampled);
    let si_active = two_task_trajectory(Method::Si, MethodParams::default());
    assert_eq!(sgd[0], si_active[0], "no penalty on the first task");
    assert_ne!(sgd[1], si_active[1]);
}

#[test]
fn si_path_integral_matches_hand_trace() {
    // f(w) = 0.5 * a * (w - b)^2, three plain gradient steps of size lr.
    let (a, b, lr, w0, xi) = (2.0_f64, 1.5_f64, 0.1_f64, -0.5_f64, 0.25_f64);
    let mut si = SiState {
        omega: vec![0.0],
        big_omega: vec![0.0],
        theta_star: vec![w0],
        c: 1.0,
        xi,
        tasks_seen: 0,
    };
    let mut w = w0;
    let mut hand_omega = 0.0;
    for _ in 0..3 {
        let g = a * (w - b);
        let next = w - lr * g;
        si.accumulate(&[g], &[w], &[next]);
        hand_omega += -g * (next - w);
        w = next;
    }
    // Closed form: each step contributes lr * g^2, g shrinking by (1 - lr a).
    let g0 = a * (w0 - b);
    let r = 1.0 - lr * a;
    let closed: f64 = (0..3).map(|k| lr * (g0 * r.powi(k)).powi(2)).sum();
    assert!((hand_omega - closed).abs() < 1e-12);
    si.consolidate(&[w]);
    let expected = closed / ((w - w0).powi(2) + xi);
    assert!((si.big_omega[0] - expected).abs() < 1e-8);
    assert_eq!(si.omega, vec![0.0]);
    assert_eq!(si.theta_star, vec![w]);
}

#[test]
fn si_importance_stays_finite_and_nonnegative() {
    let stream = small_stream();
    let cfg = config(Method::Si, 3);
    let mut m = fresh();
    let mut si = SiState::new(&m.extractor, 1.0, 1.0);
    let mut log = TrainLog::default();
    for task in &stream.tasks {
        train_task_si(&mut m, task, &mut si, &cfg, &mut log).unwrap();
        assert!(si.big_omega.iter().all(|o| o.is_finite() && *o >= 0.0));
    }
    assert_eq!(si.tasks_seen, 2);
    assert!(si.big_omega.iter().any(|o| *o > 0.0));
}

#[test]
fn der_buffer_is_bounded_and_tagged() {
    let stream = small_stream();
    let cfg = config(Method::Der, 2);
    let mut m = fresh();
    let mut buffer = ReplayBuffer::new(30, cfg.seed);
    let mut log = TrainLog::default();
    for task in &stream.tasks {
        train_task_der(&mut m, task, &mut buffer, &cfg, &mut log).unwrap();
        assert_eq!(buffer.len(), 30);
    }
    assert_eq!(buffer.seen(), 2 * 2 * 80);
    assert!(buffer.entries().iter().all(|e| e.logits.len() == 2 && e.input.len() == 8));
    assert!(buffer.entries().iter().any(|e| e.task_id == 0));
}

#[test]
fn der_stores_logits_of_the_inserting_model() {
    // One step over a single batch: every stored entry was inserted after
    // that step, so the final model reproduces the stored logits exactly.
    let stream = small_stream();
    let mut cfg = config(Method::Der, 1);
    cfg.sgd.batch_size = 1000;
    let mut m = fresh();
    let mut buffer = ReplayBuffer::new(500, cfg.seed);
    train_task_der(&mut m, &stream.tasks[0], &mut buffer, &cfg, &mut TrainLog::default()).unwrap();
    for e in buffer.entries() {
        let x = contilearn::Tensor::new(vec![1, 8], e.input.clone()).unwrap();
        assert_eq!(m.predict(0, &x).unwrap().data(), e.logits.as_slice());
    }
}

#[test]
fn reservoir_retains_items_uniformly() {
    let (n, m, trials) = (100usize, 10usize, 10_000u64);
    let mut counts = vec![0u64; n];
    for seed in 0..trials {
        let mut buf = ReplayBuffer::new(m, seed);
        for i in 0..n {
            if let Some(slot) = buf.offer() {
                buf.place(
                    slot,
                    ReplayEntry {
                        input: vec![i as f64],
                        logits: vec![],
                        task_id: 0,
                    },
                );
            }
        }
        for e in buf.entries() {
            counts[e.input[0] as usize] += 1;
        }
    }
    let expected = trials as f64 * m as f64 / n as f64;
    for &c in &counts {
        let freq = c as f64 / trials as f64;
        assert!((freq - 0.1).abs() <= 0.01, "retention {freq}");
    }
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.001, "chi-square {stat}, p {p}");
}

#[test]
fn single_task_stream_reduces_to_single_task_training() {
    let spec = SyntheticSpec {
        num_classes: 2,
        ..small_spec()
    };
    let stream = make_synthetic_stream(&spec, 0.25, 0).unwrap();
    let cfg = config(Method::Sgd, 3);
    let out = train_stream(&stream, &small_model_config(), &cfg).unwrap();
    let mut m = fresh();
    train_task_sgd(&mut m, &stream.tasks[0], &cfg, &mut TrainLog::default()).unwrap();
    assert!(bitwise_same(&out.model, &m));
    assert_eq!(out.checkpoints.len(), 1);
}

#[test]
fn last_strategy_returns_the_final_epoch() {
    let stream = small_stream();
    let cfg = config(Method::Sgd, 3);
    let out = train_stream(&stream, &small_model_config(), &cfg).unwrap();
    let mut m = fresh();
    let mut log = TrainLog::default();
    for task in &stream.tasks {
        train_task_sgd(&mut m, task, &cfg, &mut log).unwrap();
    }
    assert!(bitwise_same(&out.model, &m));
    assert!(bitwise_same(&out.checkpoints[1].model, &m));
    assert_eq!(out.log.checkpoints[1].epoch, 2);
    assert_eq!(out.log.epochs, log.epochs);
}

#[test]
fn best_avg_strategy_keeps_the_best_snapshot() {
    let stream = small_stream();
    let mut cfg = config(Method::Sgd, 4);
    cfg.checkpoint_strategy = CheckpointStrategy::BestAvg;
    let out = train_stream(&stream, &small_model_config(), &cfg).unwrap();
    let last = train_stream(&stream, &small_model_config(), &config(Method::Sgd, 4)).unwrap();
    for (t, rec) in out.log.checkpoints.iter().enumerate() {
        let chosen = rec.average_accuracy.unwrap();
        let seen = &stream.tasks[..=t];
        assert_eq!(chosen, average_test_accuracy(&out.checkpoints[t].model, seen).unwrap());
        assert!(rec.epoch < 4);
    }
    let best_final = out.log.checkpoints[1].average_accuracy.unwrap();
    let last_final = average_test_accuracy(&last.model, &stream.tasks).unwrap();
    // Task 1 starts from possibly different weights, so only sanity-check range.
    assert!((0.0..=1.0).contains(&best_final) && (0.0..=1.0).contains(&last_final));
}

#[test]
fn divergence_reports_task_and_epoch() {
    let stream = small_stream();
    let mut cfg = config(Method::Sgd, 5);
    cfg.sgd.learning_rate = 1e200;
    match train_stream(&stream, &small_model_config(), &cfg) {
        Err(Error::Training { task, epoch, .. }) => {
            assert_eq!(task, 0);
            assert!(epoch < 5);
        }
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn misplaced_method_params_are_rejected() {
    let cfg: TrainConfig = toml::from_str(
        r#"
        method = "sgd"
        [method_params]
        der_alpha = 0.3
        "#,
    )
    .unwrap();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let ok: TrainConfig = toml::from_str(
        r#"
        method = "der+lpft"
        [method_params]
        der_alpha = 0.3
        lp_solver = "lbfgs"
        "#,
    )
    .unwrap();
    ok.validate().unwrap();
    assert_eq!(ok.label(), "der+lpft+sk");
}

#[test]
fn mismatched_stream_is_a_config_error() {
    let stream = small_stream();
    let mut mc = small_model_config();
    mc.input_dim = 9;
    assert!(matches!(
        train_stream(&stream, &mc, &config(Method::Sgd, 1)),
        Err(Error::Config(_))
    ));
}

/// Soft check: at the smallest grid rate the last epoch's loss is no higher
/// than the first epoch's on every task, for a majority of five seeds.
#[test]
fn losses_decrease_at_the_smallest_grid_rate() {
    let lr = contilearn::harness::lr_grid(16).unwrap()[0];
    for method in Method::ALL {
        let mut ok = 0;
        for seed in 0..5u64 {
            let mut cfg = config(method, 4);
            cfg.sgd.learning_rate = lr;
            cfg.seed = seed;
            let mc = ModelConfig {
                init_seed: seed,
                ..small_model_config()
            };
            let out = train_stream(&small_stream(), &mc, &cfg).unwrap();
            let decreased = (0..2).all(|t| {
                let losses: Vec<f64> = out.log.task_losses(t).map(|r| r.loss).collect();
                losses.last() <= losses.first()
            });
            ok += usize::from(decreased);
        }
        assert!(ok >= 3, "{method}: {ok}/5");
    }
}
