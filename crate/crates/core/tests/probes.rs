mod common;

use common::{brute_force_knn, gd_oracle};
use contilearn::data::{make_synthetic_stream, SyntheticSpec, TaskStream};
use contilearn::models::{param_digest, ModelConfig};
use contilearn::probes::lbfgs::LbfgsOptions;
use contilearn::probes::logreg::{default_reg_grid, fit, fit_path, LinearClassifier, Problem};
use contilearn::probes::{knn_predict, run_probe, ProbeConfig, ProbeKind};
use contilearn::trainers::{train_stream, Method, TrainConfig};
use contilearn::{Model, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn knn_returns_the_label_of_an_identical_point() {
    let refs = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.2]).unwrap();
    let q = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(knn_predict(&refs, &[0, 1, 2], 3, &q, 1, 0.1).unwrap(), vec![1]);
}

#[test]
fn knn_with_one_reference_label_always_predicts_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let refs = tensor(20, 4, &mut rng);
    let q = tensor(30, 4, &mut rng);
    let pred = knn_predict(&refs, &[2; 20], 3, &q, 200, 0.1).unwrap();
    assert!(pred.iter().all(|&p| p == 2));
}

#[test]
fn knn_weighted_vote_hand_case() {
    // Similarities to the query (1, 0): 1.0, 0.8, 0.6, 0.0, -0.6.
    let refs = Tensor::new(
        vec![5, 2],
        vec![1.0, 0.0, 0.8, 0.6, 0.6, 0.8, 0.0, 1.0, -0.6, 0.8],
    )
    .unwrap();
    let q = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
    let labels = [0, 1, 1, 1, 1];
    // With T = 1: class 0 gets e^1 = 2.718; class 1 gets e^0.8 + e^0.6 + e^0 + e^-0.6 = 5.197.
    assert_eq!(knn_predict(&refs, &labels, 2, &q, 5, 1.0).unwrap(), vec![1]);
    // With T = 0.1: e^10 = 22026 against e^8 + e^6 + 1 + e^-6 = 3385.
    assert_eq!(knn_predict(&refs, &labels, 2, &q, 5, 0.1).unwrap(), vec![0]);
    for (k, t) in [(1, 0.1), (2, 1.0), (3, 1.0), (5, 1.0), (5, 0.1)] {
        assert_eq!(
            knn_predict(&refs, &labels, 2, &q, k, t).unwrap(),
            brute_force_knn(&refs, &labels, 2, &q, k, t)
        );
    }
}

#[test]
fn knn_matches_brute_force_on_random_instances() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs = tensor(200, 6, &mut rng);
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let queries = tensor(200, 6, &mut rng);
        for k in [1, 7, 50, 200] {
            assert_eq!(
                knn_predict(&refs, &labels, 4, &queries, k, 0.1).unwrap(),
                brute_force_knn(&refs, &labels, 4, &queries, k, 0.1),
                "seed {seed}, k {k}"
            );
        }
    }
}

#[test]
fn knn_ignores_uniform_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let refs = tensor(60, 5, &mut rng);
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let queries = tensor(40, 5, &mut rng);
    let scale = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 3.7).collect()).unwrap();
    assert_eq!(
        knn_predict(&refs, &labels, 3, &queries, 10, 0.1).unwrap(),
        knn_predict(&scale(&refs), &labels, 3, &scale(&queries), 10, 0.1).unwrap()
    );
}

#[test]
fn knn_rejects_unlabeled_references() {
    let refs = Tensor::zeros(&[1, 3]);
    let q = Tensor::zeros(&[1, 3]);
    assert!(knn_predict(&refs, &[], 2, &q, 1, 0.1).is_err());
    assert!(knn_predict(&refs, &[0], 2, &q, 0, 0.1).is_err());
}

#[test]
fn linear_fits_separable_singletons() {
    let feats = Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.0, -1.0, 0.5, 1.0]).unwrap();
    let labels = [1, 0];
    let p = Problem::new(&feats, &labels, 2).unwrap();
    let f = fit(&p, 1e-7, None, LbfgsOptions::default());
    assert_eq!(f.classifier.predict(&feats).unwrap(), vec![1, 0]);
}

#[test]
fn stronger_regularization_shrinks_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feats = tensor(40, 5, &mut rng);
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let p = Problem::new(&feats, &labels, 2).unwrap();
    let fits = fit_path(&p, &[1e-7, 1e2], LbfgsOptions::default());
    assert!(fits[1].classifier.weight_norm() < fits[0].classifier.weight_norm());
}

#[test]
fn linear_objective_matches_gradient_descent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // 25 points duplicated with one label flipped: 50 points, not separable.
    let base: Vec<Vec<f64>> = (0..25).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let base_labels: Vec<usize> = base.iter().map(|x| usize::from(x[0] + 0.5 * x[1] > 0.0)).collect();
    let mut rows = base.clone();
    rows.extend(base.iter().cloned());
    let mut labels = base_labels.clone();
    labels.extend(base_labels.iter().cloned());
    labels[25] = 1 - labels[25];
    let feats = Tensor::from_rows(&rows).unwrap();
    for reg in [1e-2, 1e-1, 1.0] {
        let p = Problem::new(&feats, &labels, 2).unwrap();
        let ours = fit(&p, reg, None, LbfgsOptions::default());
        assert!(ours.converged);
        let oracle = gd_oracle(&rows, &labels, 2, reg, 200_000, 0.5);
        assert!((ours.objective - oracle).abs() < 1e-6, "reg {reg}: {} vs {oracle}", ours.objective);
    }
}

fn trained() -> (Model, TaskStream) {
    let spec = SyntheticSpec {
        num_classes: 4,
        classes_per_task: 2,
        input_dim: 8,
        train_per_class: 60,
        test_per_class: 30,
        seed: 2,
        ..Default::default()
    };
    let stream = make_synthetic_stream(&spec, 0.5, 1).unwrap();
    let mc = ModelConfig {
        input_dim: 8,
        hidden_dims: vec![16],
        feature_dim: 8,
        num_groups: 4,
        classes_per_task: 2,
        init_seed: 1,
    };
    let mut tc = TrainConfig::default().for_method(Method::Sgd);
    tc.epochs_per_task = 3;
    tc.sgd.learning_rate = 0.05;
    let out = train_stream(&stream, &mc, &tc).unwrap();
    (out.model, stream)
}

fn quick(kind: ProbeKind) -> ProbeConfig {
    let mut c = ProbeConfig::new(kind);
    c.lp_epochs = 3;
    c.ft_epochs = 3;
    c.reg_grid = contilearn::probes::logreg::logspace(1e-4, 1e1, 6);
    c.report_test_selected = true;
    c
}

#[test]
fn probes_leave_the_model_untouched_and_report_bounded_accuracies() {
    let (model, stream) = trained();
    let digest = param_digest(&model);
    for kind in ProbeKind::ALL {
        let r = run_probe(&model, &stream, &quick(kind), 7).unwrap();
        assert_eq!(param_digest(&model), digest);
        assert_eq!(r.probe, kind);
        assert_eq!(r.per_task.len(), stream.len());
        assert!(r.per_task.iter().all(|s| (0.0..=1.0).contains(&s.accuracy)));
        let mean = r.per_task.iter().map(|s| s.accuracy).sum::<f64>() / r.per_task.len() as f64;
        assert!((r.average - mean).abs() <= f64::EPSILON);
        assert!(r.test_selected_average.unwrap() >= r.average - 1e-12);
    }
}

#[test]
fn lpft_probe_audits_its_head_phase() {
    let (model, stream) = trained();
    let r = run_probe(&model, &stream, &quick(ProbeKind::Lpft), 7).unwrap();
    let global = r.global.as_ref().unwrap();
    assert!(quick(ProbeKind::Lpft).lr_grid().unwrap().contains(&global.hyperparam));
    for s in &r.per_task {
        assert_eq!(s.lp_audits.len(), 6);
        for a in &s.lp_audits {
            assert!(a.theta_unchanged);
            assert_eq!(a.joint_initial_loss, a.lp_final_loss);
        }
        assert!(s.adapted_digest.is_some());
    }
}

#[test]
fn probe_results_serialize_in_the_documented_shape() {
    let (model, stream) = trained();
    let r = run_probe(&model, &stream, &ProbeConfig::new(ProbeKind::Knn), 0).unwrap();
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert_eq!(v["probe"], "knn");
    assert!(v["average"].is_number());
    let first = &v["per_task"][0];
    assert_eq!(first["task"], 0);
    assert!(first["accuracy"].is_number() && first["hyperparam"].is_number());
    let back: contilearn::probes::ProbeResult = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
}

#[test]
fn probes_are_deterministic() {
    let (model, stream) = trained();
    for kind in ProbeKind::ALL {
        let a = run_probe(&model, &stream, &quick(kind), 3).unwrap();
        let b = run_probe(&model, &stream, &quick(kind), 3).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn default_reg_grid_spans_the_documented_range() {
    let g = default_reg_grid();
    assert_eq!((g.len(), g[0], g[99]), (100, 1e-7, 1e2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fitted_objective_never_exceeds_the_zero_classifier(
        seed in 0u64..1000,
        n in 3usize..30,
        reg_exp in -7.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = tensor(n, 4, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let p = Problem::new(&feats, &labels, 3).unwrap();
        let reg = 10f64.powf(reg_exp);
        let f = fit(&p, reg, None, LbfgsOptions { max_iter: 200, ..Default::default() });
        prop_assert!(f.objective <= p.objective_at(reg, &LinearClassifier::zeros(4, 3)));
    }

    #[test]
    fn knn_agrees_with_brute_force(seed in 0u64..1000, k in 1usize..40, temp in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs = tensor(30, 3, &mut rng);
        let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
        let q = tensor(10, 3, &mut rng);
        prop_assert_eq!(
            knn_predict(&refs, &labels, 3, &q, k, temp).unwrap(),
            brute_force_knn(&refs, &labels, 3, &q, k.min(30), temp)
        );
    }
}
