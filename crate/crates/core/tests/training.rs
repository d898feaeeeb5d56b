mod common;

use comorbid::cohort::{self, CohortSpec};
use comorbid::config::EvalConfig;
use comorbid::experiments::{self, Dataset, Split};
use comorbid::featurizer::{build_vocabulary, featurize_corpus, FeaturizerConfig};
use comorbid::models::{self, ModelKind, StlTopology, TaskRegistry};
use comorbid::numerics::{backprop, BackpropOptions, Label, LabelMatrix, Network};
use comorbid::seed;
use comorbid::trainer::{self, Optimizer, TrainConfig, TrainData};
use comorbid::Error;
use proptest::prelude::*;
use rand::Rng;

fn jitter(net: &mut Network, rng: &mut impl Rng) {
    for l in net.trunk.iter_mut().chain(net.heads.iter_mut().flatten()) {
        for b in l.bias.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mtl_gradient_matches_finite_differences(seed_ in any::<u64>(), width in 2usize..6, tasks in 1usize..4, l2 in 0.0f64..0.05) {
        let mut rng = seed::rng(seed_);
        let names = ["anxiety", "depression", "ptsd"];
        let reg = TaskRegistry::standard().subset(&names[..tasks]).unwrap();
        let mut net = models::build_mtl(5, width, 2, &reg, &mut rng).unwrap().nets.remove(0);
        jitter(&mut net, &mut rng);
        let x = common::random_csr(6, 5, 0.7, &mut rng);
        let y = common::random_labels(6, tasks, &mut rng);
        prop_assert!(common::max_grad_error(&net, &x, &y, l2, 1e-5) < 1e-4);
    }

    #[test]
    fn masked_rows_never_change_gradients(seed_ in any::<u64>(), extra in 1usize..6) {
        let mut rng = seed::rng(seed_);
        let reg = TaskRegistry::standard().subset(&["anxiety", "ptsd"]).unwrap();
        let net = models::build_mtl(7, 4, 1, &reg, &mut rng).unwrap().nets.remove(0);
        let x = common::random_csr(5, 7, 0.5, &mut rng);
        let y = common::random_labels(5, 2, &mut rng);
        // Put the masked users first so they sit between nothing and the real rows.
        let pad = common::random_csr(extra, 7, 0.5, &mut rng);
        let x2 = pad.vstack(&x).unwrap();
        let mut rows: Vec<Vec<Label>> = vec![vec![Label::Masked; 2]; extra];
        rows.extend((0..5).map(|r| y.row(r).to_vec()));
        let y2 = LabelMatrix::from_rows(&rows).unwrap();
        let o = BackpropOptions { l2: 1e-3, freeze_trunk: false };
        let a = backprop(&net, &x, &y, o).unwrap();
        let b = backprop(&net, &x2, &y2, o).unwrap();
        prop_assert_eq!(a.head_losses, b.head_losses);
        prop_assert_eq!(a.grad, b.grad);
    }
}

#[test]
fn stl_and_lr_gradients_match_finite_differences() {
    let mut rng = seed::rng(12);
    let reg = TaskRegistry::standard().subset(&["eating"]).unwrap();
    for draw in 0..10 {
        let topo = StlTopology {
            input_dim: 6,
            hidden_widths: [5, 4],
        };
        let mut stl = models::build_stl(topo, &reg, draw).unwrap().nets.remove(0);
        jitter(&mut stl, &mut rng);
        let mut lr = models::build_lr(6, &reg).unwrap().nets.remove(0);
        jitter(&mut lr, &mut rng);
        let x = common::random_csr(7, 6, 0.6, &mut rng);
        let y = common::random_labels(7, 1, &mut rng);
        assert!(common::max_grad_error(&stl, &x, &y, 0.01, 1e-5) < 1e-4);
        assert!(common::max_grad_error(&lr, &x, &y, 0.01, 1e-5) < 1e-4);
    }
}

fn dataset(n: usize, signal: f64, seed_: u64) -> (Dataset, Split) {
    let spec = CohortSpec {
        n_users: n,
        signal_strength: signal,
        doc_length_mean: 400,
        doc_length_min: 200,
        seed: seed_,
        ..CohortSpec::default()
    };
    let c = cohort::generate(&spec).unwrap();
    let folds = cohort::make_folds(
        n,
        5,
        Some(&c.strata()),
        &mut seed::derive_rng(seed_, "folds"),
    )
    .unwrap();
    let split = Split::from_folds(&folds).unwrap();
    let fc = FeaturizerConfig {
        orders: [1, 2].into_iter().collect(),
        top_k: 100,
        ..FeaturizerConfig::default()
    };
    let vocab = build_vocabulary(&c.documents(), &fc).unwrap();
    let x = featurize_corpus(&c.documents(), &vocab).unwrap();
    (
        Dataset::new(c.user_ids(), x, c.label_matrix(), c.tasks.clone()).unwrap(),
        split,
    )
}

fn quick() -> TrainConfig {
    TrainConfig {
        joint_iters: 300,
        finetune_iters: 50,
        hidden_width: 16,
        batch_size: 64,
        ..TrainConfig::default()
    }
}

#[test]
fn strong_signal_lets_lr_separate_the_condition() {
    let (data, split) = dataset(500, 0.5, 31);
    let cfg = TrainConfig {
        model: ModelKind::Lr,
        joint_iters: 2000,
        learning_rate: 0.5,
        l2: 0.0,
        ..quick()
    };
    let model = experiments::build_model(
        ModelKind::Lr,
        data.x.cols(),
        &data.tasks,
        data.tasks.len(),
        &cfg,
    )
    .unwrap();
    let trained = experiments::train(model, &data, &split, &cfg).unwrap();
    let ev =
        experiments::evaluate(&trained.params, &data, &split.test, &EvalConfig::default()).unwrap();
    let dep = ev.metrics.iter().find(|m| m.task == "depression").unwrap();
    assert!(dep.auc.unwrap() > 0.9, "depression AUC {:?}", dep.auc);
}

#[test]
fn stronger_l2_shrinks_weights() {
    let (data, split) = dataset(200, 0.2, 32);
    let mut norms = Vec::new();
    for l2 in [0.0, 1e-2, 1.0] {
        let cfg = TrainConfig { l2, ..quick() };
        let model = experiments::build_model(
            ModelKind::Mtl,
            data.x.cols(),
            &data.tasks,
            data.tasks.len(),
            &cfg,
        )
        .unwrap();
        let td = TrainData {
            x: &data.x,
            y: &data.labels,
            train: &split.train,
            dev: &split.dev,
        };
        let out = trainer::train_joint(model.nets[0].clone(), td, &cfg, &mut seed::rng(1)).unwrap();
        norms.push(out.last.weight_sq_norm());
    }
    assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
}

#[test]
fn finetune_leaves_trunk_untouched() {
    let (data, split) = dataset(200, 0.2, 33);
    let cfg = quick();
    let model = experiments::build_model(
        ModelKind::Mtl,
        data.x.cols(),
        &data.tasks,
        data.tasks.len(),
        &cfg,
    )
    .unwrap();
    let td = TrainData {
        x: &data.x,
        y: &data.labels,
        train: &split.train,
        dev: &split.dev,
    };
    let mut rng = seed::rng(2);
    let joint = trainer::train_joint(model.nets[0].clone(), td, &cfg, &mut rng).unwrap();
    let ft = trainer::finetune_heads(joint.best.params.clone(), td, &cfg, &mut rng).unwrap();
    assert_eq!(ft.net.trunk, joint.best.params.trunk);
    for (h, report) in ft.heads.iter().enumerate() {
        if report.iteration == 0 {
            assert_eq!(ft.net.heads[h], joint.best.params.heads[h]);
        }
        let best = ft
            .curve
            .iter()
            .map(|p| p.head_dev_losses[h])
            .fold(f64::INFINITY, f64::min);
        if report.had_dev_labels {
            assert_eq!(report.dev_loss, best);
        }
    }
}

#[test]
fn selected_checkpoint_has_lowest_dev_loss() {
    let (data, split) = dataset(200, 0.2, 34);
    let cfg = quick();
    let model = experiments::build_model(
        ModelKind::Mtl,
        data.x.cols(),
        &data.tasks,
        data.tasks.len(),
        &cfg,
    )
    .unwrap();
    let td = TrainData {
        x: &data.x,
        y: &data.labels,
        train: &split.train,
        dev: &split.dev,
    };
    let out = trainer::train_joint(model.nets[0].clone(), td, &cfg, &mut seed::rng(3)).unwrap();
    let min = out
        .curve
        .iter()
        .map(|p| p.dev_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.dev_loss, min);
    let first = out.curve.iter().find(|p| p.dev_loss == min).unwrap();
    assert_eq!(out.best.iteration, first.iteration);
    assert_eq!(out.curve.len(), cfg.joint_iters / cfg.eval_every + 1);
}

#[test]
fn protocol_is_deterministic() {
    let (data, split) = dataset(150, 0.2, 35);
    let cfg = TrainConfig {
        joint_iters: 60,
        finetune_iters: 20,
        seed: 9,
        ..quick()
    };
    let eval = EvalConfig {
        bootstrap_resamples: 200,
        ..EvalConfig::default()
    };
    let kinds = [ModelKind::Lr, ModelKind::Stl, ModelKind::Mtl];
    let (a, runs_a) = experiments::run_protocol(&data, &split, &kinds, &cfg, &eval, 1).unwrap();
    let (b, runs_b) = experiments::run_protocol(&data, &split, &kinds, &cfg, &eval, 3).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    for (x, y) in runs_a.iter().zip(&runs_b) {
        assert_eq!(x.trained.params.to_bytes(), y.trained.params.to_bytes());
    }
    assert!(a
        .rows
        .iter()
        .any(|r| r.model == "mtl" && r.vs_lr.is_some() && r.vs_stl.is_some()));
}

#[test]
fn huge_sgd_step_is_reported_as_divergence() {
    let (data, split) = dataset(100, 0.2, 36);
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        learning_rate: 1e300,
        joint_iters: 20,
        ..quick()
    };
    let model = experiments::build_model(
        ModelKind::Mtl,
        data.x.cols(),
        &data.tasks,
        data.tasks.len(),
        &cfg,
    )
    .unwrap();
    match experiments::train(model, &data, &split, &cfg) {
        Err(Error::Diverged { .. } | Error::NonFinite { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|_| ())),
    }
}
