mod common;

use common::{meta_fd_error, random_task, scalar, QTask, Quadratic};
use metasep::autodiff::{Graph, Layout, ParamVector};
use metasep::gradcheck::central_difference;
use metasep::model::SeparatorConfig;
use metasep::par::Execution;
use metasep::taskgen::{AccentTaskSet, MetaTask};
use metasep::trainer::{
    adam_update, finetune_adapt, inner_adapt, joint_gradient, meta_gradient_fomaml, meta_gradient_maml,
    meta_objective, pooled_query_gradient, train, AdamConfig, AdamState, Mode, OuterOptimizer,
    SeparationObjective, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEQ: Execution = Execution::Sequential;

#[test]
fn inner_step_on_quadratic() {
    let t = QTask {
        a: 1.0,
        u: 1.0,
        b: 1.0,
        v: 3.0,
    };
    let adapted = inner_adapt(&Quadratic, &scalar(0.0), &t, 0.1).unwrap();
    assert!((adapted.values()[0] - 0.2).abs() < 1e-15);
    assert_eq!(inner_adapt(&Quadratic, &scalar(0.7), &t, 0.0).unwrap().values(), &[0.7]);

    let mut g = Graph::new();
    let leaves = g.bind_params(&scalar(0.0));
    let (ad, _) = metasep::trainer::inner_adapt_nodes(&Quadratic, &mut g, &leaves, &t, 0.1).unwrap();
    let s = g.sum(ad[0]).unwrap();
    let d = g.grad(s, &leaves).unwrap();
    assert!((g.value(d[0]).item() - 0.8).abs() < 1e-15);
}

#[test]
fn quadratic_worked_example() {
    let t = QTask {
        a: 1.0,
        u: 1.0,
        b: 1.0,
        v: 3.0,
    };
    let maml = meta_gradient_maml(&Quadratic, &scalar(0.0), &[&t], 0.1, SEQ).unwrap();
    let fo = meta_gradient_fomaml(&Quadratic, &scalar(0.0), &[&t], 0.1, SEQ).unwrap();
    assert!((maml.grad.values()[0] + 4.48).abs() < 1e-12);
    assert!((fo.grad.values()[0] + 5.6).abs() < 1e-12);
}

fn random_qtask(rng: &mut ChaCha8Rng) -> (QTask, f64, f64) {
    let t = QTask {
        a: rng.random_range(0.1..3.0),
        u: rng.random_range(-2.0..2.0),
        b: rng.random_range(0.1..3.0),
        v: rng.random_range(-2.0..2.0),
    };
    (t, rng.random_range(0.001..0.3), rng.random_range(-2.0..2.0))
}

#[test]
fn quadratic_closed_forms_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let (t, alpha, theta) = random_qtask(&mut rng);
        let tp = theta - alpha * 2.0 * t.a * (theta - t.u);
        let maml = meta_gradient_maml(&Quadratic, &scalar(theta), &[&t], alpha, SEQ).unwrap().grad.values()[0];
        let fo = meta_gradient_fomaml(&Quadratic, &scalar(theta), &[&t], alpha, SEQ).unwrap().grad.values()[0];
        let expect_fo = 2.0 * t.b * (tp - t.v);
        assert!((maml - expect_fo * (1.0 - 2.0 * t.a * alpha)).abs() <= 1e-8);
        assert!((fo - expect_fo).abs() <= 1e-8);
        let fd = central_difference(
            |v| meta_objective(&Quadratic, &scalar(v[0]), &[&t], alpha).unwrap(),
            &[theta],
            1e-5,
        )[0];
        assert!((fd - maml).abs() / maml.abs().max(1.0) <= 1e-8, "{fd} vs {maml}");
    }
}

#[test]
fn batch_gradient_is_sum_of_tasks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tasks: Vec<QTask> = (0..5).map(|_| random_qtask(&mut rng).0).collect();
    let refs: Vec<&QTask> = tasks.iter().collect();
    let all = meta_gradient_maml(&Quadratic, &scalar(0.3), &refs, 0.05, Execution::Parallel).unwrap();
    let sum: f64 = tasks
        .iter()
        .map(|t| meta_gradient_maml(&Quadratic, &scalar(0.3), &[t], 0.05, SEQ).unwrap().grad.values()[0])
        .sum();
    assert!((all.grad.values()[0] - sum).abs() < 1e-12);
}

#[test]
fn first_order_gap_shrinks_linearly_in_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, _, theta) = random_qtask(&mut rng);
    let gap = |alpha: f64| {
        let m = meta_gradient_maml(&Quadratic, &scalar(theta), &[&t], alpha, SEQ).unwrap().grad.values()[0];
        let f = meta_gradient_fomaml(&Quadratic, &scalar(theta), &[&t], alpha, SEQ).unwrap().grad.values()[0];
        (m - f).abs()
    };
    let g: Vec<f64> = [1e-1, 1e-2, 1e-3].iter().map(|&a| gap(a)).collect();
    for w in g.windows(2) {
        let ratio = w[0] / w[1];
        assert!((5.0..20.0).contains(&ratio), "gap ratio {ratio}");
    }
}

#[test]
fn zero_alpha_gradients_coincide_on_tiny_model() {
    let cfg = SeparatorConfig::tiny();
    let theta = cfg.init_params(2);
    let tasks: Vec<MetaTask> = (0..2).map(|s| random_task(s, 256)).collect();
    let refs: Vec<&MetaTask> = tasks.iter().collect();
    let obj = SeparationObjective::new(&cfg);
    let maml = meta_gradient_maml(&obj, &theta, &refs, 0.0, SEQ).unwrap().grad;
    let fo = meta_gradient_fomaml(&obj, &theta, &refs, 0.0, SEQ).unwrap().grad;
    let pooled = pooled_query_gradient(&obj, &theta, &refs, SEQ).unwrap();
    for ((m, f), p) in maml.values().iter().zip(fo.values()).zip(pooled.values()) {
        assert!((m - f).abs() <= 1e-12 && (m - p).abs() <= 1e-12);
    }
}

#[test]
fn tiny_meta_gradient_matches_finite_differences() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 2 {
        if let Some(err) = meta_fd_error(seed, 48, 0.01) {
            assert!(err <= 1e-4, "seed {seed}: {err}");
            checked += 1;
        }
        seed += 1;
        assert!(seed < 40, "too many cases near kinks");
    }
}

#[test]
fn adam_matches_reference_loop() {
    let cfg = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 6;
    let mut l = Layout::new();
    l.push("w", vec![n]);
    let init: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut theta = ParamVector::new(l.clone(), init.clone()).unwrap();
    let mut state = AdamState::new(n);
    let (lr, wd) = (1e-2, 1e-3);

    let mut r = init;
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    for step in 1..=5 {
        let grad: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        adam_update(&mut theta, &ParamVector::new(l.clone(), grad.clone()).unwrap(), &mut state, &cfg, lr, wd).unwrap();
        for i in 0..n {
            m[i] = 0.9 * m[i] + 0.1 * grad[i];
            v[i] = 0.999 * v[i] + 0.001 * grad[i] * grad[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(step));
            let vh = v[i] / (1.0 - 0.999f64.powi(step));
            r[i] = r[i] - lr * mh / (vh.sqrt() + 1e-8) - lr * wd * r[i];
        }
        assert_eq!(state.step, step as u64);
        for (a, b) in theta.values().iter().zip(&r) {
            assert!((a - b).abs() <= 1e-15);
        }
    }
}

fn task_sets(n_sets: usize, per_set: usize, samples: usize) -> Vec<AccentTaskSet> {
    (0..n_sets)
        .map(|k| AccentTaskSet {
            accent: format!("acc{k}"),
            tasks: (0..per_set).map(|j| random_task((k * 100 + j) as u64, samples)).collect(),
        })
        .collect()
}

fn quick_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 1,
        separator: SeparatorConfig::tiny(),
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn epoch_arithmetic() {
    let sets = task_sets(2, 3, 128);
    let mut cfg = quick_config(Mode::Fomaml);
    cfg.meta_batch = 6;
    let out = train(&cfg, &sets, &[], &mut |_, _| {}).unwrap();
    assert_eq!(out.outer_steps, 1);
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].dev_si_snri.is_none());
    cfg.meta_batch = 4;
    cfg.epochs = 2;
    assert_eq!(train(&cfg, &sets, &[], &mut |_, _| {}).unwrap().outer_steps, 4);
    let mut joint = quick_config(Mode::Joint);
    joint.joint_batch = 4;
    // 6 tasks × 5 mixtures = 30 → 8 minibatches
    assert_eq!(train(&joint, &sets, &[], &mut |_, _| {}).unwrap().outer_steps, 8);
}

#[test]
fn joint_step_descends_at_small_rate() {
    let cfg = SeparatorConfig::tiny();
    let task = random_task(21, 2000);
    let pair = &task.mixtures[0];
    let mut theta = cfg.init_params(1);
    let (before, g) = joint_gradient(&cfg, &theta, &[pair], SEQ).unwrap();
    let mut st = AdamState::new(theta.dim());
    adam_update(&mut theta, &g, &mut st, &AdamConfig::default(), 1e-4, 0.0).unwrap();
    let (after, _) = joint_gradient(&cfg, &theta, &[pair], SEQ).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn joint_training_on_one_mixture_decreases_monotonically() {
    let cfg = SeparatorConfig::tiny();
    let task = random_task(22, 4000);
    let pair = &task.mixtures[4];
    let mut theta = cfg.init_params(3);
    let mut st = AdamState::new(theta.dim());
    let mut prev = f64::INFINITY;
    for step in 0..50 {
        let (l, g) = joint_gradient(&cfg, &theta, &[pair], SEQ).unwrap();
        assert!(l < prev, "step {step}: {l} !< {prev}");
        prev = l;
        adam_update(&mut theta, &g, &mut st, &AdamConfig::default(), 1e-3, 1e-5).unwrap();
    }
}

#[test]
fn training_is_reproducible() {
    let sets = task_sets(2, 2, 256);
    let dev = task_sets(1, 1, 256);
    for mode in [Mode::Joint, Mode::Fomaml, Mode::Maml] {
        let mut cfg = quick_config(mode);
        cfg.epochs = 2;
        cfg.meta_batch = 2;
        let a = train(&cfg, &sets, &dev, &mut |_, _| {}).unwrap();
        cfg.execution = Execution::Sequential;
        let b = train(&cfg, &sets, &dev, &mut |_, _| {}).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log[1].dev_si_snri, b.log[1].dev_si_snri);
        assert_ne!(a.checkpoint.params, SeparatorConfig::tiny().init_params(0));
    }
}

#[test]
fn divergence_returns_last_good_checkpoint() {
    let mut sets = task_sets(1, 2, 128);
    sets[0].tasks[1].mixtures.iter_mut().for_each(|m| m.mixture.samples[3] = f64::NAN);
    let mut cfg = quick_config(Mode::Joint);
    cfg.joint_batch = 1;
    let out = train(&cfg, &sets, &[], &mut |_, _| {}).unwrap();
    assert!(out.aborted.is_some());
    assert!(out.checkpoint.params.is_finite());
    assert!(out.log.is_empty());
}

#[test]
fn sgd_outer_loop_applies_plain_step() {
    let sets = task_sets(1, 1, 128);
    let mut cfg = quick_config(Mode::Fomaml);
    cfg.optimizer = OuterOptimizer::Sgd;
    cfg.weight_decay = 0.0;
    cfg.meta_batch = 1;
    cfg.outer_lr = 0.05;
    let out = train(&cfg, &sets, &[], &mut |_, _| {}).unwrap();
    let theta = cfg.separator.init_params(metasep::taskgen::derive_seed(cfg.seed, "init"));
    let obj = SeparationObjective::new(&cfg.separator);
    let g = meta_gradient_fomaml(&obj, &theta, &[&sets[0].tasks[0]], cfg.inner_lr, SEQ).unwrap().grad;
    let mut expect = theta.clone();
    expect.axpy(-0.05, &g);
    assert_eq!(out.checkpoint.params, expect);
}

#[test]
fn finetune_zero_beta_and_shared_step() {
    let cfg = SeparatorConfig::tiny();
    let theta = cfg.init_params(8);
    let task = random_task(30, 512);
    let r0 = finetune_adapt(&theta, &cfg, &task, 0.0, None).unwrap();
    assert_eq!(r0.query_si_snri_before, r0.query_si_snri_after);
    assert_eq!(r0.params, theta);
    let r = finetune_adapt(&theta, &cfg, &task, 0.01, None).unwrap();
    let expect = inner_adapt(&SeparationObjective::new(&cfg), &theta, &task, 0.01).unwrap();
    assert_eq!(r.params, expect);
    assert_ne!(r.params, theta);
    assert_eq!(r.query_si_snri_before, r0.query_si_snri_before);
    assert!(r.support_loss_after < r.support_loss_before);
}

#[test]
fn first_order_step_is_cheaper() {
    let cfg = SeparatorConfig::tiny();
    let theta = cfg.init_params(0);
    let tasks: Vec<MetaTask> = (0..2).map(|s| random_task(s, 4000)).collect();
    let refs: Vec<&MetaTask> = tasks.iter().collect();
    let obj = SeparationObjective::new(&cfg);
    let time = |f: &dyn Fn()| {
        let t = std::time::Instant::now();
        f();
        t.elapsed()
    };
    let maml = time(&|| {
        meta_gradient_maml(&obj, &theta, &refs, 0.01, SEQ).unwrap();
    });
    let fo = time(&|| {
        meta_gradient_fomaml(&obj, &theta, &refs, 0.01, SEQ).unwrap();
    });
    assert!(fo < maml, "{fo:?} !< {maml:?}");
}

#[test]
fn config_rejects_bad_values() {
    let mut c = quick_config(Mode::Maml);
    c.inner_lr = 0.0;
    assert!(c.validate().is_err());
    c.mode = Mode::Joint;
    assert!(c.validate().is_ok());
    c.meta_batch = 0;
    assert!(c.validate().is_err());
}
