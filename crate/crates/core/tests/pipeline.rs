mod common;

use std::collections::HashSet;

use cotrans_core::config::TrainConfig;
use cotrans_core::data::{generate_synthetic, SynthSpec};
use cotrans_core::evaluation::{inject_source_noise, run, run_ablation, split_leave_one_out, Experiment, Variant};
use cotrans_core::graph::{Domain, InteractionGraph};
use cotrans_core::training::{fit, gradient_check_at, init_parameters, EpochRecord};
use cotrans_core::transfer::Alphas;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_experiment(seed: u64) -> Experiment {
    let synth = generate_synthetic(&SynthSpec {
        users: 60,
        source_items: 40,
        target_items: 40,
        source_per_user: 8,
        target_per_user: 6,
        seed,
        ..SynthSpec::default()
    })
    .unwrap();
    let b = synth.bundle;
    Experiment::new(b.source, &b.target, b.kg, seed).unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        embedding_dim: 8,
        batch_size: 16,
        max_epochs: 4,
        learning_rate: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn linear_path_gradients_are_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for _ in 0..10 {
        let mut inst = common::random_instance(&mut rng, true, false);
        inst.cfg.alphas = Alphas::new(0.01, 0.0, 0.0).unwrap();
        // The loss is still nonlinear in the scores, so gradients near zero are
        // judged against an absolute floor of 1e-4.
        let r = gradient_check_at(
            &inst.params,
            &inst.data,
            &inst.cfg,
            &inst.batch,
            &inst.draws,
            1e-4,
            1e-4,
            Some(1.0),
        )
        .unwrap();
        assert!(!r.non_smooth);
        assert!(r.max_rel_error <= 1e-7, "{r:?}");
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn split_thresholds_and_reproducibility() {
    let (source, _) = InteractionGraph::new(
        Domain::Source,
        2,
        5,
        vec![(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (1, 3)],
    )
    .unwrap();
    let (target, _) = InteractionGraph::new(
        Domain::Target,
        2,
        5,
        vec![(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2)],
    )
    .unwrap();
    let split = split_leave_one_out(&source, &target, 3).unwrap();
    assert_eq!(split.excluded, 1);
    assert_eq!(split.validation.len(), 1);
    assert_eq!(split.test.len(), 1);
    assert_eq!(split.validation[0].user, 0);
    assert_ne!(split.validation[0].item, split.test[0].item);
    let user0 = split.target_train.edges.iter().filter(|e| e.0 == 0).count();
    let user1 = split.target_train.edges.iter().filter(|e| e.0 == 1).count();
    assert_eq!((user0, user1), (2, 3));
    assert_eq!(split, split_leave_one_out(&source, &target, 3).unwrap());
}

#[test]
fn noise_injection_counts() {
    let users = 50;
    let items = 200;
    let edges: Vec<(usize, usize)> = (0..1000).map(|n| (n % users, n / users)).collect();
    let (graph, dups) = InteractionGraph::new(Domain::Source, users, items, edges).unwrap();
    assert_eq!(dups, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(inject_source_noise(&graph, 0.0, &mut rng).unwrap(), graph);

    let noisy = inject_source_noise(&graph, 0.1, &mut rng).unwrap();
    assert_eq!(noisy.edges.len(), 1100);
    assert_eq!(&noisy.edges[..1000], &graph.edges[..]);
    let distinct: HashSet<_> = noisy.edges.iter().collect();
    assert_eq!(distinct.len(), 1100);
    assert!(inject_source_noise(&graph, 1.5, &mut rng).is_err());
}

#[test]
fn zero_epochs_return_initial_parameters() {
    let exp = small_experiment(2);
    let cfg = TrainConfig {
        max_epochs: 0,
        ..small_config(2)
    };
    let data = exp.training_data(&cfg).unwrap();
    let out = fit(&cfg, &data, &exp.split.validation, |_| {}).unwrap();
    assert_eq!(out.best, init_parameters(&data, &cfg));
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.log.len(), 1);
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let exp = small_experiment(4);
    let cfg = small_config(4);
    let data = exp.training_data(&cfg).unwrap();
    let trajectory = || -> Vec<EpochRecord> { fit(&cfg, &data, &exp.split.validation, |_| {}).unwrap().log };
    let (a, b) = (trajectory(), trajectory());
    assert_eq!(a.len(), cfg.max_epochs + 1);
    assert_eq!(a, b);
}

#[test]
fn no_kl_reports_the_bound_without_optimizing_it() {
    let exp = small_experiment(6);
    let cfg = Variant::NoKl.apply(&small_config(6));
    let data = exp.training_data(&cfg).unwrap();
    let out = fit(&cfg, &data, &exp.split.validation, |_| {}).unwrap();
    for record in &out.log[1..] {
        let l = record.losses.unwrap();
        assert_eq!(l.alphas.kl, 0.0);
        assert!(l.l_kl.is_finite() && l.l_kl != 0.0);
        let expect = l.l_pred_t + l.alphas.source_pred * l.l_pred_s + l.alphas.contrast * l.l_cl;
        assert!((l.total - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }
}

#[test]
fn full_variant_is_the_plain_pipeline() {
    let exp = small_experiment(8);
    let cfg = small_config(8);
    let a = run_ablation(Variant::Full, &cfg, &exp, &[10, 100]).unwrap();
    let b = run(&cfg, &exp, &[10, 100]).unwrap();
    assert_eq!(a.fit.best, b.fit.best);
    assert_eq!(a.test.per_user, b.test.per_user);
}

#[test]
fn ablations_change_only_their_switch() {
    let base = small_config(1);
    assert_eq!(Variant::NoPredS.apply(&base).alphas.source_pred, 0.0);
    assert_eq!(Variant::NoCl.apply(&base).alphas.contrast, 0.0);
    assert!(!Variant::NoKg.apply(&base).use_kg);
    let t = Variant::TargetOnly.apply(&base);
    assert!(t.target_only && !t.use_kg);
    let t = Variant::TargetOnlyKg.apply(&base);
    assert!(t.target_only && t.use_kg);
}

#[test]
fn every_variant_trains_and_evaluates() {
    let exp = small_experiment(10);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..small_config(10)
    };
    for v in Variant::ALL {
        let r = run_ablation(v, &cfg, &exp, &[10]).unwrap();
        assert_eq!(r.test.per_user.len(), exp.split.test.len());
        assert!(r.fit.best.is_finite(), "{v}");
    }
}

#[test]
fn thirty_epochs_improve_validation_ndcg() {
    let synth = generate_synthetic(&SynthSpec {
        seed: 7,
        ..SynthSpec::default()
    })
    .unwrap();
    let b = synth.bundle;
    let exp = Experiment::new(b.source, &b.target, b.kg, 7).unwrap();
    let cfg = TrainConfig {
        max_epochs: 30,
        patience: 0,
        seed: 7,
        ..TrainConfig::default()
    };
    let data = exp.training_data(&cfg).unwrap();
    let out = fit(&cfg, &data, &exp.split.validation, |_| {}).unwrap();
    let initial = out.log[0].val_ndcg100;
    let best = out.log.iter().map(|r| r.val_ndcg100).fold(f64::MIN, f64::max);
    assert!(best > initial, "initial {initial}, best {best}");
}
