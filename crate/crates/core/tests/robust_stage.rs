use gic_core::data::{gen_toy2d, LabeledDataset, Toy2dSpec};
use gic_core::erm::train_erm;
use gic_core::eval::evaluate_model;
use gic_core::invariant::{
    first_best_epoch, groupdro_update, subsample_balanced, train_robust, upsample_to_majority, GroupAssignment,
    RobustMethod, RobustTrainConfig,
};
use gic_core::nn::{FitConfig, SgdParams};
use gic_core::GicError;
use ndarray::Array2;

fn toy() -> (LabeledDataset, LabeledDataset, LabeledDataset) {
    gen_toy2d(&Toy2dSpec::default(), 0).unwrap()
}

fn oracle(d: &LabeledDataset) -> GroupAssignment {
    GroupAssignment::oracle(d.labels().unwrap(), d.spurious().unwrap(), 2, 2).unwrap()
}

fn group_sizes(d: &LabeledDataset) -> Vec<usize> {
    d.group_counts().unwrap()
}

#[test]
fn subsample_makes_every_group_the_minimum_size() {
    let (train, _, _) = toy();
    let before = group_sizes(&train);
    let out = subsample_balanced(&train, &oracle(&train), 0).unwrap();
    let min = *before.iter().min().unwrap();
    assert_eq!(group_sizes(&out), vec![min; 4]);
}

#[test]
fn upsample_makes_every_group_the_maximum_size_and_keeps_originals_first() {
    let (train, _, _) = toy();
    let max = *group_sizes(&train).iter().max().unwrap();
    let out = upsample_to_majority(&train, &oracle(&train), 0).unwrap();
    assert_eq!(group_sizes(&out), vec![max; 4]);
    assert_eq!(out.features().slice(ndarray::s![..train.len(), ..]), train.features());
}

#[test]
fn balancing_with_an_empty_group_names_it() {
    let x = Array2::zeros((4, 1));
    let d = LabeledDataset::new("d", x, Some(vec![0, 0, 1, 1]), Some(vec![0, 1, 0, 0])).unwrap();
    match subsample_balanced(&d, &oracle(&d), 0) {
        Err(GicError::Balancing(empty)) => assert_eq!(empty, vec![3]),
        other => panic!("expected a balancing error, got {other:?}"),
    }
}

#[test]
fn groupdro_weights_shift_toward_the_worst_group() {
    let mut q = vec![0.25; 4];
    for _ in 0..50 {
        q = groupdro_update(&q, &[0.1, 0.2, 0.9, 0.3], 0.1);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let worst = q.iter().cloned().fold(0.0, f64::max);
    assert_eq!(worst, q[2]);
    // A zero step size leaves the weights alone.
    assert_eq!(groupdro_update(&q, &[5.0, 0.0, 0.0, 0.0], 0.0), q);
}

#[test]
fn oracle_subsampling_beats_erm_on_worst_group() {
    let (train, val, test) = toy();
    let erm = train_erm(
        &train,
        &[2, 2],
        &FitConfig {
            epochs: 20,
            batch_size: Some(32),
            sgd: SgdParams::new(1e-2, 0.9, 1e-4),
        },
        0,
    )
    .unwrap();
    let cfg = RobustTrainConfig {
        epochs: 30,
        ..RobustTrainConfig::default()
    };
    let robust = train_robust(&train, &oracle(&train), &cfg, Some(&val)).unwrap();
    let (e, r) = (evaluate_model(&erm.model, &test).unwrap(), evaluate_model(&robust.model, &test).unwrap());
    assert!(r.worst > e.worst + 0.2, "robust {} vs erm {}", r.worst, e.worst);
}

#[test]
fn every_method_trains_on_toy_groups() {
    let (train, _, test) = toy();
    for method in [RobustMethod::Subsample, RobustMethod::Upsample, RobustMethod::GroupDro, RobustMethod::Mixup] {
        let cfg = RobustTrainConfig {
            method,
            epochs: if method == RobustMethod::GroupDro { 200 } else { 5 },
            sgd: SgdParams::new(if method == RobustMethod::GroupDro { 0.5 } else { 0.01 }, 0.9, 1e-4),
            ..RobustTrainConfig::default()
        };
        let out = train_robust(&train, &oracle(&train), &cfg, None).unwrap();
        assert!(out.model.is_finite());
        let acc = evaluate_model(&out.model, &test).unwrap();
        assert!(acc.worst > 0.6, "{method:?}: worst {}", acc.worst);
        if method == RobustMethod::GroupDro {
            assert_eq!(out.q_curve.len(), 200);
            assert_eq!(out.active_groups, vec![0, 1, 2, 3]);
        }
    }
}

#[test]
fn early_stopping_returns_the_first_best_snapshot() {
    let (train, val, _) = toy();
    let cfg = RobustTrainConfig {
        epochs: 8,
        early_stop: true,
        ..RobustTrainConfig::default()
    };
    let out = train_robust(&train, &oracle(&train), &cfg, Some(&val)).unwrap();
    assert_eq!(out.val_worst_curve.len(), 8);
    assert_eq!(Some(out.selected_epoch), first_best_epoch(&out.val_worst_curve));
    let w = evaluate_model(&out.model, &val).unwrap().worst;
    assert_eq!(w, out.val_worst_curve[out.selected_epoch - 1]);
}

#[test]
fn early_stopping_without_validation_groups_is_config_error() {
    let (train, val, _) = toy();
    let cfg = RobustTrainConfig {
        early_stop: true,
        ..RobustTrainConfig::default()
    };
    assert!(matches!(train_robust(&train, &oracle(&train), &cfg, None), Err(GicError::Config(_))));
    let unlabeled = LabeledDataset::new("v", val.features().clone(), val.labels().map(<[usize]>::to_vec), None).unwrap();
    assert!(matches!(train_robust(&train, &oracle(&train), &cfg, Some(&unlabeled)), Err(GicError::Config(_))));
}

#[test]
fn standardized_training_matches_raw_training_after_folding() {
    // The returned model always consumes raw features.
    let (train, _, test) = toy();
    let cfg = RobustTrainConfig {
        epochs: 3,
        ..RobustTrainConfig::default()
    };
    let out = train_robust(&train, &oracle(&train), &cfg, None).unwrap();
    assert_eq!(out.model.input_dim(), 2);
    assert!(evaluate_model(&out.model, &test).unwrap().average > 0.6);
}

#[test]
fn invalid_robust_settings_are_config_errors() {
    let (train, _, _) = toy();
    let bad = [
        RobustTrainConfig {
            batch_size: Some(0),
            ..RobustTrainConfig::default()
        },
        RobustTrainConfig {
            method: RobustMethod::GroupDro,
            groupdro_eta: 0.0,
            ..RobustTrainConfig::default()
        },
        RobustTrainConfig {
            method: RobustMethod::Mixup,
            mixup_alpha: -1.0,
            ..RobustTrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(train_robust(&train, &oracle(&train), &cfg, None), Err(GicError::Config(_))));
    }
}
