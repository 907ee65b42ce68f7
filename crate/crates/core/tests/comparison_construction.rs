use gic_core::comparison::{build_comparison_from_train, build_comparison_rounds, readjust_comparison, ComparisonPlan};
use gic_core::data::{gen_synth_spurious, LabeledDataset, SynthSpuriousSpec};
use gic_core::erm::{train_erm, ErmArtifacts};
use gic_core::gic::GicConfig;
use gic_core::invariant::GroupAssignment;
use gic_core::nn::{FitConfig, SgdParams};

/// Fraction of rows in the two training-minority groups `(0, 0)` and `(1, 1)`.
fn minority_fraction(d: &LabeledDataset) -> f64 {
    let c = d.group_counts().unwrap();
    (c[0] + c[3]) as f64 / d.len() as f64
}

fn cmnist_train() -> (LabeledDataset, ErmArtifacts) {
    let s = gen_synth_spurious(&SynthSpuriousSpec::cmnist(), 0).unwrap();
    let train = s.train.data;
    let erm = train_erm(
        &train,
        &[train.dim(), 2],
        &FitConfig {
            epochs: 2,
            batch_size: Some(64),
            sgd: SgdParams::new(1e-2, 0.9, 1e-4),
        },
        0,
    )
    .unwrap();
    (train, erm)
}

#[test]
fn one_percent_of_the_colored_digit_train_set() {
    let (train, erm) = cmnist_train();
    assert_eq!(train.len(), 30000);
    let split = build_comparison_from_train(&train, &erm.model, 0.01, 0).unwrap();
    assert_eq!(split.comparison.len(), 600);
    assert_eq!(split.remaining.len(), 29400);
    // The ERM error set is rich in minority rows, so the comparison set is too.
    assert!(minority_fraction(&split.comparison) > minority_fraction(&train) + 0.1);
}

#[test]
fn boosting_rounds_keep_sizes_and_enrich_minorities() {
    let (train, erm) = cmnist_train();
    let plan = ComparisonPlan {
        boosting_rounds: 2,
        ..ComparisonPlan::default()
    };
    // On a comparison set drawn from train the discrepancy is mild; the head
    // needs a larger step to separate the colors within 20 epochs.
    let gic = GicConfig {
        lr: 2.0,
        ..GicConfig::default()
    };
    let rounds = build_comparison_rounds(&train, &train, &erm.model, &plan, &gic).unwrap();
    assert_eq!(rounds.len(), 3);
    for r in &rounds {
        assert_eq!(r.comparison.len(), 600);
        assert_eq!(r.remaining.len(), 29400);
    }
    let fracs: Vec<f64> = rounds.iter().map(|r| minority_fraction(&r.comparison)).collect();
    assert!(fracs[0] > minority_fraction(&train));
    assert!(fracs[2] > fracs[0], "{fracs:?}");

    let unlabeled = ComparisonPlan {
        labeled: false,
        boosting_rounds: 1,
        ..ComparisonPlan::default()
    };
    let cfg = GicConfig {
        mode: gic_core::kl::TermMode::Unlabeled,
        ..GicConfig::default()
    };
    assert_eq!(build_comparison_rounds(&train, &train, &erm.model, &unlabeled, &cfg).unwrap().len(), 2);
}

#[test]
fn mismatched_raw_and_representation_rows_are_rejected() {
    let (train, erm) = cmnist_train();
    let short = train.subset(&[0, 1, 2]).unwrap();
    let err = build_comparison_rounds(&train, &short, &erm.model, &ComparisonPlan::default(), &GicConfig::default());
    assert!(matches!(err, Err(gic_core::GicError::Shape(_))));
}

#[test]
fn readjusting_the_surrogate_comparison_lifts_its_two_smallest_groups() {
    let mut spec = SynthSpuriousSpec::cmnist();
    spec.group_fractions[1] = vec![0.4, 0.3, 0.2, 0.1];
    spec.n = [100, 1000, 100];
    let c = gen_synth_spurious(&spec, 1).unwrap().comparison.data;
    let groups = GroupAssignment::oracle(c.labels().unwrap(), c.spurious().unwrap(), 2, 2).unwrap();
    let out = readjust_comparison(&c, &groups, 0).unwrap();
    assert_eq!(c.group_counts().unwrap(), vec![400, 300, 200, 100]);
    assert_eq!(out.group_counts().unwrap(), vec![400, 300, 300, 300]);
}
