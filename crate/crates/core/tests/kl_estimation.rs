use gic_core::data::{gen_toy2d, Toy2dSpec};
use gic_core::kl::*;
use gic_core::rng;
use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(n: usize, mu: f64, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "gauss");
    Array2::from_shape_simple_fn((n, 1), || mu + r.sample::<f64, _>(StandardNormal))
}

#[test]
fn mine_recovers_unit_gaussian_shift() {
    let truth = kl_gaussian(0.0, 1.0, 1.0, 1.0).unwrap();
    for seed in 0..5 {
        let p = gaussian(4000, 0.0, 100 + seed);
        let q = gaussian(4000, 1.0, 200 + seed);
        let mut est = MineEstimator::new(1, &MineConfig::default(), &mut rng::stream(seed, "mine")).unwrap();
        let v = mine_estimate(&mut est, &p, &q, 500).unwrap().value;
        println!("seed {seed}: estimate {v:.4} (true {truth})");
        assert!((0.35..=0.55).contains(&v), "seed {seed}: {v}");
    }
}

fn categorical(probs: &[f64], n: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
    let mut r = rng::stream(seed, "cat");
    let mut x = Array2::zeros((n, probs.len()));
    let mut freq = vec![0.0; probs.len()];
    for i in 0..n {
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut k = probs.len() - 1;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                k = j;
                break;
            }
        }
        x[[i, k]] = 1.0;
        freq[k] += 1.0 / n as f64;
    }
    (x, freq)
}

#[test]
fn mine_matches_discrete_kl_on_one_hot_symbols() {
    let (p, fp) = categorical(&[0.4, 0.3, 0.2, 0.1], 4000, 1);
    let (q, fq) = categorical(&[0.1, 0.2, 0.3, 0.4], 4000, 2);
    // The empirical distributions are what the estimator sees.
    let truth = kl_discrete(&fp, &fq).unwrap();
    let mut est = MineEstimator::new(4, &MineConfig::default(), &mut rng::stream(3, "mine")).unwrap();
    let v = mine_estimate(&mut est, &p, &q, 500).unwrap().value;
    println!("discrete: estimate {v:.4}, exact {truth:.4}");
    assert!((v - truth).abs() <= 0.05, "{v} vs {truth}");
}

#[test]
fn oracle_spurious_labeler_on_toy_data_tracks_exact_conditional_kl() {
    let (tr, val, _) = gen_toy2d(&Toy2dSpec::default(), 0).unwrap();
    let (ytr, atr) = (tr.labels().unwrap(), tr.spurious().unwrap());
    let (yc, ac) = (val.labels().unwrap(), val.spurious().unwrap());
    let exact = kl_conditional_discrete(
        &DiscreteJoint::from_labels(ytr, atr, 2, 2).unwrap(),
        &DiscreteJoint::from_labels(yc, ac, 2, 2).unwrap(),
    )
    .unwrap();
    let (ptr, pc) = (onehot(atr, 2).unwrap(), onehot(ac, 2).unwrap());
    let inputs = TermInputs {
        num_classes: 2,
        y_tr: ytr,
        probs_tr: &ptr,
        z_tr: tr.features(),
        y_c: Some(yc),
        probs_c: &pc,
        z_c: val.features(),
    };
    let cfg = MineConfig::default();
    let mut ej = MineEstimator::new(4, &cfg, &mut rng::stream(0, "j")).unwrap();
    let mut em = MineEstimator::new(2, &cfg, &mut rng::stream(0, "m")).unwrap();
    let term = spurious_term(TermMode::Labeled, &inputs, &mut ej, &mut em, 1000).unwrap();
    println!("toy oracle: estimate {:.4}, exact {:.4}", term.value, exact.direct);
    assert!(exact.direct > 1.0);
    assert!((term.value - exact.direct).abs() <= 0.2 * exact.direct, "{} vs {}", term.value, exact.direct);
}

#[test]
fn identical_inputs_give_near_zero_spurious_term() {
    let probs = array![[0.7, 0.3], [0.2, 0.8], [0.5, 0.5], [0.9, 0.1]];
    let y = [0, 1, 0, 1];
    let z = Array2::zeros((4, 1));
    let inputs = TermInputs {
        num_classes: 2,
        y_tr: &y,
        probs_tr: &probs,
        z_tr: &z,
        y_c: Some(&y),
        probs_c: &probs,
        z_c: &z,
    };
    let cfg = MineConfig::default();
    let mut ej = MineEstimator::new(4, &cfg, &mut rng::stream(0, "j")).unwrap();
    let mut em = MineEstimator::new(2, &cfg, &mut rng::stream(0, "m")).unwrap();
    let term = spurious_term(TermMode::Labeled, &inputs, &mut ej, &mut em, 200).unwrap();
    assert!(term.value.abs() < 1e-2, "{}", term.value);
}

#[test]
fn labeled_mode_without_comparison_labels_is_config_error() {
    let probs = array![[0.5, 0.5]];
    let inputs = TermInputs {
        num_classes: 2,
        y_tr: &[0],
        probs_tr: &probs,
        z_tr: &probs,
        y_c: None,
        probs_c: &probs,
        z_c: &probs,
    };
    let cfg = MineConfig::default();
    let mut ej = MineEstimator::new(4, &cfg, &mut rng::stream(0, "j")).unwrap();
    let mut em = MineEstimator::new(2, &cfg, &mut rng::stream(0, "m")).unwrap();
    assert!(matches!(
        spurious_term(TermMode::Labeled, &inputs, &mut ej, &mut em, 1),
        Err(gic_core::GicError::Config(_))
    ));
}
