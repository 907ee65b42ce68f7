//! Fuzzed identities and inequalities of the exact discrete KL quantities.

use gic_core::kl::{cross_entropy_dist, entropy, kl_conditional_discrete, kl_discrete, mutual_information, DiscreteJoint};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn normalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn table(dims: (usize, usize), cells: &[f64]) -> DiscreteJoint {
    DiscreteJoint::new(Array2::from_shape_vec(dims, cells[..dims.0 * dims.1].to_vec()).unwrap()).unwrap()
}

/// Two positive tables of the same random shape.
fn table_pair() -> impl Strategy<Value = (DiscreteJoint, DiscreteJoint)> {
    (2usize..6, 2usize..6).prop_flat_map(|(r, c)| {
        let cells = prop::collection::vec(1e-3f64..1.0, r * c);
        (cells.clone(), cells).prop_map(move |(a, b)| (table((r, c), &a), table((r, c), &b)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_identical_inputs(a in prop::collection::vec(1e-3f64..1.0, 2..8), seed in 0u64..1000) {
        let p = normalize(&a);
        let q = normalize(&a.iter().enumerate().map(|(i, v)| v * (1.0 + ((i as u64 * 31 + seed) % 7) as f64)).collect::<Vec<_>>());
        prop_assert!(kl_discrete(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_discrete(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_vanishes_only_on_equal_distributions(a in prop::collection::vec(1e-3f64..1.0, 2..8), b in prop::collection::vec(1e-3f64..1.0, 8)) {
        let p = normalize(&a);
        let q = normalize(&b[..a.len()]);
        let kl = kl_discrete(&p, &q).unwrap();
        let max_diff = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // Pinsker: KL >= 2 TV^2 >= max_diff^2 / 2.
        prop_assert!(kl >= max_diff * max_diff / 2.0 - 1e-15);
    }

    #[test]
    fn conditional_kl_equals_joint_minus_marginal((p, q) in table_pair()) {
        let c = kl_conditional_discrete(&p, &q).unwrap();
        prop_assert!((c.direct - c.decomposed).abs() <= 1e-12, "direct {} decomposed {}", c.direct, c.decomposed);
    }

    #[test]
    fn mutual_information_dominates_entropy_minus_cross_entropy(n in 2usize..6, cells in prop::collection::vec(0.0f64..1.0, 36)) {
        prop_assume!(cells[..n * n].iter().sum::<f64>() > 1e-3);
        let joint = table((n, n), &cells);
        let y = joint.row_marginal().unwrap().to_vec();
        let y_hat = joint.column_marginal().unwrap().to_vec();
        prop_assume!(y_hat.iter().all(|&v| v > 0.0));
        let mi = mutual_information(&joint).unwrap();
        let bound = entropy(&y).unwrap() - cross_entropy_dist(&y, &y_hat).unwrap();
        prop_assert!(mi >= bound - 1e-12, "I = {mi}, bound = {bound}");
    }
}

/// Fork-structured pair of distributions over `(y, y_hat, z)`.
///
/// Training: `P(z) P(y | z) P(y_hat | z)`. Comparison: the training joint
/// reweighted by `a(y) b(y_hat)`, which keeps `y` and `y_hat` conditionally
/// independent given `z` and leaves `P(z | y, y_hat)` unchanged.
fn fork_pair(ny: usize, nz: usize, w: &[f64]) -> (Array3<f64>, Array3<f64>) {
    let mut it = w.iter().copied();
    let mut next = || it.next().unwrap();
    let pz = normalize(&(0..nz).map(|_| next()).collect::<Vec<_>>());
    let y_given_z: Vec<Vec<f64>> = (0..nz).map(|_| normalize(&(0..ny).map(|_| next()).collect::<Vec<_>>())).collect();
    let s_given_z: Vec<Vec<f64>> = (0..nz).map(|_| normalize(&(0..ny).map(|_| next()).collect::<Vec<_>>())).collect();
    let a: Vec<f64> = (0..ny).map(|_| next()).collect();
    let b: Vec<f64> = (0..ny).map(|_| next()).collect();
    let tr = Array3::from_shape_fn((ny, ny, nz), |(y, s, z)| pz[z] * y_given_z[z][y] * s_given_z[z][s]);
    let mut c = Array3::from_shape_fn((ny, ny, nz), |(y, s, z)| tr[[y, s, z]] * a[y] * b[s]);
    c /= c.sum();
    (tr, c)
}

fn marginal_with_s(t: &Array3<f64>, keep_y: bool) -> DiscreteJoint {
    let (ny, ns, nz) = t.dim();
    let rows = if keep_y { ny } else { nz };
    let mut m = Array2::zeros((rows, ns));
    for ((y, s, z), &v) in t.indexed_iter() {
        m[[if keep_y { y } else { z }, s]] += v;
    }
    DiscreteJoint::new(m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn label_conditional_kl_bounds_representation_conditional_kl(
        ny in 2usize..4,
        nz in 2usize..6,
        w in prop::collection::vec(0.05f64..1.0, 64),
    ) {
        let (tr, c) = fork_pair(ny, nz, &w);
        // Property of the construction: P(z | y, y_hat) agrees across the two sets.
        for y in 0..ny {
            for s in 0..ny {
                let (ntr, nc) = ((0..nz).map(|z| tr[[y, s, z]]).sum::<f64>(), (0..nz).map(|z| c[[y, s, z]]).sum::<f64>());
                for z in 0..nz {
                    prop_assert!((tr[[y, s, z]] / ntr - c[[y, s, z]] / nc).abs() < 1e-12);
                }
            }
        }
        let ky = kl_conditional_discrete(&marginal_with_s(&tr, true), &marginal_with_s(&c, true)).unwrap().direct;
        let kz = kl_conditional_discrete(&marginal_with_s(&tr, false), &marginal_with_s(&c, false)).unwrap().direct;
        prop_assert!(ky >= kz - 1e-12, "KL(y | s) = {ky} < KL(z | s) = {kz}");
    }
}
