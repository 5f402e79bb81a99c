//! Property tests for engine and metric invariants.

use affectnet_core::autograd::Tape;
use affectnet_core::metrics::{accuracy, ccc, expr_macro_f1};
use affectnet_core::tensor::Tensor;
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_gradient_sums_over_expanded_axes(
        map in finite_vec(2 * 3 * 4 * 4),
        gate in proptest::collection::vec(0.05f64..2.0, 3),
    ) {
        // loss = sum(map * gate) with gate (1,C,1,1): d loss / d gate[c]
        // must equal the sum of map over batch and spatial axes.
        let t = Tape::new();
        let m = t.constant(Tensor::new(vec![2, 3, 4, 4], map.clone()).unwrap());
        let g = t.leaf(Tensor::new(vec![1, 3, 1, 1], gate).unwrap());
        let prod = t.mul(m, g).unwrap();
        let loss = t.sum(prod).unwrap();
        t.backward(loss).unwrap();
        let grad = t.grad(g).unwrap();
        for c in 0..3 {
            let mut expect = 0.0;
            for n in 0..2 {
                for p in 0..16 {
                    expect += map[n * 48 + c * 16 + p];
                }
            }
            prop_assert!((grad.data()[c] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn log_sum_exp_bounds(row in finite_vec(7)) {
        let t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 7], row.clone()).unwrap());
        let l = t.log_sum_exp(x).unwrap();
        let value = t.value(l).data()[0];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(value >= max - 1e-12);
        prop_assert!(value <= max + (7.0f64).ln() + 1e-12);
    }

    #[test]
    fn ccc_symmetry_and_range(x in finite_vec(20), y in finite_vec(20)) {
        let xy = ccc(&x, &y).unwrap();
        let yx = ccc(&y, &x).unwrap();
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&xy));
    }

    #[test]
    fn ccc_self_is_one_for_non_constant(x in finite_vec(20)) {
        let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - x.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        prop_assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ccc_joint_affine_invariance(
        x in finite_vec(16),
        y in finite_vec(16),
        a in 0.1f64..5.0,
        b in -3.0f64..3.0,
    ) {
        let base = ccc(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let ys: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let scaled = ccc(&xs, &ys).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9, "{base} vs {scaled}");
    }

    #[test]
    fn metrics_are_permutation_invariant(
        seed in 0u64..1000,
        pred in proptest::collection::vec(0usize..7, 30),
        truth in proptest::collection::vec(0usize..7, 30),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..30).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);

        let (f1, _) = expr_macro_f1(&pred, &truth).unwrap();
        let acc = accuracy(&pred, &truth).unwrap();
        let pred_p: Vec<usize> = order.iter().map(|&i| pred[i]).collect();
        let truth_p: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        let (f1_p, _) = expr_macro_f1(&pred_p, &truth_p).unwrap();
        let acc_p = accuracy(&pred_p, &truth_p).unwrap();
        prop_assert!((f1 - f1_p).abs() < 1e-12);
        prop_assert!((acc - acc_p).abs() < 1e-12);
    }

    #[test]
    fn ccc_is_permutation_invariant(
        seed in 0u64..1000,
        x in finite_vec(25),
        y in finite_vec(25),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..25).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let base = ccc(&x, &y).unwrap();
        let xp: Vec<f64> = order.iter().map(|&i| x[i]).collect();
        let yp: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        prop_assert!((base - ccc(&xp, &yp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn attention_gates_stay_in_open_unit_interval(
        seed in 0u64..500,
        scale in 0.1f64..2.0,
    ) {
        use affectnet_core::nn::SeBlock;
        use affectnet_core::params::ParamStore;
        use rand::SeedableRng;

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let se = SeBlock::new(&mut store, "se", 8, 4, &mut rng).unwrap();
        let t = Tape::new();
        let numel = 2 * 8 * 3 * 3;
        let data: Vec<f64> = (0..numel as u64)
            .map(|i| scale * ((i.wrapping_mul(2654435761) % 1000) as f64 / 500.0 - 1.0))
            .collect();
        let x = t.constant(Tensor::new(vec![2, 8, 3, 3], data).unwrap());
        let gate = se.gate(&t, &store, x).unwrap();
        let g = t.value(gate);
        prop_assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn permutation_null_ccc_is_near_zero() {
    // shuffled labels against predictions decorrelate: |ccc| within 0.05
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let n = 10_000;
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut y = x.clone();
    y.shuffle(&mut rng);
    let value = ccc(&x, &y).unwrap();
    assert!(value.abs() < 0.05, "shuffled ccc {value}");
}
