//! Property tests for the structural invariants that should hold for any
//! inputs, not just the hand-picked ones.

use proptest::prelude::*;

use nora_core::data::Dataset;
use nora_core::nora::{expand_groups, init_nora, merge, NoraConfig, NoraMode};
use nora_core::rational::{GroupedRationalLayer, RationalCoeffs};
use nora_core::tensor::{Tape, Tensor};
use nora_core::util::rng::seeded;

fn coeff_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The safe denominator never dips below one, for any coefficients and
    /// any finite input.
    #[test]
    fn denominator_is_at_least_one(
        a in coeff_vec(6),
        b in coeff_vec(5),
        x in -8.0f64..8.0,
    ) {
        let coeffs = RationalCoeffs::new(a, b).unwrap();
        prop_assert!(coeffs.denominator_value(x) >= 1.0);
    }

    /// Two equal scalar inputs on channels of the same group produce equal
    /// outputs, wherever they sit inside the group's block.
    #[test]
    fn group_shared_purity(
        a in coeff_vec(4),
        b in coeff_vec(3),
        value in -4.0f64..4.0,
        groups in 1usize..4,
    ) {
        let channels = groups * 3;
        let coeffs = RationalCoeffs::new(a, b).unwrap();
        let layer = GroupedRationalLayer::new_shared(coeffs, groups, channels).unwrap();
        let x = Tensor::new(vec![1, channels], vec![value; channels]).unwrap();
        let y = layer.eval(&x).unwrap();
        for g in 0..groups {
            let block = &y.data()[g * 3..(g + 1) * 3];
            prop_assert_eq!(block[0].to_bits(), block[1].to_bits());
            prop_assert_eq!(block[1].to_bits(), block[2].to_bits());
        }
    }

    /// Zero-initialized adapters evaluate bit-identically to the base layer.
    #[test]
    fn zero_init_identity(
        a in coeff_vec(6),
        b in coeff_vec(5),
        rank in 1usize..4,
        seed in 0u64..1000,
        xs in prop::collection::vec(-4.0f64..4.0, 8),
    ) {
        let coeffs = RationalCoeffs::new(a, b).unwrap();
        let base = GroupedRationalLayer::new_shared(coeffs, 2, 8).unwrap();
        let mut adapted = base.clone();
        let mut rng = seeded(seed);
        init_nora(&mut adapted, NoraConfig { rank, mode: NoraMode::Both }, &mut rng).unwrap();
        let x = Tensor::new(vec![1, 8], xs).unwrap();
        let ya = base.eval(&x).unwrap();
        let yb = adapted.eval(&x).unwrap();
        for (p, q) in ya.data().iter().zip(yb.data()) {
            prop_assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    /// Merging folds deltas exactly: outputs agree within 1e-12 everywhere
    /// on the probe grid, and merged layers hold no trainable state.
    #[test]
    fn merge_equivalence(
        a in coeff_vec(6),
        b in coeff_vec(5),
        delta_scale in -0.5f64..0.5,
        seed in 0u64..1000,
    ) {
        let coeffs = RationalCoeffs::new(a, b).unwrap();
        let mut layer = GroupedRationalLayer::new_shared(coeffs, 2, 4).unwrap();
        let mut rng = seeded(seed);
        init_nora(&mut layer, NoraConfig { rank: 2, mode: NoraMode::Both }, &mut rng).unwrap();
        layer.for_each_param("act", &mut |name, data, _, _, _| {
            if name.ends_with("_B") {
                for (i, v) in data.iter_mut().enumerate() {
                    *v = delta_scale * (1.0 + i as f64 * 0.25);
                }
            }
        });
        let grid: Vec<f64> = (0..1000).map(|i| -4.0 + i as f64 * 8.0 / 999.0).collect();
        let x = Tensor::new(vec![250, 4], grid).unwrap();
        let before = layer.eval(&x).unwrap();
        let mut merged = layer.clone();
        merge(&mut merged).unwrap();
        let after = merged.eval(&x).unwrap();
        for (p, q) in before.data().iter().zip(after.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        prop_assert_eq!(nora_core::nora::layer_trainable_params(&merged), 0);
    }

    /// Expansion by replication never changes the computed function.
    #[test]
    fn expansion_is_output_invariant(
        a in coeff_vec(3),
        b in coeff_vec(2),
        factor in 1usize..4,
        xs in prop::collection::vec(-4.0f64..4.0, 12),
    ) {
        let coeffs = RationalCoeffs::new(a, b).unwrap();
        let layer = GroupedRationalLayer::new_shared(coeffs, 2, 12).unwrap();
        let expanded = expand_groups(&layer, 2 * factor).unwrap();
        let x = Tensor::new(vec![1, 12], xs).unwrap();
        let ya = layer.eval(&x).unwrap();
        let yb = expanded.eval(&x).unwrap();
        for (p, q) in ya.data().iter().zip(yb.data()) {
            prop_assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    /// Dataset files round-trip exactly.
    #[test]
    fn dataset_file_round_trip(
        rows in 1usize..20,
        dim in 1usize..6,
        seed in 0u64..500,
    ) {
        let mut rng = seeded(seed);
        let features: Vec<f64> = (0..rows * dim)
            .map(|_| nora_core::util::rng::normal(&mut rng, 0.0, 2.0))
            .collect();
        let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
        let ds = Dataset::new(
            Tensor::new(vec![rows, dim], features).unwrap(),
            labels,
            3,
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.nra");
        ds.write_file(&path).unwrap();
        let back = Dataset::read_file(&path).unwrap();
        prop_assert_eq!(ds, back);
    }

    /// Tape ops never mutate their inputs' buffers.
    #[test]
    fn tape_ops_leave_inputs_untouched(
        xs in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let t = Tensor::new(vec![2, 3], xs.clone()).unwrap().requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.input(&t);
        let a = tape.tanh(v).unwrap();
        let b = tape.abs(a).unwrap();
        let c = tape.softmax(b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        prop_assert_eq!(tape.value(v).data(), &xs[..]);
        prop_assert_eq!(t.data(), &xs[..]);
    }
}
