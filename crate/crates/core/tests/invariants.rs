//! Property tests for the numerical invariants the library promises.

mod common;

use bitstack_core::avd::{decompose_weight, reconstruct, WeightId};
use bitstack_core::linalg::{svd, DenseMatrix};
use bitstack_core::loader::resolve_budget;
use bitstack_core::precision::Precision;
use bitstack_core::scaling::{apply_scaling, compute_scaling, scaled_product};
use bitstack_core::signpack::{pack, sign_split, unpack};
use bitstack_core::stack::{BlockRef, SortStrategy, UniversalStack};
use common::{max_abs_diff, naive_frobenius, naive_product};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize, span: f64) -> impl Strategy<Value = DenseMatrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-span..span, r * c)
            .prop_map(move |data| DenseMatrix::from_fn(r, c, |i, j| data[i * c + j]))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Singular values descend and stay nonnegative, both bases are
    /// orthonormal, and the three factors rebuild the input.
    #[test]
    fn svd_invariants_hold(m in matrix(8, 8, 3.0)) {
        let decomp = svd(&m).expect("random dense input converges");
        let d = m.rows().min(m.cols());
        prop_assert_eq!(decomp.sigma.len(), d);
        for pair in decomp.sigma.windows(2) {
            prop_assert!(pair[0] >= pair[1]);
        }
        for &s in &decomp.sigma {
            prop_assert!(s >= 0.0);
        }

        for basis in [&decomp.u, &decomp.v] {
            for i in 0..d {
                for j in 0..d {
                    let dot: f64 = (0..basis.rows())
                        .map(|r| basis.get(r, i) * basis.get(r, j))
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - want).abs() <= 1e-8,
                        "basis column dot ({i},{j}) = {dot}");
                }
            }
        }

        let rebuilt = DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| {
            (0..d).map(|l| decomp.u.get(i, l) * decomp.sigma[l] * decomp.v.get(j, l)).sum()
        });
        let rel = max_abs_diff(&m, &rebuilt) / naive_frobenius(&m).max(1.0);
        prop_assert!(rel <= 1e-6, "reconstruction off by {rel}");
    }

    /// Packing sign matrices into bits and back never loses a sign.
    #[test]
    fn packed_signs_round_trip(m in matrix(50, 50, 1.0)) {
        let (signs, _) = sign_split(&m);
        prop_assert_eq!(unpack(&pack(&signs)), signs);
    }

    /// Folding the scales into the weight and unfolding them at product
    /// time reproduces the plain product.
    #[test]
    fn scaling_fold_reproduces_plain_product(
        x in matrix(12, 8, 5.0),
        seed in 0u64..1_000,
    ) {
        let w = common::gaussian(x.cols(), 5, seed);
        let scales = compute_scaling(&x);
        let w_scaled = apply_scaling(&w, &scales).expect("matching dims");
        let plain = naive_product(&x, &w);
        let folded = scaled_product(&x, &scales, &w_scaled).expect("matching dims");
        let rel = max_abs_diff(&plain, &folded) / naive_frobenius(&plain).max(1e-6);
        prop_assert!(rel <= 1e-10, "fold drifted by {rel}");
    }

    /// Adding a residual block never makes the approximation worse, beyond
    /// rounding slack proportional to the storage precision.
    #[test]
    fn residual_norms_are_monotone(
        m in matrix(8, 8, 2.0),
        k in 1usize..=3,
        half in any::<bool>(),
    ) {
        let k = k.min(m.rows()).min(m.cols());
        let (precision, slack) = if half {
            (Precision::Half, 1e-3)
        } else {
            (Precision::Single, 1e-6)
        };
        let stack = decompose_weight(&m, WeightId::new(1, "w"), 4, k, precision)
            .expect("rank within bounds");
        let errors: Vec<f64> = (0..=4)
            .map(|level| {
                let prefix = reconstruct(&stack, level).expect("level in range");
                naive_frobenius(&DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| {
                    m.get(i, j) - prefix.get(i, j)
                }))
            })
            .collect();
        // Additive slack at the input's scale: rounding noise is absolute,
        // so near the error floor tiny upward jitter is legitimate.
        let budget = slack * naive_frobenius(&m) + 1e-12;
        for (level, pair) in errors.windows(2).enumerate() {
            prop_assert!(
                pair[1] <= pair[0] + budget,
                "level {} -> {}: {} -> {}", level, level + 1, pair[0], pair[1]
            );
        }
    }

    /// Resolved plans never overshoot the budget, are maximal, and report
    /// per-weight levels consistent with the prefix.
    #[test]
    fn budget_plans_are_safe_and_maximal(
        weights in 1usize..=5,
        iters in 1usize..=6,
        seed in 0u64..10_000,
        budget in 0u64..2_000_000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut order = Vec::new();
        let mut bits = Vec::new();
        for iteration in 1..=iters {
            for w in 0..weights {
                order.push(BlockRef {
                    weight: WeightId::new(1, format!("w{w}")),
                    iteration,
                });
                bits.push(rng.gen_range(8u64..100_000));
            }
        }
        let scores = vec![None; order.len()];
        let universal = UniversalStack { order, strategy: SortStrategy::Average, scores };

        let plan = resolve_budget(&universal, &bits, budget);
        prop_assert!(plan.total_bytes <= budget);
        if plan.prefix_len < universal.order.len() {
            prop_assert!(
                plan.total_bytes + bits[plan.prefix_len].div_ceil(8) > budget,
                "prefix is not maximal"
            );
        }
        let mut counts = std::collections::BTreeMap::new();
        for r in &universal.order {
            counts.entry(r.weight.clone()).or_insert(0usize);
        }
        for r in &universal.order[..plan.prefix_len] {
            *counts.get_mut(&r.weight).unwrap() += 1;
        }
        prop_assert_eq!(&plan.per_weight_level, &counts);
        prop_assert_eq!(plan.degenerate, counts.values().any(|&l| l == 0));
    }
}
