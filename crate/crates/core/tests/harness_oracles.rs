//! Checks the reference network, its scoring surrogate, and budget sweeps
//! against naive nested-loop re-implementations.

use std::collections::BTreeMap;

use bitstack_core::avd::WeightId;
use bitstack_core::harness::{
    budget_sweep, build_calibration, build_network, decompose_model, evaluator_for,
    linspace_budgets, seeded_calibration, surrogate_score, ReferenceNetwork,
};
use bitstack_core::linalg::DenseMatrix;
use bitstack_core::loader::{load_model, resolve_budget};
use bitstack_core::stack::{sort_average, Evaluator};
use bitstack_core::{NetShape, RunParams};

/// The network's forward pass, redone with nested `Vec`s and explicit loops:
/// per layer, the stream passes through every map (multiply, then tanh), and
/// from the second layer on the transformed stream is added back onto the
/// incoming one.
fn naive_forward(
    shape: &NetShape,
    weights: &BTreeMap<WeightId, DenseMatrix>,
    x: &DenseMatrix,
) -> Vec<Vec<f64>> {
    let mut stream: Vec<Vec<f64>> = (0..x.rows())
        .map(|i| (0..x.cols()).map(|j| x.get(i, j)).collect())
        .collect();
    for layer in 1..=shape.layers {
        let mut t = stream.clone();
        for map in 1..=shape.maps_per_layer {
            let w = &weights[&WeightId::new(layer, format!("lin{map}"))];
            t = t
                .iter()
                .map(|row| {
                    (0..shape.hidden)
                        .map(|j| {
                            let mut sum = 0.0;
                            for (l, value) in row.iter().enumerate() {
                                sum += value * w.get(l, j);
                            }
                            sum.tanh()
                        })
                        .collect()
                })
                .collect();
        }
        if layer == 1 {
            stream = t;
        } else {
            for (kept, transformed) in stream.iter_mut().zip(&t) {
                for (a, b) in kept.iter_mut().zip(transformed) {
                    *a += *b;
                }
            }
        }
    }
    stream
}

/// Same traversal, but recording the batch that flows *into* every map.
fn naive_map_inputs(
    shape: &NetShape,
    weights: &BTreeMap<WeightId, DenseMatrix>,
    x: &DenseMatrix,
) -> BTreeMap<WeightId, Vec<Vec<f64>>> {
    let mut inputs = BTreeMap::new();
    let mut stream: Vec<Vec<f64>> = (0..x.rows())
        .map(|i| (0..x.cols()).map(|j| x.get(i, j)).collect())
        .collect();
    for layer in 1..=shape.layers {
        let mut t = stream.clone();
        for map in 1..=shape.maps_per_layer {
            let id = WeightId::new(layer, format!("lin{map}"));
            inputs.insert(id.clone(), t.clone());
            let w = &weights[&id];
            t = t
                .iter()
                .map(|row| {
                    (0..shape.hidden)
                        .map(|j| {
                            let mut sum = 0.0;
                            for (l, value) in row.iter().enumerate() {
                                sum += value * w.get(l, j);
                            }
                            sum.tanh()
                        })
                        .collect()
                })
                .collect();
        }
        if layer == 1 {
            stream = t;
        } else {
            for (kept, transformed) in stream.iter_mut().zip(&t) {
                for (a, b) in kept.iter_mut().zip(transformed) {
                    *a += *b;
                }
            }
        }
    }
    inputs
}

fn assert_matches(got: &DenseMatrix, want: &[Vec<f64>], tol: f64, what: &str) {
    assert_eq!(got.rows(), want.len(), "{what}: row count");
    for i in 0..got.rows() {
        for j in 0..got.cols() {
            assert!(
                (got.get(i, j) - want[i][j]).abs() <= tol,
                "{what}: entry ({i},{j}) {} vs {}",
                got.get(i, j),
                want[i][j]
            );
        }
    }
}

#[test]
fn forward_matches_naive_nested_loop_oracle() {
    let shape = NetShape {
        layers: 4,
        maps_per_layer: 2,
        hidden: 16,
    };
    let net = ReferenceNetwork::seeded(shape, 31);
    let x = seeded_calibration(31, 8, 16);

    let got = net.forward(&x).expect("conformable input");
    let want = naive_forward(&shape, net.weights(), &x);
    assert_matches(&got, &want, 1e-12, "forward");
}

#[test]
fn activations_match_instrumented_oracle() {
    let shape = NetShape {
        layers: 3,
        maps_per_layer: 2,
        hidden: 12,
    };
    let net = ReferenceNetwork::seeded(shape, 31);
    let x = seeded_calibration(31, 10, 12);

    let got = net.collect_activations(&x).expect("conformable input");
    let want = naive_map_inputs(&shape, net.weights(), &x);
    assert_eq!(
        got.keys().collect::<Vec<_>>(),
        want.keys().collect::<Vec<_>>(),
        "every map must be instrumented"
    );
    for (id, batch) in &want {
        assert_matches(&got[id], batch, 1e-12, &format!("activations of {id}"));
    }
}

#[test]
fn perturbed_network_score_matches_two_pass_oracle() {
    let shape = NetShape {
        layers: 2,
        maps_per_layer: 2,
        hidden: 8,
    };
    let original = ReferenceNetwork::seeded(shape, 37);
    let calib = seeded_calibration(37, 24, 8);

    // Nudge a single weight and rebuild the network around it.
    let perturbed_id = WeightId::new(2, "lin1");
    let mut weights = original.weights().clone();
    let w = &weights[&perturbed_id];
    let nudged = DenseMatrix::from_fn(w.rows(), w.cols(), |i, j| {
        w.get(i, j) + if (i + j) % 3 == 0 { 0.01 } else { 0.0 }
    });
    weights.insert(perturbed_id, nudged);
    let compressed = ReferenceNetwork::from_weights(shape, weights).expect("consistent weights");

    let got = surrogate_score(&original, &compressed, &calib).expect("same architecture");

    // Oracle: two naive forward passes and an explicit mean of squares.
    let a = naive_forward(&shape, original.weights(), &calib);
    let b = naive_forward(&shape, compressed.weights(), &calib);
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(&b) {
        for (va, vb) in ra.iter().zip(rb) {
            total += (va - vb) * (va - vb);
        }
    }
    let want = total / (calib.rows() * calib.cols()) as f64;
    assert!(
        (got - want).abs() <= 1e-12,
        "score {got} vs two-pass oracle {want}"
    );
    assert!(got > 0.0, "a perturbed network must score worse than zero");
}

#[test]
fn fifty_point_sweep_matches_fresh_resolution_oracle() {
    let params = RunParams {
        seed: 29,
        n_iters: 8,
        k: 2,
        net: NetShape {
            layers: 2,
            maps_per_layer: 2,
            hidden: 16,
        },
        calib_rows: 64,
        sort_rows: 16,
        ..RunParams::default()
    };
    let net = build_network(&params).expect("valid config");
    let calibration = build_calibration(&params).expect("valid config");
    let mut artifacts = decompose_model(&net, &calibration, &params).expect("decomposition");
    let evaluator = evaluator_for(&artifacts, 16).expect("rows fit");
    let universal = sort_average(&artifacts.stacks, &evaluator).expect("evaluation succeeds");
    artifacts.order = Some(universal);

    let budgets = linspace_budgets(0, artifacts.total_block_bytes(), 50);
    let rows = budget_sweep(&artifacts, &evaluator, &budgets).expect("sweep succeeds");
    assert_eq!(rows.len(), 50);

    // Oracle: resolve and materialize every budget from scratch.
    let universal = artifacts.order.as_ref().unwrap();
    let bits = artifacts.block_bits_along(&universal.order);
    for (row, &budget) in rows.iter().zip(&budgets) {
        let plan = resolve_budget(universal, &bits, budget);
        let fresh = load_model(&artifacts, &plan).expect("plan fits artifacts");
        let want = evaluator.score(fresh.weights()).expect("evaluation succeeds");

        assert_eq!(row.budget_bytes, budget);
        assert_eq!(row.loaded_bytes, plan.total_bytes, "budget {budget}");
        assert_eq!(row.prefix_len, plan.prefix_len, "budget {budget}");
        assert_eq!(row.degenerate, plan.degenerate, "budget {budget}");
        assert!(
            (row.score - want).abs() <= 1e-9,
            "budget {budget}: incremental score {} vs fresh {want}",
            row.score
        );
    }
}
