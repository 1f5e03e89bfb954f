use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tkgcn_core::gradcheck::{check_param_gradients, weighted_sum};
use tkgcn_core::mesh::{build_graph, synth_mesh, MeshGraph, MeshKind};
use tkgcn_core::spline_gcn::{basis_operator, bspline_basis, KernelSpec, Pointwise, SpatialBlock, SplineConv};
use tkgcn_core::{ParamStore, SparseOp, Tape, Tensor};

fn graph() -> MeshGraph {
    build_graph(&synth_mesh(MeshKind::Ellipsoid, 1).unwrap()).unwrap()
}

fn features(n: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, c], (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn run_conv(conv: &SplineConv, store: &ParamStore, basis: &Arc<SparseOp>, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = conv.forward(&mut tape, store, basis, xv, false).unwrap();
    tape.value(y).clone()
}

#[test]
fn partition_of_unity_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for kernel in [KernelSpec::default(), KernelSpec { degree: 1, size: [2, 4, 5] }] {
        for _ in 0..10_000 {
            let w = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let b = bspline_basis(w, &kernel).unwrap();
            assert!(b.len() <= 8);
            assert!((b.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(b.iter().all(|e| e.1 >= 0.0 && e.0 < kernel.basis_count()));
        }
    }
}

#[test]
fn hat_functions_interpolate_linearly() {
    // oracle: 1-D hat N_i(x) = max(0, 1 - |x(k-1) - i|), product over axes
    let kernel = KernelSpec { degree: 1, size: [3, 4, 5] };
    let hat = |x: f64, k: usize, i: usize| (1.0 - (x * (k - 1) as f64 - i as f64).abs()).max(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let w = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let mut dense = vec![0.0; kernel.basis_count()];
        for (p, v) in bspline_basis(w, &kernel).unwrap() {
            dense[p] += v;
        }
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    let expected = hat(w[0], 3, i) * hat(w[1], 4, j) * hat(w[2], 5, k);
                    assert!((dense[kernel.index([i, j, k])] - expected).abs() < 1e-14);
                }
            }
        }
    }
}

#[test]
fn equal_theta_collapses_to_neighbor_mean() {
    let g = graph();
    let n = g.node_count();
    let basis = Arc::new(basis_operator(&g, &KernelSpec::default()).unwrap());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let conv = SplineConv::new(&mut store, "c", 2, 3, KernelSpec::default(), false, &mut rng).unwrap();
    let bar = [0.3, -1.2, 0.7, 0.05, 2.0, -0.4];
    let theta: Vec<f64> = (0..27).flat_map(|_| bar).collect();
    store.insert("c.theta", Tensor::new(&[54, 3], theta).unwrap());
    let x = features(n, 2, 9);
    let y = run_conv(&conv, &store, &basis, &x);
    for i in 0..n {
        let nb = g.neighbors(i);
        for o in 0..3 {
            let mut expected = 0.0;
            for c in 0..2 {
                let mean = nb.iter().map(|&j| x.at(j, c)).sum::<f64>() / nb.len() as f64;
                expected += mean * bar[c * 3 + o];
            }
            assert!((y.at(i, o) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn equal_theta_ignores_neighbor_geometry() {
    // Scrambling pseudo-coordinates (by moving node positions) leaves the output unchanged.
    let g = graph();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let moved: Vec<[f64; 3]> = g
        .positions()
        .iter()
        .map(|p| [p[0] + rng.random_range(-0.1..0.1), p[1] * 1.3, p[2] - rng.random_range(-0.1..0.1)])
        .collect();
    let g2 = MeshGraph::from_edges(moved, &g.undirected_edges()).unwrap();
    let mut store = ParamStore::new();
    let conv = SplineConv::new(&mut store, "c", 2, 2, KernelSpec::default(), true, &mut rng).unwrap();
    let theta: Vec<f64> = (0..27).flat_map(|_| [0.9, -0.2, 0.1, 0.4]).collect();
    store.insert("c.theta", Tensor::new(&[54, 2], theta).unwrap());
    let x = features(g.node_count(), 2, 6);
    let a = run_conv(&conv, &store, &Arc::new(basis_operator(&g, &KernelSpec::default()).unwrap()), &x);
    let b = run_conv(&conv, &store, &Arc::new(basis_operator(&g2, &KernelSpec::default()).unwrap()), &x);
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn convolution_is_local() {
    let g = graph();
    let n = g.node_count();
    let basis = Arc::new(basis_operator(&g, &KernelSpec::default()).unwrap());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let conv = SplineConv::new(&mut store, "c", 2, 2, KernelSpec::default(), true, &mut rng).unwrap();
    let x = features(n, 2, 4);
    let base = run_conv(&conv, &store, &basis, &x);
    for j in [0, 7, n - 1] {
        let mut x2 = x.clone();
        x2.data_mut()[j * 2] += 1.0;
        let y = run_conv(&conv, &store, &basis, &x2);
        for i in 0..n {
            let changed = (0..2).any(|o| y.at(i, o) != base.at(i, o));
            let allowed = i == j || g.neighbors(i).contains(&j);
            assert!(!changed || allowed, "node {i} changed by {j}");
            if i == j {
                assert!(changed);
            }
        }
    }
}

#[test]
fn isolated_node_keeps_root_term() {
    let g = MeshGraph::from_edges(vec![[0.0; 3], [1.0, 0.0, 0.0], [5.0, 5.0, 5.0]], &[(0, 1)]).unwrap();
    let basis = Arc::new(basis_operator(&g, &KernelSpec::default()).unwrap());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = SplineConv::new(&mut store, "c", 1, 1, KernelSpec::default(), true, &mut rng).unwrap();
    store.insert("c.root", Tensor::scalar(2.0).reshaped(&[1, 1]).unwrap());
    let x = Tensor::new(&[3, 1], vec![1.0, 1.0, 3.0]).unwrap();
    let y = run_conv(&conv, &store, &basis, &x);
    assert_eq!(y.at(2, 0), 6.0);
}

#[test]
fn spatial_block_with_zero_conv_is_skip() {
    let g = graph();
    let basis = Arc::new(basis_operator(&g, &KernelSpec::default()).unwrap());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = SpatialBlock::new(&mut store, "b", 4, KernelSpec::default(), true, &mut rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let x = features(g.node_count(), 4, 1);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let y = block.forward(&mut tape, &store, &basis, xv, false).unwrap();
    assert_eq!(tape.value(y), &x);
    // gradient through the identity branch
    let l = tape.sum_sq(y).unwrap();
    let grads = tape.backward(l).unwrap();
    let gx = grads.get(xv).unwrap();
    for (g, v) in gx.data().iter().zip(x.data()) {
        assert!((g - 2.0 * v).abs() < 1e-12);
    }
}

#[test]
fn spatial_block_rejects_channel_mismatch() {
    let g = graph();
    let basis = Arc::new(basis_operator(&g, &KernelSpec::default()).unwrap());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = SpatialBlock::new(&mut store, "b", 4, KernelSpec::default(), true, &mut rng).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(features(g.node_count(), 3, 1));
    assert!(block.forward(&mut tape, &store, &basis, xv, false).is_err());
}

#[test]
fn pointwise_matches_dense_oracle() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pw = Pointwise::new(&mut store, "p", 3, 2, false, &mut rng);
    store.insert("p.bias", Tensor::new(&[2], vec![0.5, -0.25]).unwrap());
    let x = features(7, 3, 2);
    let w = store.get(pw.weight).clone();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = pw.forward(&mut tape, &store, xv, false).unwrap();
    for i in 0..7 {
        for o in 0..2 {
            let expected: f64 = (0..3).map(|c| x.at(i, c) * w.at(c, o)).sum::<f64>() + [0.5, -0.25][o];
            assert!((tape.value(y).at(i, o) - expected).abs() < 1e-14);
        }
    }
    // identity weight reproduces input; constant field stays constant
    let id = Pointwise::new(&mut store, "q", 3, 3, false, &mut rng);
    store.insert("q.weight", Tensor::eye(3));
    let y = id.forward(&mut tape, &store, xv, false).unwrap();
    assert_eq!(tape.value(y), &x);
    let c = tape.constant(Tensor::filled(&[5, 3], 0.7));
    let act = Pointwise::new(&mut store, "r", 3, 2, true, &mut rng);
    let y = act.forward(&mut tape, &store, c, false).unwrap();
    let v = tape.value(y);
    for i in 1..5 {
        assert_eq!(v.row(i), v.row(0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn spatial_block_gradients_match_finite_differences(seed in any::<u64>(), root in any::<bool>()) {
        let g = build_graph(&synth_mesh(MeshKind::VentricleShell, 2).unwrap()).unwrap();
        let n = g.node_count();
        let basis = Arc::new(basis_operator(&g, &KernelSpec::default()).unwrap());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = SpatialBlock::new(&mut store, "b", 2, KernelSpec::default(), root, &mut rng).unwrap();
        // nonzero bias so the ELU branch is exercised on both sides
        store.insert("b.bias", Tensor::new(&[2], vec![0.1, -0.3]).unwrap());
        // the input features ride along as a parameter so X is checked too
        let x = store.insert("x", features(n, 2, seed ^ 77));
        let r = check_param_gradients(&store, 1e-6, |t, s, trainable| {
            let xv = t.param(s, x, trainable);
            let y = block.forward(t, s, &basis, xv, trainable)?;
            weighted_sum(t, y)
        })
        .unwrap();
        prop_assert!(r.max_rel_error < 1e-6, "{:?}", r);
    }
}
