use std::sync::Arc;

use tkgcn_core::gradcheck::check_param_gradients;
use tkgcn_core::koopman_ae::*;
use tkgcn_core::mesh::{build_graph, synth_mesh, CoarseEdges, GraphHierarchy, MeshKind};
use tkgcn_core::{Error, Tape, Tensor};

fn hierarchy() -> Arc<GraphHierarchy> {
    let g = build_graph(&synth_mesh(MeshKind::Sphere, 1).unwrap()).unwrap();
    Arc::new(GraphHierarchy::build(g, 2, 0, CoarseEdges::ClusterAdjacency).unwrap())
}

fn config() -> Stage1Config {
    Stage1Config {
        d_z: 4,
        channels: 2,
        delta_t: 2,
        lambda2: 0.1,
        epochs: 3,
        batch_size: 4,
        ..Default::default()
    }
}

/// Smooth travelling pattern over the sphere, `frames × n`.
fn frames(h: &GraphHierarchy, count: usize) -> Vec<f64> {
    let pos = h.level(0).positions();
    (0..count)
        .flat_map(|t| pos.iter().map(move |p| (0.3 * t as f64 + 2.0 * p[2]).sin() * 0.5 + 0.1 * p[0]))
        .collect()
}

fn set_koopman(m: &mut KoopmanAutoencoder, k: Tensor) {
    *m.params.get_mut(m.koopman) = k;
}

#[test]
fn encode_decode_shapes() {
    let h = hierarchy();
    let m = KoopmanAutoencoder::new(h.clone(), config()).unwrap();
    let n = m.nodes();
    let x = frames(&h, 7);
    let z = m.encode(&x).unwrap();
    assert_eq!((z.frames, z.dim, z.z.len()), (7, 4, 28));
    assert_eq!(m.decode(&z.z).unwrap().len(), 7 * n);
    assert!(m.encode(&x[1..]).is_err());
    assert!(m.decode(&z.z[1..]).is_err());
}

#[test]
fn construction_and_training_are_deterministic() {
    let h = hierarchy();
    let x = frames(&h, 20);
    let run = || {
        let mut m = KoopmanAutoencoder::new(h.clone(), config()).unwrap();
        let log = m.train(&x, 16, |_| {}).unwrap();
        (log, m.encode(&x).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let other = KoopmanAutoencoder::new(h.clone(), Stage1Config { seed: 1, ..config() }).unwrap();
    let base = KoopmanAutoencoder::new(h, config()).unwrap();
    assert_ne!(other.encode(&x).unwrap(), base.encode(&x).unwrap());
}

#[test]
fn losses_match_direct_evaluation() {
    let h = hierarchy();
    let m = KoopmanAutoencoder::new(h.clone(), config()).unwrap();
    let n = m.nodes();
    let x = frames(&h, 10);
    // frame 9 has no t + ΔT target, so it only enters the reconstruction term
    let batch = [0, 3, 8, 9];
    let mut tape = Tape::new();
    let l = m.stage1_losses(&mut tape, &x, &batch, false).unwrap();

    let snap = |t: usize| &x[t * n..(t + 1) * n];
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    let mut recon = 0.0;
    let mut dyn_ = 0.0;
    let mut targets = 0;
    for &t in &batch {
        let z = m.encode(snap(t)).unwrap().z;
        recon += sq(&m.decode(&z).unwrap(), snap(t));
        if t + 2 < 10 {
            for k in 1..=2 {
                let zk = koopman_advance(m.koopman_matrix(), &z, k).unwrap();
                dyn_ += sq(&m.decode(&zk).unwrap(), snap(t + k));
                targets += 1;
            }
        }
    }
    recon /= batch.len() as f64;
    dyn_ /= targets as f64;
    let decay = m.koopman_matrix().sum_sq();
    assert!((l.recon - recon).abs() < 1e-12 * recon.max(1.0));
    assert!((l.dyn_ - dyn_).abs() < 1e-12 * dyn_.max(1.0));
    assert!((l.decay - decay).abs() < 1e-12);
    let total = l.recon + m.config.lambda1 * l.dyn_ + m.config.lambda2 * l.decay;
    assert!((l.total - total).abs() < 1e-12 * total);
}

#[test]
fn zero_operator_has_zero_decay() {
    let h = hierarchy();
    let mut m = KoopmanAutoencoder::new(h.clone(), config()).unwrap();
    set_koopman(&mut m, Tensor::zeros(&[4, 4]));
    let mut tape = Tape::new();
    let l = m.stage1_losses(&mut tape, &frames(&h, 6), &[0, 1], false).unwrap();
    assert_eq!(l.decay, 0.0);
}

#[test]
fn identity_operator_on_static_data_equates_terms() {
    let h = hierarchy();
    let mut m = KoopmanAutoencoder::new(h.clone(), config()).unwrap();
    set_koopman(&mut m, Tensor::eye(4));
    let n = m.nodes();
    let one = frames(&h, 1);
    let x: Vec<f64> = (0..8).flat_map(|_| one.iter().copied()).collect();
    let mut tape = Tape::new();
    let l = m.stage1_losses(&mut tape, &x, &[0, 2, 4], false).unwrap();
    assert!((l.dyn_ - l.recon).abs() < 1e-12 * l.recon);
    assert_eq!(l.decay, 4.0);
    // K = I keeps every pure-Koopman step at decode(encode(x₀))
    let f = m.pure_koopman_forecast(&one, 3).unwrap();
    let rec = m.decode(&m.encode(&one).unwrap().z).unwrap();
    for step in f.chunks(n) {
        assert_eq!(step, rec.as_slice());
    }
    assert!(m.pure_koopman_forecast(&one, 0).unwrap().is_empty());
}

#[test]
fn without_dynamics_weight_operator_gradient_is_decay_only() {
    let h = hierarchy();
    let cfg = Stage1Config { lambda1: 0.0, ..config() };
    let m = KoopmanAutoencoder::new(h.clone(), cfg).unwrap();
    let mut tape = Tape::new();
    let l = m.stage1_losses(&mut tape, &frames(&h, 6), &[0, 1, 2], true).unwrap();
    let grads = tape.backward(l.total_var).unwrap();
    let mut store = m.params.clone();
    store.zero_grads();
    store.accumulate(&grads);
    let g = store.get(m.koopman).grad.clone().unwrap();
    for (gv, kv) in g.iter().zip(m.koopman_matrix().data()) {
        assert!((gv - 2.0 * cfg.lambda2 * kv).abs() < 1e-15);
    }
}

#[test]
fn loss_gradients_match_differences() {
    let h = hierarchy();
    let m = KoopmanAutoencoder::new(h.clone(), config()).unwrap();
    let x = frames(&h, 6);
    let check = check_param_gradients(&m.params, 1e-6, |tape, store, trainable| {
        let mut probe = m.clone();
        probe.params = store.clone();
        Ok(probe.stage1_losses(tape, &x, &[0, 1, 5], trainable)?.total_var)
    })
    .unwrap();
    assert!(check.max_rel_error < 1e-6, "{check:?}");
}

#[test]
fn advance_matches_repeated_products() {
    let k = Tensor::new(&[2, 2], vec![0.9, -0.2, 0.3, 1.1]).unwrap();
    let z = [1.0, -2.0];
    let mut expect = z.to_vec();
    for _ in 0..5 {
        expect = vec![0.9 * expect[0] - 0.2 * expect[1], 0.3 * expect[0] + 1.1 * expect[1]];
    }
    let got = koopman_advance(&k, &z, 5).unwrap();
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(koopman_advance(&k, &z, 0).unwrap(), z);
    assert!(koopman_advance(&k, &[1.0], 1).is_err());
}

#[test]
fn training_lowers_the_loss_and_reports_divergence() {
    let h = hierarchy();
    let x = frames(&h, 24);
    let mut m = KoopmanAutoencoder::new(h.clone(), Stage1Config { epochs: 15, learning_rate: 1e-2, ..config() }).unwrap();
    let log = m.train(&x, 24, |_| {}).unwrap();
    assert!(log.last().unwrap().total < 0.5 * log[0].total);
    let mut bad = x.clone();
    bad[5] = f64::NAN;
    let mut m = KoopmanAutoencoder::new(h, config()).unwrap();
    assert!(matches!(m.train(&bad, 24, |_| {}), Err(Error::Diverged { epoch: 0, .. })));
}
