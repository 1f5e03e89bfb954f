use proptest::prelude::*;
use std::sync::Arc;
use tkgcn_core::gradcheck::{check_gradients, weighted_sum};
use tkgcn_core::{SparseOp, Tape, Tensor, Var};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn away_from_kink(v: f64) -> f64 {
    if v.abs() < 1e-2 {
        v.signum() * 1e-2 + v
    } else {
        v
    }
}

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            away_from_kink(((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> tkgcn_core::Result<Var>) {
    let r = check_gradients(inputs, H, |t, v| {
        let y = f(t, v)?;
        weighted_sum(t, y)
    })
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn matmul(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        check(&[tensor(&[m, k], seed), tensor(&[k, n], seed ^ 1)], |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn elementwise(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let ins = [tensor(&[r, c], seed), tensor(&[r, c], seed ^ 7)];
        check(&ins, |t, v| t.add(v[0], v[1]));
        check(&ins, |t, v| t.sub(v[0], v[1]));
        check(&ins, |t, v| t.mul(v[0], v[1]));
        check(&ins[..1], |t, v| t.scale(v[0], -1.7));
    }

    #[test]
    fn row_broadcasts(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let ins = [tensor(&[r, c], seed), tensor(&[c], seed ^ 3)];
        check(&ins, |t, v| t.add_row(v[0], v[1]));
        check(&ins, |t, v| t.mul_row(v[0], v[1]));
    }

    #[test]
    fn activations(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let x = [tensor(&[r, c], seed)];
        check(&x, |t, v| t.elu(v[0]));
        check(&x, |t, v| t.relu(v[0]));
        check(&x, |t, v| t.softmax(v[0]));
        check(&x, |t, v| t.layer_norm(v[0], 1e-5));
    }

    #[test]
    fn shape_ops(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let x = [tensor(&[r, c], seed), tensor(&[r, 2], seed ^ 5)];
        check(&x[..1], |t, v| t.transpose(v[0]));
        check(&x[..1], |t, v| t.reshape(v[0], &[c, r]));
        check(&x, |t, v| t.concat(&[v[0], v[1]], 1));
        check(&x[..1], |t, v| t.concat(&[v[0], v[0]], 0));
        check(&x[..1], |t, v| t.slice(v[0], 1, c / 2, c));
        check(&x[..1], |t, v| t.mean(v[0], 0));
        check(&x[..1], |t, v| t.mean(v[0], 1));
        check(&x[..1], |t, v| t.sum_sq(v[0]));
    }

    #[test]
    fn matrix_power(n in 1usize..5, k in 0usize..4, seed in any::<u64>()) {
        let mut a = tensor(&[n, n], seed);
        a.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        check(&[a], |t, v| t.matrix_power(v[0], k));
    }

    #[test]
    fn sparse_apply(rows in 1usize..5, cols in 1usize..5, ch in 1usize..3, batch in 1usize..3, seed in any::<u64>()) {
        let w = tensor(&[rows * cols], seed);
        let entries = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .filter(|(i, j)| (i + 2 * j) % 3 != 1)
            .enumerate()
            .map(|(k, (i, j))| (i, j, k % 2, w.data()[k]))
            .collect();
        let op = Arc::new(SparseOp::from_entries(rows, cols, 2, entries));
        check(&[tensor(&[batch * cols, ch], seed ^ 9)], |t, v| t.sparse(&op, v[0], ch));
        let ins = [tensor(&[batch * cols, ch], seed ^ 9), tensor(&[2 * ch, 3], seed ^ 4)];
        check(&ins, |t, v| t.sparse_kernel(&op, v[0], v[1]));
    }

    #[test]
    fn softmax_rows_sum_to_one(r in 1usize..6, c in 1usize..8, seed in any::<u64>(), shift in -1e3f64..1e3) {
        let mut x = tensor(&[r, c], seed);
        x.data_mut().iter_mut().for_each(|v| *v = *v * 10.0 + shift);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv).unwrap();
        for row in tape.value(y).data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(r in 1usize..6, c in 2usize..8, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let xv = tape.constant(tensor(&[r, c], seed));
        let y = tape.layer_norm(xv, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn reuse_accumulates_k_contributions(k in 1usize..6, n in 1usize..5, seed in any::<u64>()) {
        // loss = Σ_k (A x)·w  -> grad = k · Aᵀ w
        let a = tensor(&[n, n], seed);
        let x = tensor(&[n, 1], seed ^ 2);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let xv = tape.leaf(x.with_grad());
        let mut total = tape.matmul(av, xv).unwrap();
        for _ in 1..k {
            let y = tape.matmul(av, xv).unwrap();
            total = tape.add(total, y).unwrap();
        }
        let l = tape.mean(total, 0).unwrap();
        let l = tape.mean(l, 0).unwrap();
        let g = tape.backward(l).unwrap();
        for j in 0..n {
            let col: f64 = (0..n).map(|i| a.at(i, j)).sum::<f64>() / n as f64;
            prop_assert!((g.get(xv).unwrap().data()[j] - k as f64 * col).abs() < 1e-12);
        }
    }
}

#[test]
fn composite_network_gradient() {
    // Two-layer block with the same op mix the models use.
    let ins = [tensor(&[4, 5], 11), tensor(&[5, 3], 12), tensor(&[3], 13), tensor(&[3, 3], 14)];
    check(&ins, |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let h = t.elu(h)?;
        let h = t.layer_norm(h, 1e-5)?;
        let k = t.matrix_power(v[3], 2)?;
        let h = t.matmul(h, k)?;
        let s = t.softmax(h)?;
        t.sum_sq(s)
    });
}
