//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest discrepancy found by a gradient check. `input` is the input
/// position (or parameter index) holding the worst element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.data().to_vec(),
            None => alloc::vec![0.0; inputs[k].len()],
        };
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: err,
                    input: k,
                    index: i,
                };
            }
        }
    }
    Ok(worst)
}

/// Same comparison for every value of every parameter in `store`; `f` builds
/// the scalar from parameters bound with [`Tape::param`].
pub fn check_param_gradients<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore, bool) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store, true)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate(&grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s, false)?;
        scalar_of(&tape, out)
    };
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let a_grad = analytic.get(id).grad.clone().unwrap_or_else(|| alloc::vec![0.0; store.get(id).len()]);
        for i in 0..store.get(id).len() {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = a_grad[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: err,
                    input: id.index(),
                    index: i,
                };
            }
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.try_value(v)?;
    if t.len() != 1 {
        return Err(invalid("gradient check needs a scalar output"));
    }
    Ok(t.data()[0])
}

/// Reduces any recorded value to a scalar through a fixed random-looking
/// weighting, so every output element contributes a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.try_value(x)?.len();
    let w: Vec<f64> = (0..n).map(|i| libm::sin(1.0 + 0.7 * i as f64) + 0.1).collect();
    let flat = tape.reshape(x, &[n])?;
    let w = tape.constant(Tensor::new(&[n], w)?);
    let p = tape.mul(flat, w)?;
    let m = tape.mean(p, 0)?;
    tape.scale(m, n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // relu's subgradient is wrong exactly at a kink, far from it it is right
        let x = Tensor::new(&[2], alloc::vec![0.8, -0.6]).unwrap();
        let ok = check_gradients(&[x], 1e-6, |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y)
        })
        .unwrap();
        assert!(ok.max_rel_error < 1e-8);
        let x = Tensor::new(&[1], alloc::vec![0.0]).unwrap();
        let bad = check_gradients(&[x], 1e-6, |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y)
        })
        .unwrap();
        assert!(bad.max_rel_error > 0.1);
    }
}
