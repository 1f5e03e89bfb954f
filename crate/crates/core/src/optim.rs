//! First-order optimizers.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros = |p: &ParamStore| p.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: zeros(params),
            second: zeros(params),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter in `params`.
/// Gradient buffers are cleared afterwards.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for id in params.ids() {
        let t = params.get(id);
        match &t.grad {
            None => return Err(Error::MissingGrad(params.name(id).to_string())),
            Some(g) if g.iter().any(|v| !v.is_finite()) => {
                return Err(Error::NonFinite { op: "adam_step" })
            }
            Some(_) => {}
        }
        if state.first[id.index()].len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![state.first[id.index()].len()],
                rhs: vec![t.len()],
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - libm::pow(b1, state.step as f64);
    let c2 = 1.0 - libm::pow(b2, state.step as f64);
    for id in params.ids() {
        let t = params.get_mut(id);
        let g = t.grad.take().expect("checked above");
        let m = &mut state.first[id.index()];
        let v = &mut state.second[id.index()];
        for (i, w) in t.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w -= state.learning_rate * mhat / (libm::sqrt(vhat) + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = ParamStore::new();
        let id = p.insert("w", Tensor::new(&[2], vec![0.5, -1.5]).unwrap());
        let mut st = AdamState::new(&p, 0.1);
        p.get_mut(id).grad = Some(vec![0.0, 0.0]);
        adam_step(&mut p, &mut st).unwrap();
        assert_eq!(p.get(id).data(), &[0.5, -1.5]);
        assert!(p.get(id).grad.is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) ≈ lr·sign(g).
        let mut p = ParamStore::new();
        let id = p.insert("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(&p, 1e-2);
        p.get_mut(id).grad = Some(vec![3.7]);
        adam_step(&mut p, &mut st).unwrap();
        let expected = 1.0 - 1e-2 * 3.7 / (3.7 + 1e-8);
        assert!((p.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_error() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(&p, 1e-2);
        assert!(matches!(adam_step(&mut p, &mut st), Err(Error::MissingGrad(n)) if n == "w"));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = ParamStore::new();
        let id = p.insert("w", Tensor::scalar(1.0));
        let mut st = AdamState::new(&p, 1e-2);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let w = tape.param(&p, id, true);
            let l = tape.sum_sq(w).unwrap();
            let g = tape.backward(l).unwrap();
            p.accumulate(&g);
            adam_step(&mut p, &mut st).unwrap();
        }
        assert!(p.get(id).data()[0].abs() < 1e-3, "w = {}", p.get(id).data()[0]);
    }
}
