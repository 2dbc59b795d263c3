use crate::diffengine::{Tape, Var};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates and the step count of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(shape_err!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// `-log softmax(logits)[label]` for a single `[Q]` logit vector.
pub fn cross_entropy_softmax(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let q = tape.data(logits).len();
    let row = tape.reshape(logits, &[1, q])?;
    tape.cross_entropy(row, &[label])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::DiffArray;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let cfg = AdamConfig::default();
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            adam_step(&mut p, &[0.3], &mut s, 1e-3, &cfg).unwrap();
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn scalar_trace() {
        let (lr, g) = (0.01, 0.5);
        let cfg = AdamConfig::default();
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[g], &mut s, lr, &cfg).unwrap();
        let (m, v) = (0.1 * g, 0.001 * g * g);
        let expect = 1.0 - lr * (m / 0.1) / ((v / 0.001f64).sqrt() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!(adam_step(&mut p, &[1.0, 2.0], &mut s, lr, &cfg).is_err());
    }

    #[test]
    fn cross_entropy_wrapper() {
        let mut t = Tape::new();
        let l = t.leaf(DiffArray::vector(vec![0.0, 0.0]).requires_grad());
        let loss = cross_entropy_softmax(&mut t, l, 0).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(l).unwrap(), &[-0.5, 0.5]);
        assert!(cross_entropy_softmax(&mut t, l, 2).is_err());
    }
}
