use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Moment buffers and hyperparameters for Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            v: m.clone(),
            m,
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dim_err!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    if !(state.lr >= 0.0) {
        return Err(Error::Parameter(format!("adam learning rate {}", state.lr)));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(dim_err!("adam: parameter {i} has {} entries, gradient {}", p.len(), g.len()));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op: "adam_step",
                detail: format!("non-finite gradient {} at parameter {i}, entry {j}", g[j]),
            });
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let mut st = AdamState::new([&w], 0.001);
        adam_step(&mut [&mut w], &[vec![0.0; 3]], &mut st).unwrap();
        assert_eq!(w, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_on_square_moves_by_lr() {
        // f(w) = w^2 at w = 1: g = 2, m_hat = 2, v_hat = 4, step = lr * 2 / (2 + eps).
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut st = AdamState::new([&w], 0.1);
        adam_step(&mut [&mut w], &[vec![2.0]], &mut st).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-15);
        assert!((w.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut w = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let mut st = AdamState::new([&w], 0.1);
        let err = adam_step(&mut [&mut w], &[vec![0.0, f64::NAN]], &mut st).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn identical_inputs_give_identical_state() {
        let run = || {
            let mut w = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
            let mut st = AdamState::new([&w], 0.01);
            for _ in 0..2 {
                let g = vec![2.0 * w.data()[0], 2.0 * w.data()[1]];
                adam_step(&mut [&mut w], &[g], &mut st).unwrap();
            }
            (w, st)
        };
        assert_eq!(run(), run());
    }
}
