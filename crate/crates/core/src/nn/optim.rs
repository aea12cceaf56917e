use serde::{Deserialize, Serialize};

use super::{DenseMatrix, ParamGrads, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to `lr` at every [`Adam::end_epoch`].
    pub decay: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: 1.0 }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.decay;
    }

    /// One bias-corrected Adam update from the gradients held in `params`.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&self, params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
        if let Some(b) = params.blocks().iter().find(|b| !b.grad.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in `{}`", b.name)));
        }
        state.ensure(params);
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((block, m), v) in params.blocks_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
            for i in 0..block.value.data.len() {
                let g = block.grad.data[i];
                let mi = self.beta1 * m.data[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data[i] + (1.0 - self.beta2) * g * g;
                m.data[i] = mi;
                v.data[i] = vi;
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                block.value.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
}

impl AdamState {
    fn ensure(&mut self, params: &ParamSet) {
        if self.m.len() != params.len() {
            self.m = params.blocks().iter().map(|b| DenseMatrix::zeros(b.value.rows, b.value.cols)).collect();
            self.v = self.m.clone();
            self.t = 0;
        }
    }
}

/// Sums `parts` in order, multiplies by `scale`, and takes one Adam step.
/// Returns the gradient norm. Parameters are untouched on numeric failure.
pub fn apply_gradients(
    params: &mut ParamSet,
    parts: Vec<ParamGrads>,
    scale: f64,
    adam: &Adam,
    state: &mut AdamState,
) -> Result<f64> {
    let mut total = ParamGrads::zeros_like(params);
    for g in &parts {
        total.add_assign(g);
    }
    total.scale(scale);
    if !total.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    params.zero_grad();
    params.accumulate(&total);
    let norm = params.grad_norm();
    adam.step(params, state)?;
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add_value("x", DenseMatrix::from_vec(1, 1, vec![x]));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut s = AdamState::default();
        Adam::new(0.1).step(&mut p, &mut s).unwrap();
        assert_eq!(p.blocks()[0].value.data[0], 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar(1.0);
        p.blocks_mut()[0].grad.data[0] = 1.0;
        let mut s = AdamState::default();
        Adam::new(0.1).step(&mut p, &mut s).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert_eq!(p.blocks()[0].value.data[0], expected);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = scalar(1.0);
        let mut s = AdamState::default();
        let adam = Adam::new(0.05);
        for _ in 0..200 {
            let x = p.blocks()[0].value.data[0];
            p.blocks_mut()[0].grad.data[0] = 2.0 * x;
            adam.step(&mut p, &mut s).unwrap();
        }
        assert!(p.blocks()[0].value.data[0].abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut p = scalar(2.0);
        p.blocks_mut()[0].grad.data[0] = f64::NAN;
        let mut s = AdamState::default();
        assert!(matches!(Adam::new(0.1).step(&mut p, &mut s), Err(Error::Numeric(_))));
        assert_eq!(p.blocks()[0].value.data[0], 2.0);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn decay_shrinks_lr() {
        let mut a = Adam::new(1e-4).with_decay(0.98);
        a.end_epoch();
        assert!((a.lr - 0.98e-4).abs() < 1e-18);
    }
}
