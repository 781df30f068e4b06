use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::NdArray;

/// `s ← rho·s + (1−rho)·g²; p ← p − lr·g / (sqrt(s) + eps)`, elementwise.
pub fn rmsprop_step(param: &mut [f64], grad: &[f64], square_avg: &mut [f64], lr: f64, rho: f64, eps: f64) {
    debug_assert!(param.len() == grad.len() && grad.len() == square_avg.len());
    for ((p, &g), s) in param.iter_mut().zip(grad).zip(square_avg.iter_mut()) {
        *s = rho * *s + (1.0 - rho) * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
}

/// RMSprop state for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub rho: f64,
    pub eps: f64,
    square_avg: Vec<NdArray>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, rho: f64, eps: f64) -> Self {
        Self {
            rho,
            eps,
            square_avg: store.params().iter().map(|p| NdArray::zeros_like(&p.value)).collect(),
        }
    }

    pub fn square_avg(&self) -> &[NdArray] {
        &self.square_avg
    }

    pub fn set_square_avg(&mut self, values: Vec<NdArray>) -> Result<()> {
        if values.len() != self.square_avg.len()
            || values.iter().zip(&self.square_avg).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("optimizer state does not match the network".into()));
        }
        self.square_avg = values;
        Ok(())
    }

    /// Update from the accumulated gradients, then clear them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for (p, s) in store.params_mut().iter_mut().zip(&mut self.square_avg) {
            let grad = std::mem::replace(&mut p.grad, NdArray::zeros_like(&p.value));
            rmsprop_step(p.value.data_mut(), grad.data(), s.data_mut(), lr, self.rho, self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut s = vec![0.0, 0.5];
        rmsprop_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.9, 1e-8);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_from_zero_state() {
        let mut p = vec![0.0];
        let mut s = vec![0.0];
        rmsprop_step(&mut p, &[1.0], &mut s, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.1 / 0.1f64.sqrt()).abs() < 1e-15);
        assert!((p[0] + 0.31623).abs() < 1e-5);
    }

    #[test]
    fn rho_zero_gives_sign_steps() {
        let mut p = vec![0.0, 0.0];
        let mut s = vec![0.0, 0.0];
        rmsprop_step(&mut p, &[3.0, -0.5], &mut s, 0.1, 0.0, 0.0);
        let first = p.clone();
        rmsprop_step(&mut p, &[3.0, -0.5], &mut s, 0.1, 0.0, 0.0);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(first[0], -0.1) && close(first[1], 0.1));
        assert!(close(p[0], 2.0 * first[0]) && close(p[1], 2.0 * first[1]));
    }
}
