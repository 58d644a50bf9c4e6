//! Trainable parameters and the Adam update.

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// A grid of weights with Adam moment state. The step counter drives bias
/// correction, so a freshly built parameter takes a first step of magnitude
/// close to `lr` under any nonzero gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Grid,
    m: Grid,
    v: Grid,
    t: u64,
}

impl Param {
    pub fn new(value: Grid) -> Param {
        let (h, w, c) = value.shape();
        Param { value, m: Grid::zeros(h, w, c), v: Grid::zeros(h, w, c), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam step in place. The gradient must match the value's shape.
    pub fn adam_update(&mut self, grad: &Grid, cfg: &AdamConfig) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::shape(
                "Param::adam_update",
                format!("grad {:?} vs value {:?}", grad.shape(), self.value.shape()),
            ));
        }
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        let n = self.value.numel();
        for i in 0..n {
            let g = grad.data()[i];
            let m = cfg.beta1 * self.m.data()[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.v.data()[i] + (1.0 - cfg.beta2) * g * g;
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = v;
            let m_hat = m / b1t;
            let v_hat = v / b2t;
            self.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if !self.value.all_finite() {
            return Err(Error::non_finite("Param::adam_update", "updated value"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_magnitude_is_close_to_lr() {
        // With bias correction, m_hat = g and v_hat = g^2 on step one, so
        // the update is lr * g / (|g| + eps) = lr up to the eps term.
        let mut p = Param::new(Grid::filled(2, 2, 1, 1.0));
        let grad = Grid::filled(2, 2, 1, 1.0);
        let cfg = AdamConfig::default();
        p.adam_update(&grad, &cfg).unwrap();
        for &v in p.value.data() {
            let step = 1.0 - v;
            assert!((step - cfg.lr).abs() < 1e-9, "step {}", step);
        }
    }

    #[test]
    fn first_step_direction_follows_gradient_sign() {
        let mut p = Param::new(Grid::from_vec(1, 2, 1, vec![0.0, 0.0]).unwrap());
        let grad = Grid::from_vec(1, 2, 1, vec![3.0, -0.001]).unwrap();
        p.adam_update(&grad, &AdamConfig::with_lr(0.01)).unwrap();
        assert!(p.value.data()[0] < 0.0);
        assert!(p.value.data()[1] > 0.0);
        // Adam normalizes per-coordinate: both moves have magnitude ~lr.
        assert!((p.value.data()[0].abs() - 0.01).abs() < 1e-6);
        assert!((p.value.data()[1].abs() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_value_unchanged() {
        let mut p = Param::new(Grid::filled(1, 1, 1, 5.0));
        p.adam_update(&Grid::zeros(1, 1, 1), &AdamConfig::default()).unwrap();
        assert_eq!(p.value.scalar_value(), 5.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = Param::new(Grid::zeros(2, 2, 1));
        assert!(p.adam_update(&Grid::zeros(2, 3, 1), &AdamConfig::default()).is_err());
    }
}
