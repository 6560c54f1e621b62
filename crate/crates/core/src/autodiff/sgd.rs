use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{contract, dimension, Result};

/// Classical (heavy-ball) momentum SGD.
///
/// `v <- momentum * v + grad; theta <- theta - lr * v`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdState {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, params: &[&Tensor]) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(contract(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(contract(format!(
                "momentum must lie in [0,1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update and zeroes the gradients. Every trainable parameter
    /// must carry a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(dimension(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad() && p.grad().is_none() {
                return Err(contract(format!("parameter {i} has no gradient")));
            }
            if p.len() != self.velocity[i].len() {
                return Err(dimension(format!("parameter {i} changed size")));
            }
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().expect("checked above").to_vec();
            for ((theta, vel), g) in p.values_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vel = self.momentum * *vel + g;
                *theta -= self.learning_rate * *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap().with_grad();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 1.0);
        let mut opt = SgdState::new(0.1, 0.0, &[&p]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.values()[0] - 0.9).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .with_grad();
        p.accumulate_grad(&[0.0; 3]).unwrap();
        let mut opt = SgdState::new(0.01, 0.8, &[&p]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        // lr=0.5, mu=0.8, theta0=2, g1=1, g2=3
        // v1 = 1, theta1 = 2 - 0.5 = 1.5
        // v2 = 0.8*1 + 3 = 3.8, theta2 = 1.5 - 1.9 = -0.4
        let mut p = param(2.0, 1.0);
        let mut opt = SgdState::new(0.5, 0.8, &[&p]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.values()[0] - 1.5).abs() < 1e-15);
        p.accumulate_grad(&[3.0]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.values()[0] + 0.4).abs() < 1e-12);
        assert!((opt.velocity()[0][0] - 3.8).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().with_grad();
        let mut opt = SgdState::new(0.1, 0.0, &[&p]).unwrap();
        assert!(opt.step(&mut [&mut p]).is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdState::new(0.0, 0.5, &[]).is_err());
        assert!(SgdState::new(0.1, 1.0, &[]).is_err());
    }
}
