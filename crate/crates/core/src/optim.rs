use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{axpy, Tensor};

/// Heavy-ball momentum: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies one update. Velocity buffers are created on the first call and
    /// must keep matching the parameter list afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(
                "sgd_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(shape_err(
                "sgd_step",
                format!("optimizer tracks {} parameters, got {}", self.velocity.len(), params.len()),
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            p.expect_shape(g.shape(), "sgd_step")?;
            p.expect_shape(v.shape(), "sgd_step velocity")?;
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let m = self.momentum;
            v.data_mut().iter_mut().for_each(|x| *x *= m);
            axpy(1.0, g.data(), v.data_mut());
            axpy(-self.learning_rate, v.data(), p.data_mut());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut opt = SgdMomentum::new(1.0, 0.0).unwrap();
        let mut p = Tensor::row(&[5.0]);
        opt.step(&mut [&mut p], &[Tensor::row(&[2.0])]).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        let mut p = Tensor::row(&[0.0]);
        let g = Tensor::row(&[1.0]);
        opt.step(&mut [&mut p], core::slice::from_ref(&g)).unwrap();
        assert_eq!(opt.velocity()[0].data(), &[1.0]);
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
        opt.step(&mut [&mut p], core::slice::from_ref(&g)).unwrap();
        assert!((opt.velocity()[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((p.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut opt = SgdMomentum::new(0.5, 0.9).unwrap();
        let mut p = Tensor::row(&[1.5, -2.0]);
        opt.step(&mut [&mut p], &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        let mut p = Tensor::row(&[1.0, 2.0]);
        assert!(opt.step(&mut [&mut p], &[Tensor::row(&[1.0])]).is_err());
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(SgdMomentum::new(0.0, 0.9).is_err());
        assert!(SgdMomentum::new(0.1, 1.0).is_err());
    }
}
