use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its gradient buffer and Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros_like(&value);
        Self {
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        Parameter {
            value: self.value.cast(),
            grad: self.grad.cast(),
            adam_m: self.adam_m.cast(),
            adam_v: self.adam_v.cast(),
            step_count: self.step_count,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients. Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Scalar>(params: &mut [&mut Parameter<T>], cfg: &AdamConfig) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if let Some(pos) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NumericAbort(format!(
                "non-finite gradient in parameter {i} at element {pos} (value {:?})",
                p.grad.data()[pos]
            )));
        }
    }

    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);

    for p in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = one - T::from_f64_lossy(cfg.beta1.powi(t));
        let bc2 = one - T::from_f64_lossy(cfg.beta2.powi(t));
        let Parameter {
            value,
            grad,
            adam_m,
            adam_v,
            ..
        } = &mut **p;
        let iter = value.data_mut().iter_mut().zip(grad.data()).zip(
            adam_m
                .data_mut()
                .iter_mut()
                .zip(adam_v.data_mut().iter_mut()),
        );
        for ((w, &g), (m, v)) in iter {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let step = lr * m_hat / (v_hat.sqrt() + eps);
            // a signed-zero step would flip -0.0 weights to +0.0
            if step != T::zero() {
                *w -= step;
            }
        }
        p.zero_grad();
    }
    Ok(())
}
