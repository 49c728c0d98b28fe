use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::matrix::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A trainable tensor with its gradient and Adam moment state.
#[derive(Clone, Debug)]
pub struct ParamTensor<T: Scalar> {
    pub value: DenseMatrix<T>,
    pub grad: DenseMatrix<T>,
    pub adam_m: DenseMatrix<T>,
    pub adam_v: DenseMatrix<T>,
    pub step_count: u64,
    /// ℓ2 coefficient λ; the penalty λ‖value‖² contributes `2λ·value` to the gradient.
    pub l2: T,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(value: DenseMatrix<T>) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: DenseMatrix::zeros(r, c),
            adam_m: DenseMatrix::zeros(r, c),
            adam_v: DenseMatrix::zeros(r, c),
            step_count: 0,
            l2: T::zero(),
        }
    }

    pub fn with_l2(mut self, l2: T) -> Self {
        self.l2 = l2;
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// `grad += g`.
    pub fn accumulate(&mut self, g: &DenseMatrix<T>) -> Result<()> {
        self.grad.add_scaled(g, T::one())
    }

    /// ℓ2 penalty value `λ‖value‖²`.
    pub fn l2_penalty(&self) -> T {
        if self.l2 == T::zero() {
            return T::zero();
        }
        self.l2 * self.value.as_slice().iter().map(|&v| v * v).sum::<T>()
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensor<U> {
        ParamTensor {
            value: self.value.cast(),
            grad: self.grad.cast(),
            adam_m: self.adam_m.cast(),
            adam_v: self.adam_v.cast(),
            step_count: self.step_count,
            l2: U::of(self.l2.as_f64()),
        }
    }
}

/// One bias-corrected Adam update; the gradient is consumed (zeroed) afterwards.
pub fn adam_step<T: Scalar>(p: &mut ParamTensor<T>, cfg: &AdamConfig) -> Result<()> {
    if !p.grad.is_finite() {
        return Err(Error::NonFinite("adam_step gradient"));
    }
    p.step_count += 1;
    let t = p.step_count as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let decay = p.l2 + p.l2;
    let value = p.value.as_mut_slice();
    let grad = p.grad.as_slice();
    let m = p.adam_m.as_mut_slice();
    let v = p.adam_v.as_mut_slice();
    for i in 0..value.len() {
        let g = grad[i] + decay * value[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    p.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(vals: &[f64]) -> ParamTensor<f64> {
        ParamTensor::new(DenseMatrix::from_vec(1, vals.len(), vals.to_vec()).unwrap())
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = tensor(&[1.0, -2.0, 3.0]);
        let before = p.value.clone();
        adam_step(&mut p, &AdamConfig::default()).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let cfg = AdamConfig::default();
        let mut p = tensor(&[0.0; 4]);
        p.grad.fill(1.0);
        adam_step(&mut p, &cfg).unwrap();
        let expected = -cfg.lr / (1.0 + cfg.eps);
        for &v in p.value.as_slice() {
            assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
        }
        assert_eq!(p.grad.sum(), 0.0);
    }

    #[test]
    fn decay_only_step_opposes_value() {
        let mut p = tensor(&[2.0, -3.0]).with_l2(0.008);
        adam_step(&mut p, &AdamConfig::default()).unwrap();
        // effective grads 0.032 and -0.048; the first Adam step has magnitude ≈ lr
        assert!(p.value.get(0, 0) < 2.0);
        assert!(p.value.get(0, 1) > -3.0);
        assert!((p.adam_m.get(0, 0) - 0.1 * 0.016 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = tensor(&[1.0]);
        p.grad.set(0, 0, f64::INFINITY);
        assert!(adam_step(&mut p, &AdamConfig::default()).is_err());
    }
}
