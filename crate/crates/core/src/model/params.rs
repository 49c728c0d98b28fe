use rand::Rng;

use crate::nn::{DenseMatrix, ParamTensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// The node-wise MLP.
    Main,
    /// Halting weights `Q` and bias `q`.
    Halting,
}

/// All trainable tensors of the model.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar> {
    pub w1: ParamTensor<T>,
    pub b1: ParamTensor<T>,
    pub w2: ParamTensor<T>,
    pub b2: ParamTensor<T>,
    /// `Q`, shape `C × 1`.
    pub q_weights: ParamTensor<T>,
    /// `q`, shape `1 × 1`.
    pub q_bias: ParamTensor<T>,
}

fn glorot<T: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> DenseMatrix<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseMatrix::from_fn(fan_in, fan_out, |_, _| {
        T::of((rng.random::<f64>() * 2.0 - 1.0) * limit)
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, and a zero halting unit (`h = 0.5`).
    pub fn init<R: Rng + ?Sized>(
        d_features: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = glorot(d_features, hidden, rng);
        let w2 = glorot(hidden, n_classes, rng);
        Self {
            w1: ParamTensor::new(w1),
            b1: ParamTensor::new(DenseMatrix::zeros(1, hidden)),
            w2: ParamTensor::new(w2),
            b2: ParamTensor::new(DenseMatrix::zeros(1, n_classes)),
            q_weights: ParamTensor::new(DenseMatrix::zeros(n_classes, 1)),
            q_bias: ParamTensor::new(DenseMatrix::zeros(1, 1)),
        }
    }

    /// Sets the ℓ2 coefficient of the first layer (and optionally its bias).
    pub fn with_first_layer_l2(mut self, l2: T, include_bias: bool) -> Self {
        self.w1.l2 = l2;
        self.b1.l2 = if include_bias { l2 } else { T::zero() };
        self
    }

    pub fn hidden(&self) -> usize {
        self.w1.value.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.w2.value.cols()
    }

    pub fn d_features(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn q_bias_value(&self) -> T {
        self.q_bias.value.get(0, 0)
    }

    pub fn group(&self, group: ParamGroup) -> Vec<&ParamTensor<T>> {
        match group {
            ParamGroup::Main => vec![&self.w1, &self.b1, &self.w2, &self.b2],
            ParamGroup::Halting => vec![&self.q_weights, &self.q_bias],
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> Vec<&mut ParamTensor<T>> {
        match group {
            ParamGroup::Main => vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2],
            ParamGroup::Halting => vec![&mut self.q_weights, &mut self.q_bias],
        }
    }

    pub fn all(&self) -> Vec<&ParamTensor<T>> {
        let mut v = self.group(ParamGroup::Main);
        v.extend(self.group(ParamGroup::Halting));
        v
    }

    pub fn all_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.q_weights,
            &mut self.q_bias,
        ]
    }

    pub fn zero_grad(&mut self) {
        self.all_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Sum of the ℓ2 penalties of every tensor.
    pub fn l2_penalty(&self) -> T {
        self.all().iter().map(|p| p.l2_penalty()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
            q_weights: self.q_weights.cast(),
            q_bias: self.q_bias.cast(),
        }
    }
}
