//! Forward/backward pairs for the fixed layer set of the model.
//!
//! Every backward takes the upstream gradient first and whatever the matching
//! forward cached. Shapes are validated; values are checked for finiteness in
//! debug builds.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::matrix::DenseMatrix;
use crate::scalar::Scalar;

#[inline]
fn debug_finite<T: Scalar>(m: &DenseMatrix<T>, op: &'static str) {
    debug_assert!(m.is_finite(), "non-finite output from {op}");
}

/// `x · w + b`, with `b` a `1 × w.cols()` row broadcast over rows.
pub fn affine_forward<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::shape(
            "affine_forward bias",
            format!("1x{}", w.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    let mut out = x.matmul(w)?;
    add_row_bias(&mut out, b);
    debug_finite(&out, "affine_forward");
    Ok(out)
}

pub(crate) fn add_row_bias<T: Scalar>(out: &mut DenseMatrix<T>, b: &DenseMatrix<T>) {
    let bias = b.as_slice();
    for i in 0..out.rows() {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(bias) {
            *o += bv;
        }
    }
}

#[derive(Clone, Debug)]
pub struct AffineGrads<T: Scalar> {
    pub dx: DenseMatrix<T>,
    pub dw: DenseMatrix<T>,
    pub db: DenseMatrix<T>,
}

pub fn affine_backward<T: Scalar>(
    upstream: &DenseMatrix<T>,
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
) -> Result<AffineGrads<T>> {
    if upstream.rows() != x.rows() || upstream.cols() != w.cols() || x.cols() != w.rows() {
        return Err(Error::shape(
            "affine_backward",
            format!("upstream {}x{}", x.rows(), w.cols()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    Ok(AffineGrads {
        dx: upstream.matmul_t(w)?,
        dw: x.t_matmul(upstream)?,
        db: upstream.col_sums(),
    })
}

pub fn relu<T: Scalar>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given the forward input; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(
    upstream: &DenseMatrix<T>,
    input: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    zip_map(upstream, input, "relu_backward", |g, x| {
        if x > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of the sigmoid given its forward *output*.
pub fn sigmoid_backward<T: Scalar>(
    upstream: &DenseMatrix<T>,
    output: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    zip_map(upstream, output, "sigmoid_backward", |g, s| {
        g * s * (T::one() - s)
    })
}

fn zip_map<T: Scalar>(
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<DenseMatrix<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?}", b.shape()),
            format!("{:?}", a.shape()),
        ));
    }
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    DenseMatrix::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn check_rate<T: Scalar>(rate: T, name: &'static str) -> Result<()> {
    if !(rate >= T::zero() && rate < T::one()) {
        return Err(Error::OutOfRange {
            name,
            range: "[0, 1)",
            value: rate.as_f64(),
        });
    }
    Ok(())
}

/// Cached per-entry multiplier of an inverted-dropout forward.
#[derive(Clone, Debug)]
pub struct DropoutMask<T: Scalar> {
    scale: Option<DenseMatrix<T>>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn identity() -> Self {
        Self { scale: None }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.is_none()
    }
}

/// Inverted dropout. With `train == false` or `rate == 0` this is the identity
/// and consumes no randomness.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    x: &DenseMatrix<T>,
    rate: T,
    train: bool,
    rng: &mut R,
) -> Result<(DenseMatrix<T>, DropoutMask<T>)> {
    check_rate(rate, "dropout rate")?;
    if !train || rate == T::zero() {
        return Ok((x.clone(), DropoutMask::identity()));
    }
    let keep = T::one() - rate;
    let scale = T::one() / keep;
    let keep_f = keep.as_f64();
    let mask = DenseMatrix::from_fn(x.rows(), x.cols(), |_, _| {
        if rng.random::<f64>() < keep_f {
            scale
        } else {
            T::zero()
        }
    });
    let out = zip_map(x, &mask, "dropout_forward", |a, m| a * m)?;
    Ok((out, DropoutMask { scale: Some(mask) }))
}

pub fn dropout_backward<T: Scalar>(
    upstream: &DenseMatrix<T>,
    mask: &DropoutMask<T>,
) -> Result<DenseMatrix<T>> {
    match &mask.scale {
        None => Ok(upstream.clone()),
        Some(m) => zip_map(upstream, m, "dropout_backward", |g, s| g * s),
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax<T: Scalar>(logits: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Mean cross-entropy of `softmax(logits)` over the nodes in `mask`, and its
/// gradient with respect to the logits (zero on rows outside the mask).
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &DenseMatrix<T>,
    labels: &[usize],
    mask: &[usize],
) -> Result<(T, DenseMatrix<T>)> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("softmax_cross_entropy"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "softmax_cross_entropy labels",
            logits.rows(),
            labels.len(),
        ));
    }
    let c = logits.cols();
    let inv = T::one() / T::of(mask.len() as f64);
    let mut loss = T::zero();
    let mut grad = DenseMatrix::zeros(logits.rows(), c);
    for &i in mask {
        let row = logits.row(i);
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_cross_entropy logits"));
        }
        let y = labels[i];
        if y >= c {
            return Err(Error::OutOfRange {
                name: "label",
                range: "[0, C)",
                value: y as f64,
            });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + denom.ln();
        loss += (lse - row[y]) * inv;
        let g = grad.row_mut(i);
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - max).exp() / denom;
            *gv = (p - if j == y { T::one() } else { T::zero() }) * inv;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> DenseMatrix<f64> {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity_input() {
        let out = affine_forward(
            &DenseMatrix::identity(2),
            &m(&[&[1.0, 2.0], &[3.0, 4.0]]),
            &DenseMatrix::zeros(1, 2),
        )
        .unwrap();
        assert_eq!(out, m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn affine_bias_broadcast() {
        let out = affine_forward(
            &DenseMatrix::zeros(3, 2),
            &m(&[&[1.0, -2.0], &[3.0, 4.0]]),
            &m(&[&[5.0, 6.0]]),
        )
        .unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[5.0, 6.0]);
        }
    }

    #[test]
    fn affine_shape_errors() {
        let x = DenseMatrix::<f64>::zeros(2, 3);
        let w = DenseMatrix::zeros(2, 2);
        assert!(affine_forward(&x, &w, &DenseMatrix::zeros(1, 2)).is_err());
        let w = DenseMatrix::zeros(3, 2);
        assert!(affine_forward(&x, &w, &DenseMatrix::zeros(1, 3)).is_err());
        assert!(affine_backward(&DenseMatrix::zeros(2, 3), &x, &w).is_err());
    }

    #[test]
    fn affine_backward_scalar_chain_rule() {
        let g = affine_backward(&m(&[&[1.0]]), &m(&[&[2.0]]), &m(&[&[3.0]])).unwrap();
        assert_eq!(g.dx, m(&[&[3.0]]));
        assert_eq!(g.dw, m(&[&[2.0]]));
        assert_eq!(g.db, m(&[&[1.0]]));
    }

    #[test]
    fn affine_backward_zero_upstream() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let w = m(&[&[1.0, 0.0, 1.0], &[2.0, 1.0, 0.0]]);
        let g = affine_backward(&DenseMatrix::zeros(2, 3), &x, &w).unwrap();
        assert_eq!(g.dx.sum(), 0.0);
        assert_eq!(g.dw.sum(), 0.0);
        assert_eq!(g.db.sum(), 0.0);
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert_eq!(relu(&m(&[&[-3.0, 2.0]])), m(&[&[0.0, 2.0]]));
        assert!(sigmoid_scalar(-800.0f64) >= 0.0);
        assert_eq!(sigmoid_scalar(800.0f64), 1.0);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = m(&[&[1.0, -2.0], &[0.5, 4.0]]);
        let (y, mask) = dropout_forward(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_identity());
        assert_eq!(dropout_backward(&x, &mask).unwrap(), x);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = m(&[&[1.0, -2.0]]);
        let (y, mask) = dropout_forward(&x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_identity());
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DenseMatrix::<f64>::zeros(1, 1);
        assert!(dropout_forward(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout_forward(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn cross_entropy_uniform_two_classes() {
        let (loss, _) = softmax_cross_entropy(&m(&[&[0.0, 0.0]]), &[0], &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let (loss, grad) = softmax_cross_entropy(&m(&[&[1000.0, 0.0]]), &[0], &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.is_finite());
    }

    #[test]
    fn cross_entropy_zero_gradient_outside_mask() {
        let logits = m(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
        let (_, grad) = softmax_cross_entropy(&logits, &[0, 1, 1], &[1]).unwrap();
        assert_eq!(grad.row(0), &[0.0, 0.0]);
        assert_eq!(grad.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = m(&[&[f64::NAN, 0.0]]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0], &[]),
            Err(Error::EmptyMask(_))
        ));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0], &[0]),
            Err(Error::NonFinite(_))
        ));
    }
}
