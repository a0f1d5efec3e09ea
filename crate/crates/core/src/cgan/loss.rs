//! Adversarial and reconstruction losses, each returning its value together
//! with the gradient on its input.

use super::layers::Tensor;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus<F: Scalar>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn check_finite<F: Scalar>(what: &str, t: &Tensor<F>) -> Result<()> {
    match t.data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!(
            "{what} logit {i} is not finite ({:?})",
            t.data[i]
        ))),
    }
}

/// Mean binary cross-entropy of the patch logits against a constant label.
/// Returns the value and its gradient on the logits.
pub fn bce_with_logits<F: Scalar>(logits: &Tensor<F>, real: bool) -> (F, Tensor<F>) {
    let n = F::of(logits.data.len() as f64);
    let mut total = F::zero();
    let mut grad = logits.clone();
    for (g, &z) in grad.data.iter_mut().zip(&logits.data) {
        if real {
            // -ln sigmoid(z) = softplus(-z)
            total += softplus(-z);
            *g = (sigmoid(z) - F::one()) / n;
        } else {
            // -ln(1 - sigmoid(z)) = softplus(z)
            total += softplus(z);
            *g = sigmoid(z) / n;
        }
    }
    (total / n, grad)
}

/// Conditional adversarial loss in minimization form.
///
/// Discriminator: `-(E[ln D(x, y)] + E[ln(1 - D(x, G(x)))])` over patch means.
/// Generator (non-saturating): `-E[ln D(x, G(x))]`; `real` is ignored.
pub fn loss_cgan<F: Scalar>(real: &Tensor<F>, fake: &Tensor<F>, role: Role) -> Result<F> {
    check_finite("fake", fake)?;
    Ok(match role {
        Role::Discriminator => {
            check_finite("real", real)?;
            bce_with_logits(real, true).0 + bce_with_logits(fake, false).0
        }
        Role::Generator => bce_with_logits(fake, true).0,
    })
}

/// Mean absolute difference and its gradient with respect to `y_hat`.
pub fn l1_with_grad<F: Scalar>(y: &Tensor<F>, y_hat: &Tensor<F>) -> Result<(F, Tensor<F>)> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Shape(format!(
            "l1 operands differ: {:?} vs {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    let n = F::of(y.data.len() as f64);
    let mut total = F::zero();
    let mut grad = y_hat.clone();
    for ((g, &a), &b) in grad.data.iter_mut().zip(&y.data).zip(&y_hat.data) {
        let d = b - a;
        total += d.abs();
        *g = if d > F::zero() {
            F::one() / n
        } else if d < F::zero() {
            -F::one() / n
        } else {
            F::zero()
        };
    }
    Ok((total / n, grad))
}

pub fn loss_l1<F: Scalar>(y: &Tensor<F>, y_hat: &Tensor<F>) -> Result<F> {
    l1_with_grad(y, y_hat).map(|(v, _)| v)
}
