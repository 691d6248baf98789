use crate::error::Result;
use crate::tensor::{ensure_same_shape, Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_parts(input.shape(), data)
}

/// Gradient of [`relu`]; the subgradient at exactly zero is taken as 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("relu_backward", input.shape(), grad_out.shape())?;
    Ok(masked_by_positive(input, grad_out))
}

/// Keeps `grad` where `gate > 0`. ReLU outputs are positive exactly where
/// their inputs are, so the gate may be either.
pub(crate) fn masked_by_positive<T: Scalar>(gate: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = gate
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(grad.shape(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("add", a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape(), data))
}

pub(crate) fn add_assign<T: Scalar>(acc: &mut Tensor<T>, other: &Tensor<T>) -> Result<()> {
    ensure_same_shape("add", acc.shape(), other.shape())?;
    acc.data_mut().iter_mut().zip(other.data()).for_each(|(a, &b)| *a = *a + b);
    Ok(())
}
