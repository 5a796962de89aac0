use super::{Real, Tensor};
use crate::error::Result;

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes `grad_out` where `input > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.ensure_same_shape(grad_out, "relu_backward")?;
    let mut grad = grad_out.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clamps_negatives() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), [0.0, 0.0, 2.0]);
        let g = Tensor::full(&[3], 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), [0.0, 0.0, 5.0]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(relu_backward::<f32>(&Tensor::zeros(&[3]), &Tensor::zeros(&[4])).is_err());
    }

    proptest! {
        #[test]
        fn idempotent(values in prop::collection::vec(-1e6f32..1e6, 1..64)) {
            let x = Tensor::from_vec(&[values.len()], values).unwrap();
            let once = relu_forward(&x);
            prop_assert_eq!(relu_forward(&once), once);
        }
    }
}
