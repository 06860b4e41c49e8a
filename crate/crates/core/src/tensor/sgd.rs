use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Plain SGD: `p ← p − lr·g` for every pair. No momentum, no weight decay.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
    }
    for (p, g) in params.iter().zip(grads) {
        p.same_shape(g, "sgd step")?;
    }
    let lr = T::of(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w = *w - lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let mut p = Tensor::<f64>::scalar(1.0);
        sgd_step(&mut [&mut p], &[Tensor::scalar(0.5)], 0.1).unwrap();
        assert_eq!(p.data(), &[0.95]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f32>::from_fn(&[4], |i| i as f32);
        let before = p.clone();
        sgd_step(&mut [&mut p], &[Tensor::zeros(&[4])], 0.3).unwrap();
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn two_steps_equal_one_doubled_step() {
        let g = Tensor::<f64>::new(vec![2], vec![0.25, -0.5]).unwrap();
        let mut a = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        sgd_step(&mut [&mut a], std::slice::from_ref(&g), 0.125).unwrap();
        sgd_step(&mut [&mut a], std::slice::from_ref(&g), 0.125).unwrap();
        sgd_step(&mut [&mut b], std::slice::from_ref(&g), 0.25).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        assert!(sgd_step(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(sgd_step(&mut [&mut p], &[], 0.1).is_err());
    }
}
