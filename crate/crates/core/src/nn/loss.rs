use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::tensor::{Scalar, Tensor};

use super::ops::softmax_backward;

/// `-ln p[label]` for a probability vector `p`.
pub fn multinomial_logistic_loss<T: Scalar>(p: &Tensor<T>, label: usize) -> Result<T> {
    let &pl = p.data().get(label).ok_or_else(|| {
        Error::InvalidArgument(format!("label {label} out of range for {} classes", p.len()))
    })?;
    Ok(-pl.max(T::min_positive_value()).ln())
}

/// Gradient of the softmax + logistic loss pair w.r.t. the pre-softmax scores.
pub fn softmax_logistic_backward<T: Scalar>(p: &Tensor<T>, label: usize) -> Result<Tensor<T>> {
    if label >= p.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            p.len()
        )));
    }
    let mut g = p.clone();
    g.data_mut()[label] -= T::one();
    Ok(g)
}

fn target<T: Scalar>(p: &Tensor<T>, y: &LabelVector) -> Result<Vec<T>> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "prediction has {} entries, labels {}",
            p.len(),
            y.len()
        )));
    }
    Ok(y.target_distribution()?.into_iter().map(T::of).collect())
}

/// Per-image squared loss `sum_k (p_k - y_k/|y|_1)^2`.
pub fn squared_loss<T: Scalar>(p: &Tensor<T>, y: &LabelVector) -> Result<T> {
    let t = target(p, y)?;
    Ok(p.data().iter().zip(&t).map(|(&a, &b)| (a - b) * (a - b)).sum())
}

/// Gradient of [`squared_loss`] w.r.t. `p`.
pub fn squared_loss_backward<T: Scalar>(p: &Tensor<T>, y: &LabelVector) -> Result<Tensor<T>> {
    let t = target(p, y)?;
    let two = T::of(2.0);
    let data = p.data().iter().zip(&t).map(|(&a, &b)| two * (a - b)).collect();
    Tensor::new(p.shape().to_vec(), data)
}

/// Squared loss of `softmax(logits)` and its gradient w.r.t. the logits.
pub fn softmax_squared_loss<T: Scalar>(
    logits: &Tensor<T>,
    y: &LabelVector,
) -> Result<(T, Tensor<T>)> {
    let p = super::ops::softmax(logits);
    let loss = squared_loss(&p, y)?;
    let grad = softmax_backward(&p, &squared_loss_backward(&p, y)?)?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::softmax;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(v)
    }

    #[test]
    fn logistic_loss_examples() {
        assert_eq!(multinomial_logistic_loss(&t(&[0.0, 1.0, 0.0]), 1).unwrap(), 0.0);
        let l = multinomial_logistic_loss(&t(&[0.25; 4]), 3).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!(multinomial_logistic_loss(&t(&[0.5, 0.5]), 2).is_err());
    }

    #[test]
    fn fused_logistic_gradient_matches_finite_differences() {
        let z = t(&[0.3, -0.7, 1.1, 0.05]);
        let g = softmax_logistic_backward(&softmax(&z), 2).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let num = (multinomial_logistic_loss(&softmax(&zp), 2).unwrap()
                - multinomial_logistic_loss(&softmax(&zm), 2).unwrap())
                / (2.0 * h);
            assert!((num - g.data()[i]).abs() / num.abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn squared_loss_examples() {
        let y = LabelVector::new(vec![1, 0, 1, 0]).unwrap();
        assert_eq!(y.target_distribution().unwrap(), vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(squared_loss(&t(&[0.5, 0.0, 0.5, 0.0]), &y).unwrap(), 0.0);
        let y = LabelVector::new(vec![0, 1]).unwrap();
        assert_eq!(squared_loss(&t(&[1.0, 0.0]), &y).unwrap(), 2.0);
        let none = LabelVector::new(vec![0, 0]).unwrap();
        assert!(matches!(squared_loss(&t(&[1.0, 0.0]), &none), Err(Error::Data(_))));
    }

    #[test]
    fn softmax_squared_gradient_matches_finite_differences() {
        let y = LabelVector::new(vec![1, 0, 1, 0, 0]).unwrap();
        let z = t(&[0.2, -0.4, 0.9, 1.3, -0.1]);
        let (_, g) = softmax_squared_loss(&z, &y).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let num = (softmax_squared_loss(&zp, &y).unwrap().0 - softmax_squared_loss(&zm, &y).unwrap().0)
                / (2.0 * h);
            assert!((num - g.data()[i]).abs() / num.abs().max(1e-8) < 1e-6);
        }
    }
}
