//! Training objectives evaluated on plain tensors. The graph versions used
//! during training live on [`Graph`](crate::autodiff::Graph) as
//! `bce` and `transition_penalty`.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Frame-wise binary cross-entropy, averaged over positions and then over
/// the batch. Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<S: Scalar>(probs: &Tensor<S>, labels: &Tensor<S>) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(Error::Dimension(format!(
            "bce_loss: probabilities {:?}, labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    let mut g = Graph::new();
    let p = g.input_ref(probs);
    let l = g.bce(p, labels.data())?;
    Ok(g.value(l)[0].as_f64())
}

/// `lambda * mean((p[b, t] - p[b, t-1])^2)` over a `[B, T]` map, `T >= 2`.
pub fn transition_penalty<S: Scalar>(probs: &Tensor<S>, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input_ref(probs);
    let l = g.transition_penalty(p, S::from_f64(lambda))?;
    Ok(g.value(l)[0].as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn examples() {
        let l = bce_loss(&t(&[1, 2], &[0.9, 0.2]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!((l - 0.164252).abs() < 1e-6);
        let l = bce_loss(&t(&[2, 2], &[0.5; 4]), &t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            bce_loss(&t(&[1, 2], &[0.5; 2]), &t(&[2, 1], &[1.0; 2])),
            Err(Error::Dimension(_))
        ));
        assert_eq!(transition_penalty(&t(&[1, 3], &[0.0, 1.0, 0.0]), 1.0).unwrap(), 1.0);
        assert!(transition_penalty(&t(&[1, 1], &[0.0]), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn bce_is_non_negative(
            probs in proptest::collection::vec(0.0f64..=1.0, 1..40),
            seed in any::<u64>(),
        ) {
            let labels: Vec<f64> = (0..probs.len()).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
            let n = probs.len();
            let l = bce_loss(&t(&[1, n], &probs), &t(&[1, n], &labels)).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
        }

        #[test]
        fn bce_at_one_half_is_ln2(bits in proptest::collection::vec(any::<bool>(), 1..40)) {
            let n = bits.len();
            let labels: Vec<f64> = bits.iter().map(|b| *b as u8 as f64).collect();
            let l = bce_loss(&t(&[1, n], &vec![0.5; n]), &t(&[1, n], &labels)).unwrap();
            prop_assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}
