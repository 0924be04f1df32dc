//! Per-pixel softmax cross-entropy.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    /// `(N, 1, H, W)` negative log-likelihood of the true class.
    pub loss: Tensor<T>,
    /// `(N, C, H, W)` softmax probabilities.
    pub probs: Tensor<T>,
}

impl<T: Float> CrossEntropy<T> {
    /// `(N, 1, H, W)` probability assigned to the true class.
    pub fn true_class_prob(&self, labels: &[u8]) -> Tensor<T> {
        let [n, c, h, w] = self.probs.dims();
        let plane = h * w;
        Tensor::from_fn([n, 1, h, w], |[a, _, y, x]| {
            let p = y * w + x;
            let k = labels[a * plane + p] as usize;
            self.probs.as_slice()[(a * c + k) * plane + p]
        })
    }
}

/// Converts a `(N, 1, H, W)` tensor of class ids into a flat label vector,
/// rejecting anything that is not an integer in `0..num_classes`.
pub fn labels_from_tensor<T: Float>(labels: &Tensor<T>, num_classes: usize) -> Result<Vec<u8>> {
    if labels.channels() != 1 {
        return Err(shape_err!("labels must have one channel, got {}", labels.channels()));
    }
    labels
        .as_slice()
        .iter()
        .map(|&v| {
            let f = v.to_f64_lossy();
            if f.fract() == 0.0 && f >= 0.0 && (f as usize) < num_classes {
                Ok(f as u8)
            } else {
                Err(Error::Data(format!("label value {f} outside 0..{num_classes}")))
            }
        })
        .collect()
}

pub fn softmax_ce_per_pixel<T: Float>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<CrossEntropy<T>> {
    let [n, c, h, w] = logits.dims();
    if labels.dims() != [n, 1, h, w] {
        return Err(shape_err!(
            "labels {:?} do not match logits {:?}",
            labels.dims(),
            logits.dims()
        ));
    }
    let ids = labels_from_tensor(labels, c)?;
    softmax_ce_with_ids(logits, &ids)
}

pub fn softmax_ce_with_ids<T: Float>(logits: &Tensor<T>, labels: &[u8]) -> Result<CrossEntropy<T>> {
    let [n, c, h, w] = logits.dims();
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(shape_err!("{} labels for {} pixels", labels.len(), n * plane));
    }
    let mut loss = Tensor::zeros([n, 1, h, w]);
    let mut probs = Tensor::zeros(logits.dims());
    let x = logits.as_slice();
    let mut e = vec![T::zero(); c];
    for a in 0..n {
        for p in 0..plane {
            let k = labels[a * plane + p] as usize;
            if k >= c {
                return Err(Error::Data(format!("label {k} outside 0..{c}")));
            }
            let at = |j: usize| x[(a * c + j) * plane + p];
            let (mut best, mut arg) = (at(0), 0);
            for j in 1..c {
                if at(j) > best {
                    best = at(j);
                    arg = j;
                }
            }
            let mut rest = T::zero();
            for (j, ej) in e.iter_mut().enumerate() {
                *ej = (at(j) - best).exp();
                if j != arg {
                    rest = rest + *ej;
                }
            }
            let total = T::one() + rest;
            for (j, &ej) in e.iter().enumerate() {
                probs.as_mut_slice()[(a * c + j) * plane + p] = ej / total;
            }
            // log-sum-exp minus the true logit, with ln_1p keeping tiny
            // losses representable
            let l = (best - at(k)) + rest.ln_1p();
            loss.as_mut_slice()[a * plane + p] = l.max(T::zero());
        }
    }
    Ok(CrossEntropy { loss, probs })
}

/// Gradient of `sum(weights * loss)` with respect to the logits.
pub fn softmax_ce_backward<T: Float>(ce: &CrossEntropy<T>, labels: &[u8], weights: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = ce.probs.dims();
    if weights.dims() != [n, 1, h, w] {
        return Err(shape_err!("pixel weights {:?} do not match {:?}", weights.dims(), ce.probs.dims()));
    }
    let plane = h * w;
    let mut grad = ce.probs.clone();
    for a in 0..n {
        for p in 0..plane {
            let wt = weights.as_slice()[a * plane + p];
            let k = labels[a * plane + p] as usize;
            for j in 0..c {
                let i = (a * c + j) * plane + p;
                let g = grad.as_slice()[i] - if j == k { T::one() } else { T::zero() };
                grad.as_mut_slice()[i] = g * wt;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(l0: f64, l1: f64, label: f64) -> CrossEntropy<f64> {
        let logits = Tensor::from_vec([1, 2, 1, 1], vec![l0, l1]).unwrap();
        let labels = Tensor::from_vec([1, 1, 1, 1], vec![label]).unwrap();
        softmax_ce_per_pixel(&logits, &labels).unwrap()
    }

    #[test]
    fn uniform_is_ln2() {
        assert!((pixel(0.3, 0.3, 1.0).loss.as_slice()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_is_tiny_positive() {
        let l = pixel(10.0, -10.0, 0.0).loss.as_slice()[0];
        assert!(l > 0.0 && (l - 2.0611536e-9).abs() < 1e-15);
        let logits = Tensor::<f32>::from_vec([1, 2, 1, 1], vec![10.0, -10.0]).unwrap();
        let l32 = softmax_ce_with_ids(&logits, &[0]).unwrap().loss.as_slice()[0];
        assert!(l32 > 0.0);
    }

    #[test]
    fn three_to_one_odds() {
        let ce = pixel(0.0, 3f64.ln(), 1.0);
        assert!((ce.loss.as_slice()[0] - 0.2876821).abs() < 1e-6);
        assert!((ce.probs.as_slice()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn invalid_label() {
        let logits = Tensor::<f64>::zeros([1, 2, 1, 1]);
        let labels = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        assert!(matches!(softmax_ce_per_pixel(&logits, &labels), Err(Error::Data(_))));
        let labels = Tensor::from_vec([1, 1, 1, 1], vec![0.5]).unwrap();
        assert!(matches!(softmax_ce_per_pixel(&logits, &labels), Err(Error::Data(_))));
    }
}
