//! Per-channel batch normalization.

use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    /// Weight kept by the running statistics on each update.
    pub momentum: T,
}

impl<T: Float> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::from_f64_lossy(DEFAULT_EPSILON),
            momentum: T::from_f64_lossy(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, input: &Tensor<T>) -> Result<()> {
        let c = self.channels();
        if input.channels() != c
            || self.beta.len() != c
            || self.running_mean.len() != c
            || self.running_var.len() != c
        {
            return Err(shape_err!(
                "batchnorm: input has {} channels, state has {c}",
                input.channels()
            ));
        }
        Ok(())
    }
}

/// Saved activations for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn batchnorm_train<T: Float>(input: &Tensor<T>, s: &mut BatchNormState<T>) -> Result<(Tensor<T>, BnCache<T>)> {
    s.check(input)?;
    let [n, c, _, _] = input.dims();
    let plane = input.plane();
    let count = T::from_usize(n * plane).unwrap();
    let mut out = Tensor::zeros(input.dims());
    let mut normalized = Tensor::zeros(input.dims());
    let mut inv_std = vec![T::zero(); c];
    let data = input.as_slice();
    for ch in 0..c {
        let planes = (0..n).map(|i| (i * c + ch) * plane);
        let mean = planes
            .clone()
            .map(|o| data[o..o + plane].iter().copied().sum::<T>())
            .sum::<T>()
            / count;
        let var = planes
            .clone()
            .map(|o| {
                data[o..o + plane]
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
            })
            .sum::<T>()
            / count;
        let istd = T::one() / (var + s.epsilon).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (s.gamma[ch], s.beta[ch]);
        for o in planes {
            for i in o..o + plane {
                let xh = (data[i] - mean) * istd;
                normalized.as_mut_slice()[i] = xh;
                out.as_mut_slice()[i] = g * xh + b;
            }
        }
        let keep = s.momentum;
        s.running_mean[ch] = keep * s.running_mean[ch] + (T::one() - keep) * mean;
        s.running_var[ch] = keep * s.running_var[ch] + (T::one() - keep) * var;
    }
    Ok((out, BnCache { normalized, inv_std }))
}

pub fn batchnorm_infer<T: Float>(input: &Tensor<T>, s: &BatchNormState<T>) -> Result<Tensor<T>> {
    s.check(input)?;
    let [_, c, _, _] = input.dims();
    let plane = input.plane();
    let scale: Vec<T> = (0..c)
        .map(|ch| s.gamma[ch] / (s.running_var[ch] + s.epsilon).sqrt())
        .collect();
    let mut out = input.clone();
    for (p, chunk) in out.as_mut_slice().chunks_mut(plane).enumerate() {
        let ch = p % c;
        let (m, k, b) = (s.running_mean[ch], scale[ch], s.beta[ch]);
        for v in chunk {
            *v = (*v - m) * k + b;
        }
    }
    Ok(out)
}

pub fn batchnorm_forward<T: Float>(input: &Tensor<T>, s: &mut BatchNormState<T>, mode: Mode) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => batchnorm_train(input, s).map(|(out, _)| out),
        Mode::Infer => batchnorm_infer(input, s),
    }
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_backward<T: Float>(cache: &BnCache<T>, s: &BatchNormState<T>, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
    cache.normalized.expect_same_dims(grad_out)?;
    let [n, c, _, _] = grad_out.dims();
    let plane = grad_out.plane();
    let count = T::from_usize(n * plane).unwrap();
    let dy = grad_out.as_slice();
    let xh = cache.normalized.as_slice();
    let mut grad_in = Tensor::zeros(grad_out.dims());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let planes = (0..n).map(|i| (i * c + ch) * plane);
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for o in planes.clone() {
            for i in o..o + plane {
                sg = sg + dy[i] * xh[i];
                sb = sb + dy[i];
            }
        }
        dgamma[ch] = sg;
        dbeta[ch] = sb;
        let k = s.gamma[ch] * cache.inv_std[ch] / count;
        for o in planes {
            for i in o..o + plane {
                grad_in.as_mut_slice()[i] = k * (count * dy[i] - sb - xh[i] * sg);
            }
        }
    }
    Ok(BnGrads {
        input: grad_in,
        gamma: dgamma,
        beta: dbeta,
    })
}
