use crate::error::Result;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Fingerprint of every ReLU on/off pattern seen while enabled. Finite
/// difference checks use it to detect steps that cross a kink.
pub mod kink_probe {
    use std::cell::Cell;

    thread_local! {
        static STATE: Cell<Option<u64>> = const { Cell::new(None) };
    }

    pub fn start() {
        STATE.with(|s| s.set(Some(0xcbf2_9ce4_8422_2325)));
    }

    /// Stops recording and returns the fingerprint.
    pub fn finish() -> u64 {
        STATE.with(|s| s.take().unwrap_or(0))
    }

    pub(crate) fn record(bits: impl Iterator<Item = bool>) {
        STATE.with(|s| {
            if let Some(mut h) = s.get() {
                for b in bits {
                    h ^= b as u64 + 1;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
                s.set(Some(h));
            }
        });
    }
}

pub fn activation<T: Float>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let out = match kind {
        Activation::Relu => {
            kink_probe::record(input.as_slice().iter().map(|&v| v > T::zero()));
            input.map(|v| if v > T::zero() { v } else { T::zero() })
        }
        Activation::Sigmoid => input.map(sigmoid),
    };
    out
}

#[inline]
fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradient through an activation, expressed in terms of its forward output.
pub fn activation_backward<T: Float>(output: &Tensor<T>, grad_out: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    match kind {
        Activation::Relu => output.zip_map(grad_out, |y, g| if y > T::zero() { g } else { T::zero() }),
        Activation::Sigmoid => output.zip_map(grad_out, |y, g| g * y * (T::one() - y)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_values() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let y = activation(&x, Activation::Sigmoid);
        assert_eq!(y.as_slice()[0], 0.5);
        assert!((y.as_slice()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![-1e4, 1e4]).unwrap();
        let y = activation(&x, Activation::Sigmoid);
        assert_eq!(y.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn probe_sees_sign_changes() {
        let a = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![-1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        kink_probe::start();
        activation(&a, Activation::Relu);
        let fa = kink_probe::finish();
        kink_probe::start();
        activation(&a.map(|v| v * 2.0), Activation::Relu);
        assert_eq!(kink_probe::finish(), fa);
        kink_probe::start();
        activation(&b, Activation::Relu);
        assert_ne!(kink_probe::finish(), fa);
    }
}
