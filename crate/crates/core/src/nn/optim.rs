use crate::error::{shape_err, Result};
use crate::tensor::Float;

/// One SGD step with heavy-ball momentum and L2 weight decay folded into
/// the gradient.
pub fn sgd_momentum_step<T: Float>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(shape_err!(
            "sgd: param/grad/velocity lengths {}/{}/{} differ",
            param.len(),
            grad.len(),
            velocity.len()
        ));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_keeps_param() {
        let (mut p, mut v) = ([1.5f64, -2.0], [0.3, 0.1]);
        sgd_momentum_step(&mut p, &[4.0, 5.0], &mut v, 0.0, 0.9, 5e-4).unwrap();
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn two_step_recursion() {
        let (mut p, mut v) = ([1.0f64], [0.0]);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12 && (p[0] - 0.9).abs() < 1e-12);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-12 && (p[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn decay_only() {
        let (mut p, mut v) = ([1.0f64], [0.0]);
        sgd_momentum_step(&mut p, &[0.0], &mut v, 0.01, 0.9, 5e-4).unwrap();
        assert!((p[0] - 0.999995).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        let (mut p, mut v) = ([1.0f32, 2.0], [0.0]);
        assert!(sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).is_err());
    }
}
