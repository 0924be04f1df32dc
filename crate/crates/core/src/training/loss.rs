use std::cmp::Ordering;

use super::config::{OhemConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// `primary + alpha * sum(aux)`.
pub fn total_loss(primary: f64, aux: &[f64], alpha: f64) -> f64 {
    primary + alpha * aux.iter().sum::<f64>()
}

/// Mean loss over the selected pixels and the selection itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Reduced {
    pub loss: f64,
    pub selected: Vec<bool>,
    pub count: usize,
}

impl Reduced {
    /// `(N, 1, H, W)` weights `scale / count` on selected pixels, for
    /// seeding the cross-entropy backward pass.
    pub fn weights<T: Float>(&self, dims: [usize; 4], scale: f64) -> Tensor<T> {
        let w = T::from_f64_lossy(scale / self.count as f64);
        let mut out = Tensor::zeros(dims);
        for (o, &s) in out.as_mut_slice().iter_mut().zip(&self.selected) {
            if s {
                *o = w;
            }
        }
        out
    }
}

/// Keeps pixels whose true-class probability is below the threshold; when
/// fewer than `min_kept` qualify, keeps the `min_kept` highest-loss pixels
/// instead (ties broken by position). Disabled OHEM keeps every pixel.
pub fn ohem_reduce<T: Float>(loss: &Tensor<T>, true_prob: &Tensor<T>, cfg: &OhemConfig) -> Result<Reduced> {
    loss.expect_same_dims(true_prob)?;
    let n = loss.len();
    if n == 0 {
        return Err(Error::Data("OHEM over an empty loss tensor".into()));
    }
    let l = loss.as_slice();
    let mut selected = vec![!cfg.enabled; n];
    if cfg.enabled {
        let thresh = T::from_f64_lossy(cfg.prob_thresh);
        let mut count = 0;
        for (s, &p) in selected.iter_mut().zip(true_prob.as_slice()) {
            if p < thresh {
                *s = true;
                count += 1;
            }
        }
        if count < cfg.min_kept {
            let k = cfg.min_kept.min(n);
            let mut order: Vec<usize> = (0..n).collect();
            let by_loss = |a: &usize, b: &usize| l[*b].partial_cmp(&l[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b));
            if k < n {
                order.select_nth_unstable_by(k - 1, by_loss);
            }
            selected.fill(false);
            for &i in &order[..k] {
                selected[i] = true;
            }
        }
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (&s, &v) in selected.iter().zip(l) {
        if s {
            sum += v.to_f64_lossy();
            count += 1;
        }
    }
    Ok(Reduced {
        loss: sum / count as f64,
        selected,
        count,
    })
}

/// Linear warmup to `base_lr`, then polynomial decay to zero at `max_iters`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter < cfg.warmup_iters {
        return cfg.base_lr * (iter + 1) as f64 / cfg.warmup_iters as f64;
    }
    if iter >= cfg.max_iters {
        return 0.0;
    }
    cfg.base_lr * (1.0 - iter as f64 / cfg.max_iters as f64).powf(cfg.lr_power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    fn ohem(thresh: f64, min_kept: usize) -> OhemConfig {
        OhemConfig {
            enabled: true,
            prob_thresh: thresh,
            min_kept,
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, &[0.4, 0.6], 0.5), 1.5);
        assert_eq!(total_loss(0.7, &[0.4, 0.6], 0.0), 0.7);
        assert_eq!(total_loss(0.7, &[], 0.5), 0.7);
    }

    #[test]
    fn ohem_threshold() {
        let p = row(&[0.9, 0.6, 0.5]);
        let l = p.map(|v| -v.ln());
        let r = ohem_reduce(&l, &p, &ohem(0.7, 1)).unwrap();
        assert_eq!(r.selected, vec![false, true, true]);
        assert!((r.loss - (-(0.6f64.ln()) - 0.5f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ohem_top_k_fallback() {
        let r = ohem_reduce(&row(&[3.0, 1.0, 2.0]), &row(&[0.99; 3]), &ohem(0.7, 2)).unwrap();
        assert_eq!(r.selected, vec![true, false, true]);
        assert_eq!(r.loss, 2.5);
    }

    #[test]
    fn ohem_degenerates_to_mean() {
        let l = row(&[1.0, 2.0, 6.0]);
        let r = ohem_reduce(&l, &row(&[0.99; 3]), &ohem(0.7, 3)).unwrap();
        assert_eq!((r.count, r.loss), (3, 3.0));
        let off = OhemConfig {
            enabled: false,
            ..ohem(0.7, 1)
        };
        assert_eq!(ohem_reduce(&l, &row(&[0.1; 3]), &off).unwrap().loss, 3.0);
    }

    #[test]
    fn weights_sum_to_scale() {
        let r = ohem_reduce(&row(&[3.0, 1.0, 2.0, 0.5]), &row(&[0.99; 4]), &ohem(0.7, 3)).unwrap();
        let w: Tensor<f64> = r.weights([1, 1, 1, 4], 0.5);
        assert!((w.sum() - 0.5).abs() < 1e-15);
        assert_eq!(w.as_slice()[3], 0.0);
    }

    #[test]
    fn poly_examples() {
        let cfg = TrainConfig {
            max_iters: 1000,
            warmup_iters: 0,
            ..TrainConfig::default()
        };
        assert_eq!(poly_lr(1000, &cfg), 0.0);
        assert!((poly_lr(500, &cfg) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((poly_lr(500, &cfg) - 0.005359).abs() < 1e-6);
        let warm = TrainConfig {
            warmup_iters: 100,
            ..cfg
        };
        assert_eq!(poly_lr(99, &warm), warm.base_lr);
        assert_eq!(poly_lr(0, &warm), warm.base_lr / 100.0);
    }

    proptest! {
        #[test]
        fn ohem_keeps_at_least_min(
            probs in prop::collection::vec(0.0f64..1.0, 1..200),
            thresh in 0.01f64..1.0,
            min_kept in 1usize..300,
        ) {
            let p = row(&probs);
            let l = p.map(|v| -(v.max(1e-12)).ln());
            let r = ohem_reduce(&l, &p, &ohem(thresh, min_kept)).unwrap();
            prop_assert!(r.count >= min_kept.min(probs.len()));
            prop_assert_eq!(r.count, r.selected.iter().filter(|&&s| s).count());
            prop_assert!(r.loss.is_finite() && r.loss >= 0.0);
        }

        #[test]
        fn poly_monotone_and_positive(max in 2usize..5000, warm_frac in 0.0f64..0.9, power in 0.1f64..3.0) {
            let cfg = TrainConfig {
                max_iters: max,
                warmup_iters: (max as f64 * warm_frac) as usize,
                lr_power: power,
                ..TrainConfig::default()
            };
            let mut prev = f64::INFINITY;
            for it in 0..max {
                let lr = poly_lr(it, &cfg);
                prop_assert!(lr > 0.0);
                if it >= cfg.warmup_iters {
                    prop_assert!(lr <= prev);
                    prev = lr;
                }
            }
            prop_assert_eq!(poly_lr(max, &cfg), 0.0);
        }
    }
}
