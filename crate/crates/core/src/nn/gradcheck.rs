//! Central finite-difference validation of analytic gradients.
//!
//! The scalar objective is `sum(r * forward(x))` for a fixed random `r`, so
//! the analytic side is a single backward pass seeded with `r`. Entries whose
//! `±h` perturbation flips any ReLU on/off pattern are skipped: the finite
//! difference straddles a kink there and says nothing about the derivative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::activation::kink_probe;
use super::batchnorm::Mode;
use super::layers::{Act, BatchNorm2d, Conv2d, ConvTranspose2d};
use super::{
    bilinear_resize, bilinear_resize_backward, fuse, fuse_backward, join, softmax_ce_backward, softmax_ce_with_ids,
    FuseMode, Param, ParamKind, Parameterized,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;

/// A layer that can be driven by the finite-difference harness.
pub trait Differentiable: Parameterized<f64> {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>>;
    /// Returns the input gradient and accumulates parameter gradients.
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Entry holding the maximum error.
    pub worst: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-8)
}

fn objective<L: Differentiable + ?Sized>(layer: &mut L, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<(f64, u64)> {
    kink_probe::start();
    let out = layer.forward(x);
    let fp = kink_probe::finish();
    let out = out?;
    out.expect_same_dims(r)?;
    let v: f64 = out.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum();
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite objective during gradient check".into()));
    }
    Ok((v, fp))
}

fn flat_values<L: Differentiable + ?Sized>(layer: &mut L) -> Vec<(String, Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    layer.visit_params("", &mut |p: Param<'_, f64>| {
        if let Some(g) = p.grad {
            out.push((p.name, p.value.to_vec(), g.to_vec()));
        }
    });
    out
}

fn write_entry<L: Differentiable + ?Sized>(layer: &mut L, slot: usize, idx: usize, v: f64) {
    let mut i = 0;
    layer.visit_params("", &mut |p: Param<'_, f64>| {
        if p.grad.is_some() {
            if i == slot {
                p.value[idx] = v;
            }
            i += 1;
        }
    });
}

fn zero_grads<L: Differentiable + ?Sized>(layer: &mut L) {
    layer.visit_params("", &mut |p: Param<'_, f64>| {
        if let Some(g) = p.grad {
            g.fill(0.0);
        }
    });
}

/// Compares analytic gradients of every learnable parameter and every input
/// entry against central differences with step [`STEP`].
pub fn grad_check<L: Differentiable + ?Sized>(
    layer: &mut L,
    input_dims: [usize; 4],
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(input_dims, |_| rng.random_range(-1.0..1.0));
    let out = layer.forward(&x)?;
    let r = Tensor::from_fn(out.dims(), |_| rng.random_range(-1.0..1.0));
    zero_grads(layer);
    let dx = layer.backward(&r)?;
    if !dx.all_finite() {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    let params = flat_values(layer);
    if params.iter().any(|(_, _, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite parameter gradient".into()));
    }
    let (_, base_fp) = objective(layer, &x, &r)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped_kinks: 0,
        tolerance,
    };
    let record = |report: &mut GradCheckReport, name: String, a: f64, plus: (f64, u64), minus: (f64, u64)| {
        if plus.1 != base_fp || minus.1 != base_fp {
            report.skipped_kinks += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * STEP);
        let e = rel_error(a, numeric);
        report.checked += 1;
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = format!("{name} (analytic {a:.6e}, numeric {numeric:.6e})");
        }
    };

    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[i] += STEP;
        let plus = objective(layer, &xp, &r)?;
        xp.as_mut_slice()[i] -= 2.0 * STEP;
        let minus = objective(layer, &xp, &r)?;
        record(&mut report, format!("input[{i}]"), dx.as_slice()[i], plus, minus);
    }
    for (slot, (name, values, grads)) in params.iter().enumerate() {
        for (j, &v) in values.iter().enumerate() {
            write_entry(layer, slot, j, v + STEP);
            let plus = objective(layer, &x, &r)?;
            write_entry(layer, slot, j, v - STEP);
            let minus = objective(layer, &x, &r)?;
            write_entry(layer, slot, j, v);
            record(&mut report, format!("{name}[{j}]"), grads[j], plus, minus);
        }
    }
    Ok(report)
}

impl Differentiable for Conv2d<f64> {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        Conv2d::forward(self, input, Mode::Train)
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        Conv2d::backward(self, grad_out)
    }
}

impl Differentiable for ConvTranspose2d<f64> {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        ConvTranspose2d::forward(self, input, Mode::Train)
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        ConvTranspose2d::backward(self, grad_out)
    }
}

impl Differentiable for BatchNorm2d<f64> {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        BatchNorm2d::forward(self, input, Mode::Train)
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        BatchNorm2d::backward(self, grad_out)
    }
}

impl Differentiable for Act<f64> {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Act::forward(self, input, Mode::Train))
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        Act::backward(self, grad_out)
    }
}

/// Bilinear resize to a fixed output size.
pub struct ResizeLayer {
    pub out_h: usize,
    pub out_w: usize,
    in_hw: Option<(usize, usize)>,
}

impl ResizeLayer {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        ResizeLayer { out_h, out_w, in_hw: None }
    }
}

impl Parameterized<f64> for ResizeLayer {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(Param<'_, f64>)) {}
}

impl Differentiable for ResizeLayer {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.in_hw = Some((input.height(), input.width()));
        Ok(bilinear_resize(input, self.out_h, self.out_w))
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (h, w) = self.in_hw.ok_or_else(|| Error::State("resize: no cached forward".into()))?;
        Ok(bilinear_resize_backward(grad_out, h, w))
    }
}

/// Fuses the input with a learnable second operand of the same extents.
pub struct FuseLayer {
    pub mode: FuseMode,
    pub operand: Tensor<f64>,
    grad: Tensor<f64>,
    cache: Option<Tensor<f64>>,
}

impl FuseLayer {
    pub fn new(mode: FuseMode, operand: Tensor<f64>) -> Self {
        FuseLayer {
            mode,
            grad: Tensor::zeros(operand.dims()),
            operand,
            cache: None,
        }
    }
}

impl Parameterized<f64> for FuseLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, f64>)) {
        f(Param {
            name: join(prefix, "operand"),
            kind: ParamKind::Operand,
            shape: self.operand.dims().to_vec(),
            value: self.operand.as_mut_slice(),
            grad: Some(self.grad.as_mut_slice()),
        });
    }
}

impl Differentiable for FuseLayer {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.cache = Some(input.clone());
        fuse(input, &self.operand, self.mode)
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        let x = self.cache.take().ok_or_else(|| Error::State("fuse: no cached forward".into()))?;
        let (gx, gs) = fuse_backward(&x, &self.operand, grad_out, self.mode)?;
        self.grad.add_assign(&gs)?;
        Ok(gx)
    }
}

/// Per-pixel cross-entropy against fixed labels; the input is the logits.
pub struct CrossEntropyLayer {
    pub labels: Vec<u8>,
    cache: Option<super::CrossEntropy<f64>>,
}

impl CrossEntropyLayer {
    pub fn new(labels: Vec<u8>) -> Self {
        CrossEntropyLayer { labels, cache: None }
    }
}

impl Parameterized<f64> for CrossEntropyLayer {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(Param<'_, f64>)) {}
}

impl Differentiable for CrossEntropyLayer {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        let ce = softmax_ce_with_ids(input, &self.labels)?;
        let loss = ce.loss.clone();
        self.cache = Some(ce);
        Ok(loss)
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        let ce = self.cache.take().ok_or_else(|| Error::State("cross-entropy: no cached forward".into()))?;
        softmax_ce_backward(&ce, &self.labels, grad_out)
    }
}

/// conv -> BN -> ReLU -> fuse(sum) with a learnable second operand.
pub struct ComposedBlock {
    pub conv: Conv2d<f64>,
    pub bn: BatchNorm2d<f64>,
    pub act: Act<f64>,
    pub fuse: FuseLayer,
}

impl Parameterized<f64> for ComposedBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, f64>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
        self.fuse.visit_params(&join(prefix, "fuse"), f);
    }
}

impl Differentiable for ComposedBlock {
    fn forward(&mut self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        let y = self.conv.forward(input, Mode::Train)?;
        let y = self.bn.forward(&y, Mode::Train)?;
        let y = self.act.forward(&y, Mode::Train);
        Differentiable::forward(&mut self.fuse, &y)
    }
    fn backward(&mut self, grad_out: &Tensor<f64>) -> Result<Tensor<f64>> {
        let g = Differentiable::backward(&mut self.fuse, grad_out)?;
        let g = self.act.backward(&g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ConvParams};

    fn random(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_gradients() {
        let p = ConvParams::new(random([3, 2, 3, 3], 1), Some(vec![0.1, -0.2, 0.3]), 1, 1).unwrap();
        let r = grad_check(&mut Conv2d::new(p), [1, 2, 5, 5], 1e-4, 7).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.checked > 50);
    }

    #[test]
    fn strided_conv_gradients() {
        let p = ConvParams::new(random([2, 3, 3, 3], 2), None, 2, 1).unwrap();
        let r = grad_check(&mut Conv2d::new(p), [2, 3, 6, 5], 1e-4, 8).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn batchnorm_gradients() {
        let mut bn = BatchNorm2d::new(3);
        bn.state.gamma = vec![1.5, 0.7, -0.4];
        bn.state.beta = vec![0.1, 0.2, 0.3];
        let r = grad_check(&mut bn, [2, 3, 4, 4], 1e-4, 3).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        struct Broken;
        impl Parameterized<f64> for Broken {
            fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(Param<'_, f64>)) {}
        }
        impl Differentiable for Broken {
            fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
                Ok(x.map(|v| v * v))
            }
            fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
                Ok(g.clone())
            }
        }
        let r = grad_check(&mut Broken, [1, 1, 2, 2], 1e-4, 1).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn relu_skips_nothing_away_from_kinks() {
        let r = grad_check(&mut Act::new(Activation::Relu), [1, 2, 3, 3], 1e-4, 5).unwrap();
        assert!(r.passed() && r.skipped_kinks == 0, "{r:?}");
    }
}
