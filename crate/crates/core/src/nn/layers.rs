//! Stateful layers: parameters, accumulated gradients and the activations
//! cached by a training-mode forward pass.

use super::batchnorm::{batchnorm_backward, batchnorm_infer, batchnorm_train, BatchNormState, BnCache, Mode};
use super::conv::{conv2d_backward, conv2d_forward, conv2d_transpose_backward, conv2d_transpose_forward, ConvParams};
use super::{activation, activation_backward, join, Activation, Param, ParamKind, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn missing_cache(what: &str) -> Error {
    Error::State(format!("{what}: backward called without a cached training forward pass"))
}

fn visit_conv<T: Float>(
    params: &mut ConvParams<T>,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Option<Vec<T>>,
    prefix: &str,
    f: &mut dyn FnMut(Param<'_, T>),
) {
    let shape = params.weight.dims().to_vec();
    f(Param {
        name: join(prefix, "weight"),
        kind: ParamKind::Weight,
        shape,
        value: params.weight.as_mut_slice(),
        grad: Some(grad_w.as_mut_slice()),
    });
    if let (Some(b), Some(gb)) = (params.bias.as_mut(), grad_b.as_mut()) {
        f(Param {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            shape: vec![b.len()],
            value: b,
            grad: Some(gb),
        });
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub params: ConvParams<T>,
    grad_w: Tensor<T>,
    grad_b: Option<Vec<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Float> Conv2d<T> {
    pub fn new(params: ConvParams<T>) -> Self {
        Conv2d {
            grad_w: Tensor::zeros(params.weight.dims()),
            grad_b: params.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            params,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = conv2d_forward(x, &self.params)?;
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.params)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("conv2d"))?;
        let g = conv2d_backward(&x, &self.params, grad_out)?;
        self.grad_w.add_assign(&g.weight)?;
        if let (Some(acc), Some(gb)) = (self.grad_b.as_mut(), g.bias) {
            for (a, b) in acc.iter_mut().zip(gb) {
                *a = *a + b;
            }
        }
        Ok(g.input)
    }
}

impl<T: Float> Parameterized<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, T>)) {
        visit_conv(&mut self.params, &mut self.grad_w, &mut self.grad_b, prefix, f);
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub params: ConvParams<T>,
    pub output_padding: usize,
    grad_w: Tensor<T>,
    grad_b: Option<Vec<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Float> ConvTranspose2d<T> {
    pub fn new(params: ConvParams<T>, output_padding: usize) -> Self {
        ConvTranspose2d {
            grad_w: Tensor::zeros(params.weight.dims()),
            grad_b: params.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            params,
            output_padding,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = conv2d_transpose_forward(x, &self.params, self.output_padding)?;
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_transpose_forward(x, &self.params, self.output_padding)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("conv2d_transpose"))?;
        let g = conv2d_transpose_backward(&x, &self.params, self.output_padding, grad_out)?;
        self.grad_w.add_assign(&g.weight)?;
        if let (Some(acc), Some(gb)) = (self.grad_b.as_mut(), g.bias) {
            for (a, b) in acc.iter_mut().zip(gb) {
                *a = *a + b;
            }
        }
        Ok(g.input)
    }
}

impl<T: Float> Parameterized<T> for ConvTranspose2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, T>)) {
        visit_conv(&mut self.params, &mut self.grad_w, &mut self.grad_b, prefix, f);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub state: BatchNormState<T>,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            state: BatchNormState::new(channels),
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                let (y, cache) = batchnorm_train(x, &mut self.state)?;
                self.cache = Some(cache);
                Ok(y)
            }
            Mode::Infer => batchnorm_infer(x, &self.state),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batchnorm_infer(x, &self.state)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        let g = batchnorm_backward(&cache, &self.state, grad_out)?;
        for (a, b) in self.grad_gamma.iter_mut().zip(g.gamma) {
            *a = *a + b;
        }
        for (a, b) in self.grad_beta.iter_mut().zip(g.beta) {
            *a = *a + b;
        }
        Ok(g.input)
    }
}

impl<T: Float> Parameterized<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, T>)) {
        let c = self.state.channels();
        let s = &mut self.state;
        f(Param {
            name: join(prefix, "gamma"),
            kind: ParamKind::Gamma,
            shape: vec![c],
            value: &mut s.gamma,
            grad: Some(&mut self.grad_gamma),
        });
        f(Param {
            name: join(prefix, "beta"),
            kind: ParamKind::Beta,
            shape: vec![c],
            value: &mut s.beta,
            grad: Some(&mut self.grad_beta),
        });
        f(Param {
            name: join(prefix, "running_mean"),
            kind: ParamKind::RunningMean,
            shape: vec![c],
            value: &mut s.running_mean,
            grad: None,
        });
        f(Param {
            name: join(prefix, "running_var"),
            kind: ParamKind::RunningVar,
            shape: vec![c],
            value: &mut s.running_var,
            grad: None,
        });
    }
}

#[derive(Clone, Debug)]
pub struct Act<T> {
    pub kind: Activation,
    cache: Option<Tensor<T>>,
}

impl<T: Float> Act<T> {
    pub fn new(kind: Activation) -> Self {
        Act { kind, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = activation(x, self.kind);
        if mode == Mode::Train {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        activation(x, self.kind)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.cache.take().ok_or_else(|| missing_cache("activation"))?;
        activation_backward(&y, grad_out, self.kind)
    }
}

impl<T: Float> Parameterized<T> for Act<T> {
    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(Param<'_, T>)) {}
}
