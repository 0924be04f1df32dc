//! Tensor kernels with forward and gradient contracts, plus the stateful
//! layer wrappers the network is assembled from.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod fuse;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod resize;

pub use activation::{activation, activation_backward, Activation};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, batchnorm_infer, batchnorm_train, BatchNormState, Mode};
pub use conv::{
    conv2d_backward, conv2d_forward, conv2d_transpose_backward, conv2d_transpose_forward, ConvGrads, ConvParams,
};
pub use fuse::{fuse, fuse_backward, FuseMode};
pub use gradcheck::{grad_check, Differentiable, GradCheckReport};
pub use layers::{Act, BatchNorm2d, Conv2d, ConvTranspose2d};
pub use loss::{softmax_ce_backward, softmax_ce_per_pixel, softmax_ce_with_ids, CrossEntropy};
pub use optim::sgd_momentum_step;
pub use resize::{bilinear_resize, bilinear_resize_backward};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
    /// Free tensor operand, used only by gradient-check wrappers.
    Operand,
}

impl ParamKind {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
            ParamKind::Operand => "operand",
        }
    }

    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Borrowed view of one named tensor in a layer's registry.
pub struct Param<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: &'a mut [T],
    /// `None` for non-learnable state such as running statistics.
    pub grad: Option<&'a mut [T]>,
}

pub trait Parameterized<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(Param<'_, T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
