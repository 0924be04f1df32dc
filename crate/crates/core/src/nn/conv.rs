//! Cross-correlation convolution and transposed convolution over NCHW
//! tensors, lowered to GEMM through im2col.

use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor};

/// Thread-local multiply-accumulate counter fed by every convolution
/// forward pass. Used to instrument the executor.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static COUNT: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        COUNT.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        COUNT.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        COUNT.with(|c| c.set(c.get() + n));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `(C_out, C_in, k, k)` for convolution; `(C_in, C_out, k, k)` for
    /// transposed convolution.
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Float> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Vec<T>>, stride: usize, padding: usize) -> Result<Self> {
        let [_, _, kh, kw] = weight.dims();
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err!("kernel must be square with odd size, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(shape_err!("stride must be positive"));
        }
        // Bias length depends on whether the weight is used for a plain or a
        // transposed convolution; it is validated at call time.
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(len: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    let full = (len - 1) * stride + k + out_pad;
    full.checked_sub(2 * pad).filter(|&v| v >= 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Float>(src: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &Geometry, dst: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let plane_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane_row[ix as usize] = plane_row[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Float>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<(Geometry, usize)> {
    let [_, c, h, w] = input.dims();
    let [c_out, c_in, k, _] = p.weight.dims();
    if c != c_in {
        return Err(shape_err!("conv2d: input has {c} channels, weight expects {c_in}"));
    }
    if let Some(b) = &p.bias {
        if b.len() != c_out {
            return Err(shape_err!("conv2d: bias length {} != C_out {c_out}", b.len()));
        }
    }
    let (oh, ow) = match (
        conv_out_len(h, k, p.stride, p.padding),
        conv_out_len(w, k, p.stride, p.padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(shape_err!(
                "conv2d: zero-sized output for {h}x{w} input, k={k}, stride={}, pad={}",
                p.stride,
                p.padding
            ))
        }
    };
    Ok((
        Geometry {
            c,
            h,
            w,
            k,
            stride: p.stride,
            pad: p.padding,
            oh,
            ow,
        },
        c_out,
    ))
}

pub fn conv2d_forward<T: Float>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (g, c_out) = conv_geometry(input, p)?;
    let n = input.batch();
    let mut out = Tensor::zeros([n, c_out, g.oh, g.ow]);
    let (rows, cols) = (g.rows(), g.cols());
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    let weight = p.weight.as_slice();
    for item in 0..n {
        let src = input.item(item);
        let col_ref: &[T] = if g.is_pointwise() {
            src
        } else {
            im2col(src, &g, &mut col);
            &col
        };
        let dst = out.item_mut(item);
        T::gemm(
            c_out,
            rows,
            cols,
            T::one(),
            weight,
            (rows as isize, 1),
            col_ref,
            (cols as isize, 1),
            T::zero(),
            dst,
            (cols as isize, 1),
        );
        if let Some(bias) = &p.bias {
            for (co, &b) in bias.iter().enumerate() {
                for v in &mut dst[co * cols..(co + 1) * cols] {
                    *v = *v + b;
                }
            }
        }
    }
    macs::add((n * c_out * rows * cols) as u64);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Float>(input: &Tensor<T>, p: &ConvParams<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (g, c_out) = conv_geometry(input, p)?;
    let n = input.batch();
    if grad_out.dims() != [n, c_out, g.oh, g.ow] {
        return Err(shape_err!(
            "conv2d backward: upstream gradient {:?} != output {:?}",
            grad_out.dims(),
            [n, c_out, g.oh, g.ow]
        ));
    }
    let (rows, cols) = (g.rows(), g.cols());
    let mut grad_in = Tensor::zeros(input.dims());
    let mut grad_w = Tensor::zeros(p.weight.dims());
    let mut grad_b = p.bias.as_ref().map(|_| vec![T::zero(); c_out]);
    let mut col = vec![T::zero(); rows * cols];
    let mut gcol = vec![T::zero(); rows * cols];
    let weight = p.weight.as_slice();
    for item in 0..n {
        let gout = grad_out.item(item);
        let col_ref: &[T] = if g.is_pointwise() {
            input.item(item)
        } else {
            im2col(input.item(item), &g, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(
            c_out,
            cols,
            rows,
            T::one(),
            gout,
            (cols as isize, 1),
            col_ref,
            (1, cols as isize),
            T::one(),
            grad_w.as_mut_slice(),
            (rows as isize, 1),
        );
        // dcol = W^T * dY
        let gin = grad_in.item_mut(item);
        if g.is_pointwise() {
            T::gemm(
                rows,
                c_out,
                cols,
                T::one(),
                weight,
                (1, rows as isize),
                gout,
                (cols as isize, 1),
                T::zero(),
                gin,
                (cols as isize, 1),
            );
        } else {
            T::gemm(
                rows,
                c_out,
                cols,
                T::one(),
                weight,
                (1, rows as isize),
                gout,
                (cols as isize, 1),
                T::zero(),
                &mut gcol,
                (cols as isize, 1),
            );
            col2im(&gcol, &g, gin);
        }
        if let Some(gb) = grad_b.as_mut() {
            for (co, b) in gb.iter_mut().enumerate() {
                *b = *b + gout[co * cols..(co + 1) * cols].iter().copied().sum::<T>();
            }
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

/// Geometry of the zero-inserted input a transposed convolution is lowered
/// onto: `(leading pad, trailing pad)` per axis after stride dilation.
fn transpose_pads(k: usize, pad: usize, out_pad: usize, stride: usize) -> Result<(usize, usize)> {
    if pad > k - 1 {
        return Err(shape_err!("conv2d_transpose: padding {pad} exceeds kernel-1 ({})", k - 1));
    }
    if out_pad >= stride {
        return Err(shape_err!(
            "conv2d_transpose: output padding {out_pad} must be smaller than stride {stride}"
        ));
    }
    let lead = k - 1 - pad;
    Ok((lead, lead + out_pad))
}

fn dilate<T: Float>(input: &Tensor<T>, stride: usize, lead: usize, trail: usize) -> Tensor<T> {
    let [n, c, h, w] = input.dims();
    let dh = (h - 1) * stride + 1 + lead + trail;
    let dw = (w - 1) * stride + 1 + lead + trail;
    let mut out = Tensor::zeros([n, c, dh, dw]);
    for a in 0..n {
        for b in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set([a, b, lead + y * stride, lead + x * stride], input.get([a, b, y, x]));
                }
            }
        }
    }
    out
}

fn undilate<T: Float>(grad: &Tensor<T>, dims: [usize; 4], stride: usize, lead: usize) -> Tensor<T> {
    Tensor::from_fn(dims, |[a, b, y, x]| grad.get([a, b, lead + y * stride, lead + x * stride]))
}

/// `(C_in, C_out, k, k)` transposed-conv weight to the equivalent
/// `(C_out, C_in, k, k)` spatially flipped convolution weight. The mapping
/// is its own inverse up to the axis swap.
fn flip_transpose<T: Float>(w: &Tensor<T>) -> Tensor<T> {
    let [a, b, k, _] = w.dims();
    Tensor::from_fn([b, a, k, k], |[o, i, y, x]| w.get([i, o, k - 1 - y, k - 1 - x]))
}

fn transpose_setup<T: Float>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    output_padding: usize,
) -> Result<(ConvParams<T>, usize, usize)> {
    let [_, c, h, w] = input.dims();
    let [c_in, c_out, k, _] = p.weight.dims();
    if c != c_in {
        return Err(shape_err!("conv2d_transpose: input has {c} channels, weight expects {c_in}"));
    }
    if let Some(b) = &p.bias {
        if b.len() != c_out {
            return Err(shape_err!("conv2d_transpose: bias length {} != C_out {c_out}", b.len()));
        }
    }
    let (lead, trail) = transpose_pads(k, p.padding, output_padding, p.stride)?;
    if conv_transpose_out_len(h, k, p.stride, p.padding, output_padding).is_none()
        || conv_transpose_out_len(w, k, p.stride, p.padding, output_padding).is_none()
    {
        return Err(shape_err!("conv2d_transpose: empty output for {h}x{w} input"));
    }
    let equiv = ConvParams {
        weight: flip_transpose(&p.weight),
        bias: p.bias.clone(),
        stride: 1,
        padding: 0,
    };
    Ok((equiv, lead, trail))
}

/// Transposed convolution, realised as a stride-1 convolution over the
/// zero-inserted input. Its output is the input-gradient of [`conv2d_forward`]
/// under the same weight tensor.
pub fn conv2d_transpose_forward<T: Float>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let (equiv, lead, trail) = transpose_setup(input, p, output_padding)?;
    let dilated = dilate(input, p.stride, lead, trail);
    conv2d_forward(&dilated, &equiv)
}

pub fn conv2d_transpose_backward<T: Float>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    output_padding: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (equiv, lead, trail) = transpose_setup(input, p, output_padding)?;
    let dilated = dilate(input, p.stride, lead, trail);
    let g = conv2d_backward(&dilated, &equiv, grad_out)?;
    Ok(ConvGrads {
        input: undilate(&g.input, input.dims(), p.stride, lead),
        weight: flip_transpose(&g.weight),
        bias: g.bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct sliding-window reference.
    fn naive_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.dims();
        let [co, _, k, _] = p.weight.dims();
        let oh = (h + 2 * p.padding - k) / p.stride + 1;
        let ow = (w + 2 * p.padding - k) / p.stride + 1;
        Tensor::from_fn([n, co, oh, ow], |[a, o, y, xo]| {
            let mut s = p.bias.as_ref().map_or(0.0, |b| b[o]);
            for i in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * p.stride + ky) as isize - p.padding as isize;
                        let ix = (xo * p.stride + kx) as isize - p.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            s += x.get([a, i, iy as usize, ix as usize]) * p.weight.get([o, i, ky, kx]);
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let p = ConvParams::new(Tensor::full([1, 1, 1, 1], 1.0), None, 1, 0).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_window_counts() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let p = ConvParams::new(Tensor::full([1, 1, 3, 3], 1.0), None, 1, 1).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(y.as_slice(), &expect);
    }

    #[test]
    fn stem_shape() {
        let x = Tensor::<f32>::zeros([1, 3, 400, 400]);
        let p = ConvParams::new(Tensor::zeros([16, 3, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap().dims(), [1, 16, 200, 200]);
    }

    #[test]
    fn errors() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let p = ConvParams::new(Tensor::zeros([1, 3, 3, 3]), None, 1, 1).unwrap();
        assert!(matches!(conv2d_forward(&x, &p), Err(crate::Error::Shape(_))));
        let x = Tensor::<f32>::zeros([1, 3, 1, 1]);
        let p = ConvParams::new(Tensor::zeros([1, 3, 3, 3]), None, 1, 0).unwrap();
        assert!(matches!(conv2d_forward(&x, &p), Err(crate::Error::Shape(_))));
        assert!(ConvParams::<f32>::new(Tensor::zeros([1, 1, 2, 2]), None, 1, 0).is_err());
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = random([2, 3, 7, 6], &mut rng);
            let w = random([4, 3, k, k], &mut rng);
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = ConvParams::new(w, Some(b), stride, pad).unwrap();
            let got = conv2d_forward(&x, &p).unwrap();
            let want = naive_conv(&x, &p);
            assert_eq!(got.dims(), want.dims());
            for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_head_shape() {
        let x = Tensor::<f32>::zeros([1, 4, 100, 100]);
        let p = ConvParams::new(Tensor::zeros([4, 4, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(conv2d_transpose_forward(&x, &p, 1).unwrap().dims(), [1, 4, 200, 200]);
    }

    #[test]
    fn transpose_identity() {
        let x = Tensor::<f32>::full([1, 1, 1, 1], 1.0);
        let p = ConvParams::new(Tensor::full([1, 1, 1, 1], 1.0), None, 1, 0).unwrap();
        assert_eq!(conv2d_transpose_forward(&x, &p, 0).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn transpose_rejects_illegal_geometry() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let p = ConvParams::new(Tensor::zeros([1, 1, 3, 3]), None, 2, 1).unwrap();
        assert!(conv2d_transpose_forward(&x, &p, 2).is_err());
        let p = ConvParams::new(Tensor::zeros([1, 1, 3, 3]), None, 2, 3).unwrap();
        assert!(conv2d_transpose_forward(&x, &p, 1).is_err());
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // conv maps 3 -> 2 channels on 8x8; its input-gradient lives on 8x8.
        let w = Tensor::<f32>::from_fn([2, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let conv = ConvParams::new(w.clone(), None, 2, 1).unwrap();
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let upstream = Tensor::<f32>::from_fn([1, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let grads = conv2d_backward(&x, &conv, &upstream).unwrap();
        let tconv = ConvParams::new(w, None, 2, 1).unwrap();
        let y = conv2d_transpose_forward(&upstream, &tconv, 1).unwrap();
        assert_eq!(y.dims(), grads.input.dims());
        for (a, b) in y.as_slice().iter().zip(grads.input.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mac_counter_tracks_forward() {
        macs::reset();
        let x = Tensor::<f32>::zeros([2, 3, 8, 8]);
        let p = ConvParams::new(Tensor::zeros([4, 3, 3, 3]), None, 2, 1).unwrap();
        conv2d_forward(&x, &p).unwrap();
        assert_eq!(macs::read(), 2 * 3 * 4 * 9 * 16);
    }
}
