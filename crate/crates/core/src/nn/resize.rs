//! Bilinear resampling with half-pixel centers.

use crate::tensor::{Float, Tensor};

/// Source taps for one output coordinate: `(lo, hi, weight of hi)`.
fn taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize<T: Float>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = input.dims();
    if (h, w) == (out_h, out_w) {
        return input.clone();
    }
    let ty = taps(h, out_h);
    let tx: Vec<(usize, usize, T, T)> = taps(w, out_w)
        .into_iter()
        .map(|(l, r, f)| (l, r, T::from_f64_lossy(1.0 - f), T::from_f64_lossy(f)))
        .collect();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let (src_plane, dst_plane) = (h * w, out_h * out_w);
    for (p, dst) in out.as_mut_slice().chunks_mut(dst_plane).enumerate() {
        let src = &input.as_slice()[p * src_plane..(p + 1) * src_plane];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(1.0 - fy), T::from_f64_lossy(fy));
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let top = r0[x0] * wx0 + r0[x1] * wx1;
                let bottom = r1[x0] * wx0 + r1[x1] * wx1;
                dst[oy * out_w + ox] = top * wy0 + bottom * wy1;
            }
        }
    }
    out
}

/// Scatters `grad_out` back onto an `in_h x in_w` grid with the forward weights.
pub fn bilinear_resize_backward<T: Float>(grad_out: &Tensor<T>, in_h: usize, in_w: usize) -> Tensor<T> {
    let [n, c, out_h, out_w] = grad_out.dims();
    if (in_h, in_w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let ty = taps(in_h, out_h);
    let tx: Vec<(usize, usize, T, T)> = taps(in_w, out_w)
        .into_iter()
        .map(|(l, r, f)| (l, r, T::from_f64_lossy(1.0 - f), T::from_f64_lossy(f)))
        .collect();
    let mut grad_in = Tensor::zeros([n, c, in_h, in_w]);
    let (src_plane, dst_plane) = (in_h * in_w, out_h * out_w);
    for (p, dst) in grad_in.as_mut_slice().chunks_mut(src_plane).enumerate() {
        let g = &grad_out.as_slice()[p * dst_plane..(p + 1) * dst_plane];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(1.0 - fy), T::from_f64_lossy(fy));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                dst[y0 * in_w + x0] = dst[y0 * in_w + x0] + v * wy0 * wx0;
                dst[y0 * in_w + x1] = dst[y0 * in_w + x1] + v * wy0 * wx1;
                dst[y1 * in_w + x0] = dst[y1 * in_w + x0] + v * wy1 * wx0;
                dst[y1 * in_w + x1] = dst[y1 * in_w + x1] + v * wy1 * wx1;
            }
        }
    }
    grad_in
}
