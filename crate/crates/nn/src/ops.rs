//! Tape-free kernels: im2col convolution, bilinear resampling, group
//! normalization and 2×2 max pooling, each with its adjoint.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Same-size convolution for odd kernels.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding).saturating_sub(self.dilation * (self.kernel - 1))
    }
}

/// Unfolds `x` into a `(C·k·k, Ho·Wo)` matrix.
pub fn im2col(x: ArrayView3<'_, f64>, g: ConvGeom) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                let dy = (ki * g.dilation) as isize - g.padding as isize;
                let dx = (kj * g.dilation) as isize - g.padding as isize;
                for oy in 0..ho {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    let lo = (-dx).max(0) as usize;
                    let hi = ((w as isize - dx).min(wo as isize)).max(0) as usize;
                    for ox in lo..hi {
                        dst_row[ox] = src_row[(ox as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds column gradients back onto `(C, H, W)`.
pub fn col2im(cols: ArrayView2<'_, f64>, (c, h, w): (usize, usize, usize), g: ConvGeom) -> Array3<f64> {
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array3::zeros((c, h, w));
    let xs = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                let dy = (ki * g.dilation) as isize - g.padding as isize;
                let dx = (kj * g.dilation) as isize - g.padding as isize;
                for oy in 0..ho {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    let lo = (-dx).max(0) as usize;
                    let hi = ((w as isize - dx).min(wo as isize)).max(0) as usize;
                    for ox in lo..hi {
                        xs[base + (ox as isize + dx) as usize] += src_row[ox];
                    }
                }
            }
        }
    }
    x
}

/// Source taps for one output coordinate of an `align_corners = false`
/// bilinear resize: `(lower index, upper index, upper weight)`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn upsample_bilinear(x: ArrayView3<'_, f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        let src = x.index_axis(Axis(0), ci);
        let mut dst = out.index_axis_mut(Axis(0), ci);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                dst[[oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(grad: ArrayView3<'_, f64>, ih: usize, iw: usize) -> Array3<f64> {
    let (c, oh, ow) = grad.dim();
    let ty = bilinear_taps(ih, oh);
    let tx = bilinear_taps(iw, ow);
    let mut out = Array3::zeros((c, ih, iw));
    for ci in 0..c {
        let g = grad.index_axis(Axis(0), ci);
        let mut dst = out.index_axis_mut(Axis(0), ci);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[[oy, ox]];
                dst[[y0, x0]] += v * (1.0 - fy) * (1.0 - fx);
                dst[[y0, x1]] += v * (1.0 - fy) * fx;
                dst[[y1, x0]] += v * fy * (1.0 - fx);
                dst[[y1, x1]] += v * fy * fx;
            }
        }
    }
    out
}

/// Bilinear resize of a single plane.
pub fn resize_bilinear(x: ArrayView2<'_, f64>, oh: usize, ow: usize) -> Array2<f64> {
    upsample_bilinear(x.insert_axis(Axis(0)), oh, ow)
        .index_axis_move(Axis(0), 0)
}

/// Cached statistics of a group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub xhat: Array3<f64>,
    pub inv_std: Vec<f64>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub fn group_norm(
    x: ArrayView3<'_, f64>,
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
) -> (Array3<f64>, GroupNormCache) {
    let (c, h, w) = x.dim();
    let per = c / groups;
    let n = (per * h * w) as f64;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut xhat = Array3::zeros((c, h, w));
    let mut out = Array3::zeros((c, h, w));
    let mut inv_std = Vec::with_capacity(groups);
    {
        let xh = xhat.as_slice_mut().expect("fresh");
        let os = out.as_slice_mut().expect("fresh");
        let plane = h * w;
        for gi in 0..groups {
            let range = gi * per * plane..(gi + 1) * per * plane;
            let seg = &xs[range.clone()];
            let mean = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            inv_std.push(is);
            for (k, idx) in range.enumerate() {
                let ci = gi * per + k / plane;
                let v = (seg[k] - mean) * is;
                xh[idx] = v;
                os[idx] = v * gamma[ci] + beta[ci];
            }
        }
    }
    (out, GroupNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    grad: ArrayView3<'_, f64>,
    cache: &GroupNormCache,
    gamma: &[f64],
    groups: usize,
) -> (Array3<f64>, Vec<f64>, Vec<f64>) {
    let (c, h, w) = grad.dim();
    let plane = h * w;
    let per = c / groups;
    let n = (per * plane) as f64;
    let grad = grad.as_standard_layout();
    let gs = grad.as_slice().expect("standard layout");
    let xh = cache.xhat.as_slice().expect("standard layout");
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        for k in ci * plane..(ci + 1) * plane {
            dgamma[ci] += gs[k] * xh[k];
            dbeta[ci] += gs[k];
        }
    }
    let mut dx = Array3::zeros((c, h, w));
    let ds = dx.as_slice_mut().expect("fresh");
    for gi in 0..groups {
        let range = gi * per * plane..(gi + 1) * per * plane;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for idx in range.clone() {
            let d = gs[idx] * gamma[idx / plane];
            sum_d += d;
            sum_dx += d * xh[idx];
        }
        let is = cache.inv_std[gi];
        for idx in range {
            let d = gs[idx] * gamma[idx / plane];
            ds[idx] = is * (d - sum_d / n - xh[idx] * sum_dx / n);
        }
    }
    (dx, dgamma, dbeta)
}

/// 2×2 stride-2 max pooling (floor). Returns the output and, for each
/// output element, the flat index of the winning input element.
pub fn max_pool2(x: ArrayView3<'_, f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                    let v = x[[ci, y, xx]];
                    if v > best {
                        best = v;
                        best_idx = (ci * h + y) * w + xx;
                    }
                }
                out[[ci, oy, ox]] = best;
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn same_conv_geometry() {
        let g = ConvGeom::same(3, 2);
        assert_eq!(g.padding, 2);
        assert_eq!(g.out_len(8), 8);
        assert_eq!(ConvGeom::same(1, 1).out_len(5), 5);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::same(3, 2);
        let x = Array3::from_shape_fn((2, 5, 6), |(a, b, c)| (a * 31 + b * 7 + c) as f64 * 0.1 - 1.0);
        let cols = im2col(x.view(), g);
        let y = Array2::from_shape_fn(cols.dim(), |(r, c)| ((r * 13 + c * 5) % 11) as f64 - 5.0);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(y.view(), x.dim(), g);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} {rhs}");
    }

    #[test]
    fn bilinear_identity_and_adjoint() {
        let x = Array3::from_shape_fn((1, 3, 4), |(_, b, c)| (b * 4 + c) as f64);
        assert_eq!(upsample_bilinear(x.view(), 3, 4), x);
        let up = upsample_bilinear(x.view(), 7, 9);
        let y = Array3::from_shape_fn(up.dim(), |(_, b, c)| ((b * 3 + c) % 5) as f64);
        let lhs = (&up * &y).sum();
        let rhs = (&x * &upsample_bilinear_backward(y.view(), 3, 4)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn bilinear_2x_matches_hand_values() {
        // 1x2 -> 1x4: taps at src -0.25(clamped 0), 0.25, 0.75, 1.25(clamped)
        let x = array![[[0.0, 1.0]]];
        let up = upsample_bilinear(x.view(), 1, 4);
        assert_eq!(up, array![[[0.0, 0.25, 0.75, 1.0]]]);
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let x = array![[[1.0, 5.0], [3.0, 2.0]]];
        let (out, arg) = max_pool2(x.view());
        assert_eq!(out[[0, 0, 0]], 5.0);
        assert_eq!(arg, vec![1]);
    }
}
