//! Layer kernels with hand-written backward passes.
//!
//! Feature maps are planar `channels × height × width` buffers. Convolutions
//! use replicate ("edge") padding so a constant input stays constant at every
//! layer, which keeps constant images resolution independent.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = (self.kernel - 1) / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }
}

#[inline]
fn clamp_index(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Unfolds `input` (`cin×h×w`) into a `(cin·k·k) × (oh·ow)` matrix.
pub fn im2col<T: Scalar>(input: &[T], shape: &ConvShape, h: usize, w: usize) -> Vec<T> {
    let k = shape.kernel;
    let pad = ((k - 1) / 2) as isize;
    let s = shape.stride;
    let (oh, ow) = shape.out_size(h, w);
    let n = oh * ow;
    if k == 1 && s == 1 {
        return input.to_vec();
    }
    let mut cols = vec![T::ZERO; shape.cin * k * k * n];
    for ci in 0..shape.cin {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = clamp_index((oy * s) as isize + ky as isize - pad, h);
                    let src = &plane[iy * w..(iy + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = clamp_index((ox * s) as isize + kx as isize - pad, w);
                        *d = src[ix];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], shape: &ConvShape, h: usize, w: usize) -> Vec<T> {
    let k = shape.kernel;
    let pad = ((k - 1) / 2) as isize;
    let s = shape.stride;
    let (oh, ow) = shape.out_size(h, w);
    let n = oh * ow;
    if k == 1 && s == 1 {
        return cols.to_vec();
    }
    let mut out = vec![T::ZERO; shape.cin * h * w];
    for ci in 0..shape.cin {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = clamp_index((oy * s) as isize + ky as isize - pad, h);
                    for ox in 0..ow {
                        let ix = clamp_index((ox * s) as isize + kx as isize - pad, w);
                        plane[iy * w + ix] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    out
}

/// `out = W · cols + b`, shape `cout × n`.
pub fn conv_forward<T: Scalar>(params: &[T], shape: &ConvShape, cols: &[T], n: usize) -> Vec<T> {
    let kk = shape.cin * shape.kernel * shape.kernel;
    let (weights, bias) = params.split_at(shape.weight_len());
    let mut out = vec![T::ZERO; shape.cout * n];
    for (co, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    T::gemm(shape.cout, kk, n, weights, false, cols, false, T::ONE, &mut out);
    out
}

/// Accumulates parameter gradients and returns the column gradient when
/// `need_input` is set.
pub fn conv_backward<T: Scalar>(
    params: &[T],
    grads: &mut [T],
    shape: &ConvShape,
    cols: &[T],
    dout: &[T],
    n: usize,
    need_input: bool,
) -> Option<Vec<T>> {
    let kk = shape.cin * shape.kernel * shape.kernel;
    let wl = shape.weight_len();
    let (gw, gb) = grads.split_at_mut(wl);
    T::gemm(shape.cout, n, kk, dout, false, cols, true, T::ONE, gw);
    for (co, row) in dout.chunks(n).enumerate() {
        gb[co] += row.iter().copied().sum::<T>();
    }
    if !need_input {
        return None;
    }
    let mut dcols = vec![T::ZERO; kk * n];
    T::gemm(kk, shape.cout, n, &params[..wl], true, dout, false, T::ZERO, &mut dcols);
    Some(dcols)
}

/// ELU with unit scale, applied in place.
pub fn elu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x <= T::ZERO {
            *x = x.exp() - T::ONE;
        }
    }
}

/// Multiplies `grad` by the ELU derivative, recovered from the activation output.
pub fn elu_backward_inplace<T: Scalar>(grad: &mut [T], out: &[T]) {
    for (g, &y) in grad.iter_mut().zip(out) {
        if y <= T::ZERO {
            *g *= y + T::ONE;
        }
    }
}

/// Linear interpolation taps for one axis (half-pixel centres, clamped edges).
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        let scale = src as f64 / dst as f64;
        for o in 0..dst {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(pos - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of `planes` planes from `h×w` to `oh×ow`.
pub fn resize_bilinear<T: Scalar>(
    data: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if h == oh && w == ow {
        return data.to_vec();
    }
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let fx: Vec<T> = tx.frac.iter().map(|&f| T::from_f64(f)).collect();
    let fy: Vec<T> = ty.frac.iter().map(|&f| T::from_f64(f)).collect();
    let mut out = vec![T::ZERO; planes * oh * ow];
    let mut rows = vec![T::ZERO; h * ow];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            let r = &mut rows[y * ow..(y + 1) * ow];
            for x in 0..ow {
                r[x] = s[tx.lo[x]] + fx[x] * (s[tx.hi[x]] - s[tx.lo[x]]);
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let a = &rows[ty.lo[y] * ow..(ty.lo[y] + 1) * ow];
            let b = &rows[ty.hi[y] * ow..(ty.hi[y] + 1) * ow];
            let f = fy[y];
            for x in 0..ow {
                dst[y * ow + x] = a[x] + f * (b[x] - a[x]);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward<T: Scalar>(
    grad: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if h == oh && w == ow {
        return grad.to_vec();
    }
    let ty = AxisTaps::new(h, oh);
    let tx = AxisTaps::new(w, ow);
    let mut out = vec![T::ZERO; planes * h * w];
    let mut rows = vec![T::ZERO; h * ow];
    for p in 0..planes {
        rows.fill(T::ZERO);
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let f = T::from_f64(ty.frac[y]);
            let (lo, hi) = (ty.lo[y], ty.hi[y]);
            for x in 0..ow {
                let v = g[y * ow + x];
                rows[lo * ow + x] += (T::ONE - f) * v;
                rows[hi * ow + x] += f * v;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let r = &rows[y * ow..(y + 1) * ow];
            for x in 0..ow {
                let f = T::from_f64(tx.frac[x]);
                dst[y * w + tx.lo[x]] += (T::ONE - f) * r[x];
                dst[y * w + tx.hi[x]] += f * r[x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f64], params: &[f64], s: &ConvShape, h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = s.out_size(h, w);
        let k = s.kernel;
        let pad = ((k - 1) / 2) as isize;
        let mut out = vec![0.0; s.cout * oh * ow];
        for co in 0..s.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = params[s.weight_len() + co];
                    for ci in 0..s.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = clamp_index((oy * s.stride + ky) as isize - pad, h);
                                let ix = clamp_index((ox * s.stride + kx) as isize - pad, w);
                                acc += params[((co * s.cin + ci) * k + ky) * k + kx]
                                    * input[(ci * h + iy) * w + ix];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let s = ConvShape { cin: 2, cout: 3, kernel: k, stride };
            let (h, w) = (6, 8);
            let input: Vec<f64> = (0..2 * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let params: Vec<f64> = (0..s.param_len()).map(|i| ((i * 5) % 13) as f64 * 0.1 - 0.6).collect();
            let cols = im2col(&input, &s, h, w);
            let (oh, ow) = s.out_size(h, w);
            let out = conv_forward(&params, &s, &cols, oh * ow);
            let want = naive_conv(&input, &params, &s, h, w);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let s = ConvShape { cin: 2, cout: 1, kernel: 3, stride: 2 };
        let (h, w) = (6, 6);
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &s, h, w);
        let g: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = col2im(&g, &s, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let (h, w, oh, ow) = (4, 5, 9, 7);
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
        let y = resize_bilinear(&x, 2, h, w, oh, ow);
        let g: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = resize_bilinear_backward(&g, 2, h, w, oh, ow);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_keeps_constants() {
        let x = vec![0.25f64; 3 * 4 * 4];
        let y = resize_bilinear(&x, 3, 4, 4, 16, 16);
        assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }
}
