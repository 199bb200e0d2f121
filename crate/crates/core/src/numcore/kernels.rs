//! Raw slice kernels shared by the tape ops and the non-differentiable
//! inference helpers.

use super::Real;

/// `out[m×n] = a[m×k] · b[k×n]`, optionally reading `a` or `b` transposed
/// from their stored layout.
pub(crate) fn matmul_into<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    a_t: bool,
    b_t: bool,
    accumulate: bool,
) {
    // a is stored m×k, or k×m when a_t
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds `input[c_in×h×w]` into `[c_in·k·k × h_out·w_out]` with zero padding.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_positions();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let p = g.out_positions();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            out[base + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Align-corners source coordinate of output index `i` when resizing
/// `src` samples to `dst` samples: `(lower index, upper index, fraction)`.
#[inline]
pub(crate) fn align_corners_coord<T: Real>(i: usize, src: usize, dst: usize) -> (usize, usize, T) {
    if dst <= 1 || src <= 1 {
        return (0, 0, T::zero());
    }
    let num = i * (src - 1);
    let den = dst - 1;
    let lo = num / den;
    let frac = T::from_usize(num % den).unwrap() / T::from_usize(den).unwrap();
    (lo, (lo + 1).min(src - 1), frac)
}

/// Bilinear (align-corners) resize of `planes` maps of `h×w` to `oh×ow`.
pub(crate) fn bilinear_forward<T: Real>(src: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * oh * ow];
    let xs: Vec<(usize, usize, T)> = (0..ow).map(|x| align_corners_coord(x, w, ow)).collect();
    for c in 0..planes {
        let s = &src[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = align_corners_coord::<T>(y, h, oh);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (a, b) = (s[y0 * w + x0], s[y0 * w + x1]);
                let (c2, d) = (s[y1 * w + x0], s[y1 * w + x1]);
                let top = a + fx * (b - a);
                let bot = c2 + fx * (d - c2);
                let v = top + fy * (bot - top);
                let lo = a.min(b).min(c2).min(d);
                let hi = a.max(b).max(c2).max(d);
                out[(c * oh + y) * ow + x] = v.max(lo).min(hi);
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_forward`] (ignoring the rounding clamp).
pub(crate) fn bilinear_backward<T: Real>(grad: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h * w];
    for c in 0..planes {
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = align_corners_coord::<T>(y, h, oh);
            for x in 0..ow {
                let (x0, x1, fx) = align_corners_coord::<T>(x, w, ow);
                let g = grad[(c * oh + y) * ow + x];
                let one = T::one();
                dst[y0 * w + x0] += g * (one - fy) * (one - fx);
                dst[y0 * w + x1] += g * (one - fy) * fx;
                dst[y1 * w + x0] += g * fy * (one - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    out
}

/// Softmax of each length-`n` row, with max subtraction.
pub(crate) fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v = *v / sum);
    }
    out
}

/// Log-softmax of each length-`n` row.
pub(crate) fn log_softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

/// Squared euclidean distances between the rows of `a[n×d]` and `b[m×d]`.
pub(crate) fn sq_dist<T: Real>(a: &[T], b: &[T], n: usize, m: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..m {
            let bj = &b[j * d..(j + 1) * d];
            let mut s = T::zero();
            for (&x, &y) in ai.iter().zip(bj) {
                let diff = x - y;
                s += diff * diff;
            }
            out[i * m + j] = s;
        }
    }
    out
}
