//! Forward and backward numeric kernels for the tape operations.
//!
//! These functions work on raw row-major buffers; shape validation happens in
//! the tape layer before they are called.

use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let channel = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &channel[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid ox satisfy 0 <= ox + kj - pad < w
                        let shift = kj as isize - pad;
                        let lo = (-shift).clamp(0, g.wo as isize) as usize;
                        let hi = (g.w as isize - shift).clamp(0, g.wo as isize) as usize;
                        dst[..lo].fill(T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                        dst[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            *d = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let channel = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut channel[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let yn = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        let rhs: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        T::gemm(g.cout, k, plane, weight, false, rhs, false, yn, false);
        if let Some(b) = bias {
            for (co, row) in yn.chunks_mut(plane).enumerate() {
                let bv = b[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let plane = g.out_plane();
    let k = g.patch_len();
    let img = g.cin * g.h * g.w;
    let mut dx = need_x.then(|| vec![T::zero(); g.n * img]);
    let mut dw = need_w.then(|| vec![T::zero(); g.cout * k]);
    let mut db = need_b.then(|| vec![T::zero(); g.cout]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise || !need_w {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let mut dcols = if pointwise || !need_x {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.n {
        let xn = &x[n * img..(n + 1) * img];
        let dyn_ = &dy[n * g.cout * plane..(n + 1) * g.cout * plane];
        if let Some(db) = db.as_mut() {
            for (co, row) in dyn_.chunks(plane).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let patches: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW += dY (cout x plane) * patches^T (plane x k)
            T::gemm(g.cout, plane, k, dyn_, false, patches, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * img..(n + 1) * img];
            if pointwise {
                T::gemm(k, g.cout, plane, weight, true, dyn_, false, dxn, false);
            } else {
                T::gemm(k, g.cout, plane, weight, true, dyn_, false, &mut dcols, false);
                col2im(&dcols, g, dxn);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Returns pooled values and, for each output, the flat input index of the window maximum.
pub(crate) fn max_pool_forward<T: Element>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    size: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (h - size) / stride + 1;
    let wo = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for i in 0..size {
                    for j in 0..size {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        // strict comparison keeps the first maximum in row-major order
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2x_forward<T: Element>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * w2..(y + 1) * w2];
            for (x2, d) in drow.iter_mut().enumerate() {
                *d = srow[x2 / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Element>(
    dy: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for x2 in 0..w2 {
                let d = &mut dst[(y / 2) * w + x2 / 2];
                *d = *d + src[y * w2 + x2];
            }
        }
    }
    dx
}

/// Non-differentiable 2x2 average pooling with stride 2.
pub(crate) fn avg_pool2x2<T: Element>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let b = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i = b + 2 * oy * w + 2 * ox;
                out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter);
            }
        }
    }
    out
}

/// Bilinear resampling of a single plane using half-pixel centers.
///
/// Resampling to the same size is exactly the identity.
pub fn bilinear_resample(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let p = |yy: usize, xx: usize| src[yy * sw + xx] as f64;
            let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
            let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.cout * g.ho * g.wo];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + j) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += wt[((co * g.cin + ci) * g.kh + i) * g.kw + j]
                                        * x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_convolution() {
        for &(stride, pad, kh) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 0, 1), (1, 2, 5), (3, 1, 2)] {
            let (n, cin, h, w, cout) = (2, 3, 7, 6, 4);
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (w + 2 * pad - kh) / stride + 1;
            let g = ConvGeom { n, cin, h, w, cout, kh, kw: kh, stride, pad, ho, wo };
            let x: Vec<f64> = (0..n * cin * h * w).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect();
            let wt: Vec<f64> = (0..cout * cin * kh * kh).map(|i| ((i * 31) % 9) as f64 - 4.0).collect();
            assert_eq!(conv2d_forward(&x, &wt, None, &g), direct_conv(&x, &wt, &g));
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(bilinear_resample(&src, 4, 3, 4, 3), src);
        let c = vec![0.3f32; 25];
        assert!(bilinear_resample(&c, 5, 5, 9, 7).iter().all(|v| (v - 0.3).abs() < 1e-6));
    }
}
