//! Raw numeric kernels behind the tape operators and the data pipeline.
//!
//! Everything here is plain slice math: direct convolution via im2col,
//! a cache-friendly matmul, and bilinear 2x resampling with the
//! align-corners=false convention. Images are laid out NHWC.

use crate::tensor::Element;

/// out[m,n] = a[m,k] * b[k,n]. `out` is overwritten.
pub fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// out[cols, rows] = transpose of a[rows, cols].
pub fn transpose<T: Element>(rows: usize, cols: usize, a: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Lower an NHWC image into im2col layout for a kxk same-padded, stride-1
/// convolution: col[(b*h*w + y*w + x), (ky*k + kx)*cin + ci].
pub fn im2col<T: Element>(
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    x: &[T],
    col: &mut [T],
) {
    let pad = k / 2;
    let patch = k * k * cin;
    debug_assert_eq!(col.len(), b * h * w * patch);
    col.fill(T::zero());
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * patch;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * cin;
                        let dst = row + (ky * k + kx) * cin;
                        col[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
}

/// Scatter-add an im2col matrix back into NHWC image space (adjoint of [`im2col`]).
pub fn col2im<T: Element>(
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    col: &[T],
    x: &mut [T],
) {
    let pad = k / 2;
    let patch = k * k * cin;
    x.fill(T::zero());
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((bi * h + y) * w + xx) * patch;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + sy as usize) * w + sx as usize) * cin;
                        let src = row + (ky * k + kx) * cin;
                        for ci in 0..cin {
                            x[dst + ci] = x[dst + ci] + col[src + ci];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 conv2d. `x` is [b,h,w,cin] NHWC, `weight` is
/// [k,k,cin,cout], output is [b,h,w,cout].
pub fn conv2d_forward<T: Element>(
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    x: &[T],
    weight: &[T],
    out: &mut [T],
) {
    let rows = b * h * w;
    let patch = k * k * cin;
    let mut col = vec![T::zero(); rows * patch];
    im2col(b, h, w, cin, k, x, &mut col);
    gemm(rows, patch, cout, &col, weight, out);
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub fn conv2d_backward<T: Element>(
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    x: &[T],
    weight: &[T],
    d_out: &[T],
    d_x: &mut [T],
    d_weight: &mut [T],
) {
    let rows = b * h * w;
    let patch = k * k * cin;

    // d_weight = col^T . d_out
    let mut col = vec![T::zero(); rows * patch];
    im2col(b, h, w, cin, k, x, &mut col);
    let mut col_t = vec![T::zero(); rows * patch];
    transpose(rows, patch, &col, &mut col_t);
    gemm(patch, rows, cout, &col_t, d_out, d_weight);

    // d_x = col2im(d_out . weight^T)
    let mut w_t = vec![T::zero(); patch * cout];
    transpose(patch, cout, weight, &mut w_t);
    let mut d_col = vec![T::zero(); rows * patch];
    gemm(rows, cout, patch, d_out, &w_t, &mut d_col);
    col2im(b, h, w, cin, k, &d_col, d_x);
}

/// Per-axis bilinear sample points for a 2x upsample (align-corners=false):
/// output index i reads source i/2 - 0.25, clamped at the edges.
fn up2_taps(i: usize, len: usize) -> (usize, usize, f64, f64) {
    let src = (i as f64 + 0.5) / 2.0 - 0.5;
    let lo = src.floor();
    let frac = src - lo;
    let lo_i = (lo.max(0.0) as usize).min(len - 1);
    let hi_i = ((lo + 1.0).max(0.0) as usize).min(len - 1);
    (lo_i, hi_i, 1.0 - frac, frac)
}

/// Bilinear 2x upsample of an NHWC image: [b,h,w,c] -> [b,2h,2w,c].
pub fn bilinear_up2<T: Element>(b: usize, h: usize, w: usize, c: usize, x: &[T], out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    debug_assert_eq!(out.len(), b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = up2_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = up2_taps(ox, w);
                let dst = ((bi * oh + oy) * ow + ox) * c;
                let s00 = ((bi * h + y0) * w + x0) * c;
                let s01 = ((bi * h + y0) * w + x1) * c;
                let s10 = ((bi * h + y1) * w + x0) * c;
                let s11 = ((bi * h + y1) * w + x1) * c;
                let w00 = T::from_f64(wy0 * wx0);
                let w01 = T::from_f64(wy0 * wx1);
                let w10 = T::from_f64(wy1 * wx0);
                let w11 = T::from_f64(wy1 * wx1);
                for ci in 0..c {
                    out[dst + ci] = w00 * x[s00 + ci]
                        + w01 * x[s01 + ci]
                        + w10 * x[s10 + ci]
                        + w11 * x[s11 + ci];
                }
            }
        }
    }
}

/// Adjoint of [`bilinear_up2`]: scatters output gradients back to [b,h,w,c].
pub fn bilinear_up2_backward<T: Element>(
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    d_out: &[T],
    d_x: &mut [T],
) {
    let (oh, ow) = (2 * h, 2 * w);
    d_x.fill(T::zero());
    for bi in 0..b {
        for oy in 0..oh {
            let (y0, y1, wy0, wy1) = up2_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, wx0, wx1) = up2_taps(ox, w);
                let src = ((bi * oh + oy) * ow + ox) * c;
                let d00 = ((bi * h + y0) * w + x0) * c;
                let d01 = ((bi * h + y0) * w + x1) * c;
                let d10 = ((bi * h + y1) * w + x0) * c;
                let d11 = ((bi * h + y1) * w + x1) * c;
                let w00 = T::from_f64(wy0 * wx0);
                let w01 = T::from_f64(wy0 * wx1);
                let w10 = T::from_f64(wy1 * wx0);
                let w11 = T::from_f64(wy1 * wx1);
                for ci in 0..c {
                    let g = d_out[src + ci];
                    d_x[d00 + ci] = d_x[d00 + ci] + w00 * g;
                    d_x[d01 + ci] = d_x[d01 + ci] + w01 * g;
                    d_x[d10 + ci] = d_x[d10 + ci] + w10 * g;
                    d_x[d11 + ci] = d_x[d11 + ci] + w11 * g;
                }
            }
        }
    }
}

/// Bilinear 2x downsample (align-corners=false), which for an exact factor of
/// two reduces to 2x2 block averaging: [b,h,w,c] -> [b,h/2,w/2,c]. `h` and `w`
/// must be even.
pub fn bilinear_down2<T: Element>(b: usize, h: usize, w: usize, c: usize, x: &[T], out: &mut [T]) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(out.len(), b * oh * ow * c);
    let quarter = T::from_f64(0.25);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((bi * oh + oy) * ow + ox) * c;
                let s00 = ((bi * h + 2 * oy) * w + 2 * ox) * c;
                let s01 = ((bi * h + 2 * oy) * w + 2 * ox + 1) * c;
                let s10 = ((bi * h + 2 * oy + 1) * w + 2 * ox) * c;
                let s11 = ((bi * h + 2 * oy + 1) * w + 2 * ox + 1) * c;
                for ci in 0..c {
                    out[dst + ci] =
                        quarter * (x[s00 + ci] + x[s01 + ci] + x[s10 + ci] + x[s11 + ci]);
                }
            }
        }
    }
}
