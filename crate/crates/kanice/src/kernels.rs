//! Dense compute kernels shared by the tape primitives and the layers.
//!
//! Every kernel reduces each output element in a fixed ascending order and
//! parallelizes only across independent output rows, so results are
//! bit-identical no matter how many threads run.

use rayon::prelude::*;

use crate::tensor::Element;

/// Below this many multiply-adds the sequential path is used.
const PAR_WORK_THRESHOLD: usize = 1 << 15;

#[inline]
fn row_axpy<T: Element>(row: &mut [T], scale: T, src: &[T]) {
    for (r, &s) in row.iter_mut().zip(src) {
        *r += scale * s;
    }
}

/// `out[m,n] = a[m,k] * b[k,n]`, all row-major.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let kernel = |i: usize, row: &mut [T]| {
        row.fill(T::ZERO);
        for p in 0..k {
            row_axpy(row, a[i * k + p], &b[p * n..p * n + n]);
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| kernel(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            kernel(i, row);
        }
    }
}

/// `out[m,n] = a[m,k] * b[n,k]^T` (dot products of rows).
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let kernel = |i: usize, row: &mut [T]| {
        let arow = &a[i * k..i * k + k];
        for (j, out_v) in row.iter_mut().enumerate() {
            let brow = &b[j * k..j * k + k];
            let mut acc = T::ZERO;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            *out_v = acc;
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| kernel(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            kernel(i, row);
        }
    }
}

/// `out[m,n] = a[k,m]^T * b[k,n]`.
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let kernel = |i: usize, row: &mut [T]| {
        row.fill(T::ZERO);
        for p in 0..k {
            row_axpy(row, a[p * m + i], &b[p * n..p * n + n]);
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| kernel(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            kernel(i, row);
        }
    }
}

/// Unfold one image `[c, h, w]` into columns `[c*kh*kw, oh*ow]` for a
/// cross-correlation with the given stride and zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Element>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(img.len(), c * h * w);
    debug_assert_eq!(out.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold columns `[c*kh*kw, oh*ow]` back onto an image `[c, h, w]`,
/// accumulating overlaps. Inverse scatter of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(out.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    out.fill(T::ZERO);
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = [1.0f64, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        matmul(&eye, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_small_known() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let a = [1.0f64, 2.0];
        let b = [3.0, 4.0];
        let mut out = [0.0];
        matmul(&a, &b, 1, 2, 1, &mut out);
        assert_eq!(out[0], 11.0);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let mut rng = crate::rng::Rng::seeded(1, 0);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut plain = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut plain);

        // b_t[n,k] is b transposed
        let mut b_t = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                b_t[j * k + p] = b[p * n + j];
            }
        }
        let mut nt = vec![0.0; m * n];
        matmul_nt(&a, &b_t, m, k, n, &mut nt);
        for (x, y) in plain.iter().zip(&nt) {
            assert!((x - y).abs() < 1e-12);
        }

        // a_t[k,m] is a transposed
        let mut a_t = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                a_t[p * m + i] = a[i * k + p];
            }
        }
        let mut tn = vec![0.0; m * n];
        matmul_tn(&a_t, &b, m, k, n, &mut tn);
        for (x, y) in plain.iter().zip(&tn) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_roundtrip_shape() {
        let (c, h, w, kh, kw, stride, pad) = (2, 5, 4, 3, 3, 1, 1);
        let img: Vec<f64> = (0..c * h * w).map(|i| i as f64).collect();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut cols = vec![0.0; c * kh * kw * oh * ow];
        im2col(&img, c, h, w, kh, kw, stride, pad, &mut cols);
        // center kernel tap reproduces the image
        let center_row = 1 * kh * kw / 2 + 0; // ky=1, kx=1 for channel 0 => row 4
        let start = 4 * oh * ow;
        assert_eq!(&cols[start..start + 3], &img[0..3]);
        let _ = center_row;

        let mut back = vec![0.0; c * h * w];
        col2im(&cols, c, h, w, kh, kw, stride, pad, &mut back);
        // every interior pixel is visited kh*kw times
        assert_eq!(back[w + 1], 9.0 * img[w + 1]);
    }
}
