//! 2-D convolution (cross-correlation) via im2col + matmul.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Convolution layer with square kernel, bias, stride and zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Element> {
    pub weight: Tensor<T>, // [c_out, c_in, k, k]
    pub bias: Tensor<T>,   // [c_out]
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    /// Scaled-uniform fan-in initialization, zero bias.
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: Tensor::from_fn(&[c_out, c_in, kernel, kernel], |_| {
                T::from_f64(rng.uniform(-bound, bound))
            }),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Spatial output size: `floor((d + 2*pad - k) / stride) + 1`.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.weight.shape()[2];
        let oh = (h + 2 * self.padding).checked_sub(k)? / self.stride + 1;
        let ow = (w + 2 * self.padding).checked_sub(k)? / self.stride + 1;
        Some((oh, ow))
    }
}

/// Cross-correlation of `x [N, C_in, H, W]` with `w [C_out, C_in, kh, kw]`
/// plus per-channel bias. No activation is applied.
pub fn conv2d_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(w).shape().to_vec();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if tape.value(b).shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: tape.value(b).shape().to_vec(),
            rhs: vec![c_out],
        });
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d spatial",
            lhs: vec![h, wd],
            rhs: vec![kh, kw],
        });
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let (ckk, ohw) = (c_in * kh * kw, oh * ow);

    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    {
        let xd = tape.value(x).data();
        let wd_flat = tape.value(w).data();
        let bd = tape.value(b).data();
        out.data_mut()
            .par_chunks_mut(c_out * ohw)
            .enumerate()
            .for_each(|(ni, dst)| {
                let mut col = vec![T::ZERO; ckk * ohw];
                kernels::im2col(
                    &xd[ni * c_in * h * wd..(ni + 1) * c_in * h * wd],
                    c_in,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    padding,
                    &mut col,
                );
                kernels::matmul(wd_flat, &col, c_out, ckk, ohw, dst);
                for (c, chunk) in dst.chunks_mut(ohw).enumerate() {
                    let bias = bd[c];
                    for v in chunk.iter_mut() {
                        *v += bias;
                    }
                }
            });
    }

    Ok(tape.push_op(out, &[x, w, b], move || {
        Box::new(move |g, tape, sink| {
            let xv = tape.value(x);
            let wv = tape.value(w);
            let gd = g.data();
            let plane = c_in * h * wd;

            if tape.requires_grad(b) {
                let mut db = Tensor::zeros(&[c_out]);
                let dbd = db.data_mut();
                for ni in 0..n {
                    for c in 0..c_out {
                        let base = (ni * c_out + c) * ohw;
                        let mut acc = T::ZERO;
                        for &gv in &gd[base..base + ohw] {
                            acc += gv;
                        }
                        dbd[c] += acc;
                    }
                }
                sink.accum(b, db);
            }

            if tape.requires_grad(w) {
                // accumulate per image in batch order for determinism
                let mut dw = Tensor::zeros(wv.shape());
                let mut col = vec![T::ZERO; ckk * ohw];
                let mut tmp = vec![T::ZERO; c_out * ckk];
                let xd = xv.data();
                for ni in 0..n {
                    kernels::im2col(
                        &xd[ni * plane..(ni + 1) * plane],
                        c_in,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        padding,
                        &mut col,
                    );
                    let g_n = &gd[ni * c_out * ohw..(ni + 1) * c_out * ohw];
                    kernels::matmul_nt(g_n, &col, c_out, ohw, ckk, &mut tmp);
                    for (a, &t) in dw.data_mut().iter_mut().zip(&tmp) {
                        *a += t;
                    }
                }
                sink.accum(w, dw);
            }

            if tape.requires_grad(x) {
                let mut dx = Tensor::zeros(xv.shape());
                let wd_flat = wv.data();
                dx.data_mut()
                    .par_chunks_mut(plane)
                    .enumerate()
                    .for_each(|(ni, dst)| {
                        let g_n = &gd[ni * c_out * ohw..(ni + 1) * c_out * ohw];
                        let mut dcol = vec![T::ZERO; ckk * ohw];
                        kernels::matmul_tn(wd_flat, g_n, ckk, c_out, ohw, &mut dcol);
                        kernels::col2im(&dcol, c_in, h, wd, kh, kw, stride, padding, dst);
                    });
                sink.accum(x, dx);
            }
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, Rng};

    fn run_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let y = conv2d_forward(&mut tape, xv, wv, bv, stride, pad).unwrap();
        tape.value(y).clone()
    }

    /// Six-nested-loop reference convolution, the independent oracle.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, c_in, h, wd) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
        );
        let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
        let od = out.data_mut();
        for ni in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ni * c_in + ci) * h + iy as usize) * wd
                                        + ix as usize;
                                    let wi = ((co * c_in + ci) * kh + ky) * kw + kx;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        od[((ni * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = run_conv(&x, &w, &b, 1, 0);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let x = Tensor::full(&[1, 1, 5, 5], 1.0f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let b = Tensor::zeros(&[1]);
        let y = run_conv(&x, &w, &b, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = Rng::seeded(51, streams::TEST);
        let x = Tensor::from_fn(&[2, 2, 6, 6], |_| rng.uniform(-1.0, 1.0));
        let w = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.uniform(-1.0, 1.0));
        let b = Tensor::from_fn(&[3], |_| rng.uniform(-0.5, 0.5));
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let fast = run_conv(&x, &w, &b, stride, pad);
            let slow = conv_oracle(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(
                fast.max_abs_diff(&slow) < 1e-5,
                "stride={stride} pad={pad}: {}",
                fast.max_abs_diff(&slow)
            );
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            conv2d_forward(&mut tape, x, w, b, 1, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::seeded(52, streams::TEST);
        let x0 = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.uniform(-1.0, 1.0));
        let w0 = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.uniform(-1.0, 1.0));
        let b0 = Tensor::from_fn(&[2], |_| rng.uniform(-0.5, 0.5));
        let loss_w = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.uniform(0.5, 1.5));

        let eval = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = conv2d_forward(&mut tape, xv, wv, bv, 1, 1).unwrap();
            let lw = tape.constant(loss_w.clone());
            let prod = tape.mul(y, lw).unwrap();
            let s = tape.sum(prod);
            tape.value(s).item()
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone(), true);
        let wv = tape.leaf(w0.clone(), true);
        let bv = tape.leaf(b0.clone(), true);
        let y = conv2d_forward(&mut tape, xv, wv, bv, 1, 1).unwrap();
        let lw = tape.constant(loss_w.clone());
        let prod = tape.mul(y, lw).unwrap();
        let s = tape.sum(prod);
        let grads = tape.backward(s).unwrap();

        let h = 1e-5;
        for (name, var, base) in [("x", xv, &x0), ("w", wv, &w0), ("b", bv, &b0)] {
            let analytic = grads.get(var).unwrap();
            for i in (0..base.numel()).step_by(3) {
                let mut plus = base.clone();
                plus.data_mut()[i] += h;
                let mut minus = base.clone();
                minus.data_mut()[i] -= h;
                let numeric = match name {
                    "x" => (eval(&plus, &w0, &b0) - eval(&minus, &w0, &b0)) / (2.0 * h),
                    "w" => (eval(&x0, &plus, &b0) - eval(&x0, &minus, &b0)) / (2.0 * h),
                    _ => (eval(&x0, &w0, &plus) - eval(&x0, &w0, &minus)) / (2.0 * h),
                };
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0) < 1e-6,
                    "{name}[{i}]: {a} vs {numeric}"
                );
            }
        }
    }
}
