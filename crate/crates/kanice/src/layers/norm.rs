//! 2-D batch normalization with train/eval modes and running statistics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Batch normalization over the channel dimension of `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Fold fresh batch statistics into the running estimates. The running
    /// variance uses the unbiased estimator, matching common practice.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::ONE - m;
        let count = stats.count as f64;
        let unbias = T::from_f64(count / (count - 1.0));
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = keep * *rm + m * stats.mean[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = keep * *rv + m * stats.var_biased[c] * unbias;
        }
    }
}

/// Per-channel batch statistics from one training forward pass.
pub struct BatchStats<T: Element> {
    pub mean: Vec<T>,
    pub var_biased: Vec<T>,
    pub count: usize,
}

fn check_input<T: Element>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
) -> Result<(usize, usize, usize, usize)> {
    let xs = tape.value(x).shape();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: xs.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let c = xs[1];
    if tape.value(gamma).shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm affine",
            lhs: tape.value(gamma).shape().to_vec(),
            rhs: vec![c],
        });
    }
    Ok((xs[0], c, xs[2], xs[3]))
}

/// Training-mode forward: normalize with batch statistics (per channel over
/// N, H, W), apply the affine transform, and report the statistics so the
/// caller can update its running estimates.
pub fn batchnorm_train<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BatchStats<T>)> {
    let (n, c, h, w) = check_input(tape, x, gamma)?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::BatchTooSmall { elements: m });
    }
    let hw = h * w;
    let inv_m = T::from_f64(1.0 / m as f64);

    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    {
        let xd = tape.value(x).data();
        mean.par_iter_mut()
            .zip(var.par_iter_mut())
            .enumerate()
            .for_each(|(ci, (mu, v))| {
                let mut acc = T::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for &xv in &xd[base..base + hw] {
                        acc += xv;
                    }
                }
                *mu = acc * inv_m;
                let mut acc2 = T::ZERO;
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for &xv in &xd[base..base + hw] {
                        let d = xv - *mu;
                        acc2 += d * d;
                    }
                }
                *v = acc2 * inv_m;
            });
    }
    let invstd: Vec<T> = var
        .iter()
        .map(|&v| T::ONE / (v + T::from_f64(eps)).sqrt())
        .collect();

    let mut xhat = Tensor::zeros(&[n, c, h, w]);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    {
        let xd = tape.value(x).data();
        let gd = tape.value(gamma).data();
        let bd = tape.value(beta).data();
        let xh = xhat.data_mut();
        let od = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, istd, gam, bet) = (mean[ci], invstd[ci], gd[ci], bd[ci]);
                for i in base..base + hw {
                    let v = (xd[i] - mu) * istd;
                    xh[i] = v;
                    od[i] = gam * v + bet;
                }
            }
        }
    }

    let stats = BatchStats {
        mean: mean.clone(),
        var_biased: var,
        count: m,
    };
    let var_node = tape.push_op(out, &[x, gamma, beta], move || {
        Box::new(move |g, tape, sink| {
            let gd_up = g.data();
            let gam = tape.value(gamma).data().to_vec();
            // per-channel reductions of the upstream gradient
            let mut sum_g = vec![T::ZERO; c];
            let mut sum_gx = vec![T::ZERO; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let (mut a, mut b2) = (T::ZERO, T::ZERO);
                    for i in base..base + hw {
                        a += gd_up[i];
                        b2 += gd_up[i] * xhat.data()[i];
                    }
                    sum_g[ci] += a;
                    sum_gx[ci] += b2;
                }
            }
            if tape.requires_grad(gamma) {
                sink.accum(gamma, Tensor::from_vec(sum_gx.clone()));
            }
            if tape.requires_grad(beta) {
                sink.accum(beta, Tensor::from_vec(sum_g.clone()));
            }
            if tape.requires_grad(x) {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dxd = dx.data_mut();
                let inv_m = T::from_f64(1.0 / m as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let scale = gam[ci] * invstd[ci];
                        let mg = sum_g[ci] * inv_m;
                        let mgx = sum_gx[ci] * inv_m;
                        for i in base..base + hw {
                            dxd[i] = scale * (gd_up[i] - mg - xhat.data()[i] * mgx);
                        }
                    }
                }
                sink.accum(x, dx);
            }
        })
    });
    Ok((var_node, stats))
}

/// Eval-mode forward using frozen running statistics.
pub fn batchnorm_eval<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var> {
    let (n, c, h, w) = check_input(tape, x, gamma)?;
    let hw = h * w;
    let rm = running_mean.data().to_vec();
    let invstd: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::ONE / (v + T::from_f64(eps)).sqrt())
        .collect();

    let mut out = Tensor::zeros(&[n, c, h, w]);
    {
        let xd = tape.value(x).data();
        let gd = tape.value(gamma).data();
        let bd = tape.value(beta).data();
        let od = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    od[i] = gd[ci] * (xd[i] - rm[ci]) * invstd[ci] + bd[ci];
                }
            }
        }
    }

    Ok(tape.push_op(out, &[x, gamma, beta], move || {
        Box::new(move |g, tape, sink| {
            let gd_up = g.data();
            let gam = tape.value(gamma).data().to_vec();
            let xd = tape.value(x).data();
            if tape.requires_grad(x) {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dxd = dx.data_mut();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let scale = gam[ci] * invstd[ci];
                        for i in base..base + hw {
                            dxd[i] = gd_up[i] * scale;
                        }
                    }
                }
                sink.accum(x, dx);
            }
            if tape.requires_grad(gamma) || tape.requires_grad(beta) {
                let mut dgam = vec![T::ZERO; c];
                let mut dbet = vec![T::ZERO; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in base..base + hw {
                            dgam[ci] += gd_up[i] * (xd[i] - rm[ci]) * invstd[ci];
                            dbet[ci] += gd_up[i];
                        }
                    }
                }
                if tape.requires_grad(gamma) {
                    sink.accum(gamma, Tensor::from_vec(dgam));
                }
                if tape.requires_grad(beta) {
                    sink.accum(beta, Tensor::from_vec(dbet));
                }
            }
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, Rng};

    fn train_forward(
        x: &Tensor<f64>,
        gamma: &Tensor<f64>,
        beta: &Tensor<f64>,
    ) -> (Tensor<f64>, BatchStats<f64>) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let gv = tape.constant(gamma.clone());
        let bv = tape.constant(beta.clone());
        let (y, stats) = batchnorm_train(&mut tape, xv, gv, bv, 1e-5).unwrap();
        (tape.value(y).clone(), stats)
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::full(&[4, 2, 3, 3], 3.7f64);
        let (y, _) = train_forward(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]));
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn pre_normalized_pair_stays_put() {
        // inputs {-1, 1} per channel: mean 0, var 1
        let x = Tensor::from_fn(&[2, 1, 1, 1], |i| if i == 0 { -1.0 } else { 1.0 });
        let (y, _) = train_forward(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]));
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + scale).abs() < 1e-9);
        assert!((y.data()[1] - scale).abs() < 1e-9);
    }

    #[test]
    fn output_statistics_are_standardized() {
        let mut rng = Rng::seeded(61, streams::TEST);
        let x = Tensor::from_fn(&[8, 3, 4, 4], |_| rng.uniform(-2.0, 5.0));
        let (y, _) = train_forward(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]));
        let (n, c, hw) = (8, 3, 16);
        for ci in 0..c {
            let mut vals = Vec::new();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                vals.extend_from_slice(&y.data()[base..base + hw]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "channel {ci} mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "channel {ci} var {v}");
        }
    }

    #[test]
    fn single_element_batch_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 1, 1], 1.0f64));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            batchnorm_train(&mut tape, x, g, b, 1e-5),
            Err(Error::BatchTooSmall { elements: 1 })
        ));
    }

    #[test]
    fn running_stats_track_batch_stats() {
        let mut layer = BatchNorm2d::<f64>::new(1);
        let stats = BatchStats {
            mean: vec![2.0],
            var_biased: vec![4.0],
            count: 8,
        };
        layer.update_running(&stats);
        assert!((layer.running_mean.data()[0] - 0.2).abs() < 1e-12);
        let unbiased = 4.0 * 8.0 / 7.0;
        assert!((layer.running_var.data()[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let rm = Tensor::from_vec(vec![1.0f64]);
        let rv = Tensor::from_vec(vec![4.0f64]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 1, 1], 3.0f64));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = batchnorm_eval(&mut tape, x, g, b, &rm, &rv, 1e-5).unwrap();
        let expect = (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn train_gradients_match_finite_differences() {
        let mut rng = Rng::seeded(62, streams::TEST);
        let x0 = Tensor::from_fn(&[3, 2, 2, 2], |_| rng.uniform(-1.0, 1.0));
        let g0 = Tensor::from_fn(&[2], |_| rng.uniform(0.5, 1.5));
        let b0 = Tensor::from_fn(&[2], |_| rng.uniform(-0.5, 0.5));
        let lw = Tensor::from_fn(&[3, 2, 2, 2], |_| rng.uniform(0.5, 1.5));

        let eval = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let gv = tape.constant(g.clone());
            let bv = tape.constant(b.clone());
            let (y, _) = batchnorm_train(&mut tape, xv, gv, bv, 1e-5).unwrap();
            let w = tape.constant(lw.clone());
            let p = tape.mul(y, w).unwrap();
            let s = tape.sum(p);
            tape.value(s).item()
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone(), true);
        let gv = tape.leaf(g0.clone(), true);
        let bv = tape.leaf(b0.clone(), true);
        let (y, _) = batchnorm_train(&mut tape, xv, gv, bv, 1e-5).unwrap();
        let w = tape.constant(lw.clone());
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();

        let h = 1e-5;
        for (name, var, base) in [("x", xv, &x0), ("gamma", gv, &g0), ("beta", bv, &b0)] {
            let analytic = grads.get(var).unwrap();
            for i in 0..base.numel() {
                let mut plus = base.clone();
                plus.data_mut()[i] += h;
                let mut minus = base.clone();
                minus.data_mut()[i] -= h;
                let numeric = match name {
                    "x" => (eval(&plus, &g0, &b0) - eval(&minus, &g0, &b0)) / (2.0 * h),
                    "gamma" => (eval(&x0, &plus, &b0) - eval(&x0, &minus, &b0)) / (2.0 * h),
                    _ => (eval(&x0, &g0, &plus) - eval(&x0, &g0, &minus)) / (2.0 * h),
                };
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0) < 1e-5,
                    "{name}[{i}]: {a} vs {numeric}"
                );
            }
        }
    }
}
