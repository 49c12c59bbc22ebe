//! Kolmogorov-Arnold linear layer: every input-output edge applies
//! `w * (silu(x) + spline(x))` against a shared B-spline basis, and the
//! output is the sum over input edges.

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::spline::{fit_least_squares, grid_extend, SplineBasis, SplineFunction};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct KanLinear<T: Element> {
    pub weight: Tensor<T>,       // [out, in]
    pub coefficients: Tensor<T>, // [out, in, basis]
    pub basis: SplineBasis<T>,
}

impl<T: Element> KanLinear<T> {
    /// Scaled-uniform edge weights; spline coefficients start near zero so
    /// the residual SiLU path dominates early training.
    pub fn new(
        in_features: usize,
        out_features: usize,
        grid_size: usize,
        degree: usize,
        domain: (T, T),
        rng: &mut Rng,
    ) -> Result<Self> {
        let basis = SplineBasis::uniform(grid_size, degree, domain.0, domain.1)?;
        let nb = basis.num_basis();
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = Tensor::from_fn(&[out_features, in_features], |_| {
            T::from_f64(rng.uniform(-bound, bound))
        });
        let sigma = 0.1 / nb as f64;
        let coefficients = Tensor::from_fn(&[out_features, in_features, nb], |_| {
            T::from_f64(rng.normal() * sigma)
        });
        Ok(KanLinear {
            weight,
            coefficients,
            basis,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Refit every edge spline onto a grid of `new_g` intervals using the
    /// given activation samples `[S, in]`. The refit per edge is the same
    /// least-squares system as [`grid_extend`] over that edge's input
    /// column augmented with the layer-wide extremes, so all edges share
    /// one widened basis. Base weights are untouched.
    pub fn grid_extend_layer(&mut self, new_g: usize, samples: &Tensor<T>) -> Result<()> {
        let p = self.in_features();
        let q = self.out_features();
        if samples.shape().len() != 2 || samples.shape()[1] != p {
            return Err(Error::ShapeMismatch {
                op: "grid_extend samples",
                lhs: samples.shape().to_vec(),
                rhs: vec![0, p],
            });
        }
        let s = samples.shape()[0];
        if s == 0 {
            return Err(Error::RankDeficient);
        }
        if new_g < self.basis.grid_size() {
            return Err(Error::InvalidBasis(format!(
                "new grid size {} below current {}",
                new_g,
                self.basis.grid_size()
            )));
        }
        let (old_lo, old_hi) = self.basis.domain();
        let mut lo = old_lo;
        let mut hi = old_hi;
        for &v in samples.data() {
            lo = lo.minimum(v);
            hi = hi.maximum(v);
        }
        let new_basis = SplineBasis::uniform(new_g, self.basis.degree(), lo, hi)?;
        let nb_new = new_basis.num_basis();
        let nb_old = self.basis.num_basis();
        let mut new_coeffs = Tensor::zeros(&[q, p, nb_new]);

        // Per input column the collocation rows are shared across all output
        // edges; factor once and solve one right-hand side per edge.
        let mut xs_col: Vec<T> = Vec::with_capacity(s + 2);
        for col in 0..p {
            xs_col.clear();
            for row in 0..s {
                xs_col.push(samples.data()[row * p + col]);
            }
            xs_col.push(lo);
            xs_col.push(hi);

            let mut ata = vec![0.0f64; nb_new * nb_new];
            let mut cross = vec![0.0f64; nb_new * nb_old]; // A_new^T * A_old
            for &xv in xs_col.iter() {
                let (ns, nvals) = new_basis.eval_nonzero(xv);
                let (os, ovals) = self.basis.eval_nonzero(self.basis.clamp(xv));
                for (i_off, &bi) in nvals.iter().enumerate() {
                    let i = ns + i_off;
                    let bi = bi.to_f64();
                    for (j_off, &bj) in nvals.iter().enumerate() {
                        ata[i * nb_new + ns + j_off] += bi * bj.to_f64();
                    }
                    for (j_off, &bj) in ovals.iter().enumerate() {
                        cross[i * nb_old + os + j_off] += bi * bj.to_f64();
                    }
                }
            }
            let trace: f64 = (0..nb_new).map(|i| ata[i * nb_new + i]).sum();
            let tau = 1e-8 * trace / nb_new as f64;
            for i in 0..nb_new {
                ata[i * nb_new + i] += tau;
            }
            let chol = cholesky_factor(&mut ata, nb_new)?;

            for out in 0..q {
                let cold = &self.coefficients.data()
                    [(out * p + col) * nb_old..(out * p + col + 1) * nb_old];
                let mut rhs = vec![0.0f64; nb_new];
                for i in 0..nb_new {
                    let mut acc = 0.0;
                    for j in 0..nb_old {
                        acc += cross[i * nb_old + j] * cold[j].to_f64();
                    }
                    rhs[i] = acc;
                }
                let sol = cholesky_solve_factored(&chol, &rhs, nb_new);
                let dst = &mut new_coeffs.data_mut()
                    [(out * p + col) * nb_new..(out * p + col + 1) * nb_new];
                for (d, v) in dst.iter_mut().zip(&sol) {
                    *d = T::from_f64(v);
                }
            }
        }
        self.coefficients = new_coeffs;
        self.basis = new_basis;
        Ok(())
    }

    /// One edge as a standalone spline function (used by tests and tools).
    pub fn edge_spline(&self, out: usize, inp: usize) -> SplineFunction<T> {
        let nb = self.basis.num_basis();
        let p = self.in_features();
        let start = (out * p + inp) * nb;
        SplineFunction::new(
            self.basis.clone(),
            self.coefficients.data()[start..start + nb].to_vec(),
        )
        .expect("edge coefficients match basis")
    }
}

fn cholesky_factor(a: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for p in 0..j {
                sum -= a[i * n + p] * a[j * n + p];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::RankDeficient);
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    Ok(a.to_vec())
}

fn cholesky_solve_factored(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for p in 0..i {
            y[i] -= l[i * n + p] * y[p];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for p in i + 1..n {
            y[i] -= l[p * n + i] * y[p];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Forward pass `y[n,q] = sum_p w[q,p] * (silu(x[n,p]) + spline_qp(x[n,p]))`
/// with inputs clamped into the basis domain for the spline path.
pub fn kan_linear_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    c: Var,
    basis: &SplineBasis<T>,
) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(w).shape().to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "kan_linear",
            lhs: xs,
            rhs: ws,
        });
    }
    let (n, p, q) = (xs[0], xs[1], ws[0]);
    let nb = basis.num_basis();
    if tape.value(c).shape() != [q, p, nb] {
        return Err(Error::ShapeMismatch {
            op: "kan_linear coefficients",
            lhs: tape.value(c).shape().to_vec(),
            rhs: vec![q, p, nb],
        });
    }

    // dense basis matrix over clamped inputs, [n, p*nb]
    let mut bmat = Tensor::zeros(&[n, p * nb]);
    {
        let xd = tape.value(x).data();
        let bd = bmat.data_mut();
        for (row, &xv) in xd.iter().enumerate() {
            let (start, vals) = basis.eval_nonzero(basis.clamp(xv));
            let base = row * nb;
            bd[base + start..base + start + vals.len()].copy_from_slice(&vals);
        }
    }

    let silu_x = tape.value(x).map(|v| v * sigmoid(v));

    // per-edge product of weight and coefficients, [q, p*nb]
    let mut wc = Tensor::zeros(&[q, p * nb]);
    {
        let wd = tape.value(w).data();
        let cd = tape.value(c).data();
        let dst = wc.data_mut();
        for qi in 0..q {
            for pi in 0..p {
                let wqp = wd[qi * p + pi];
                let base = (qi * p + pi) * nb;
                for i in 0..nb {
                    dst[base + i] = wqp * cd[base + i];
                }
            }
        }
    }

    let mut out = Tensor::zeros(&[n, q]);
    kernels::matmul_nt(silu_x.data(), tape.value(w).data(), n, p, q, out.data_mut());
    let mut spline_part = vec![T::ZERO; n * q];
    kernels::matmul_nt(bmat.data(), wc.data(), n, p * nb, q, &mut spline_part);
    for (o, &s) in out.data_mut().iter_mut().zip(&spline_part) {
        *o += s;
    }

    let basis = basis.clone();
    Ok(tape.push_op(out, &[x, w, c], move || {
        Box::new(move |g, tape, sink| {
            let gd = g.data();
            let xv = tape.value(x);
            let wd = tape.value(w).data();
            let cd = tape.value(c).data();

            // m[q, p*nb] = g^T * bmat, shared by the weight and coefficient grads
            let mut m = vec![T::ZERO; q * p * nb];
            kernels::matmul_tn(gd, bmat.data(), q, n, p * nb, &mut m);

            if tape.requires_grad(c) {
                let mut dc = Tensor::zeros(&[q, p, nb]);
                let dcd = dc.data_mut();
                for qi in 0..q {
                    for pi in 0..p {
                        let wqp = wd[qi * p + pi];
                        let base = (qi * p + pi) * nb;
                        for i in 0..nb {
                            dcd[base + i] = wqp * m[base + i];
                        }
                    }
                }
                sink.accum(c, dc);
            }

            if tape.requires_grad(w) {
                let silu_x = xv.map(|v| v * sigmoid(v));
                let mut dw = Tensor::zeros(&[q, p]);
                kernels::matmul_tn(gd, silu_x.data(), q, n, p, dw.data_mut());
                let dwd = dw.data_mut();
                for qi in 0..q {
                    for pi in 0..p {
                        let base = (qi * p + pi) * nb;
                        let mut acc = T::ZERO;
                        for i in 0..nb {
                            acc += cd[base + i] * m[base + i];
                        }
                        dwd[qi * p + pi] += acc;
                    }
                }
                sink.accum(w, dw);
            }

            if tape.requires_grad(x) {
                // silu path
                let mut dx = Tensor::zeros(&[n, p]);
                kernels::matmul(gd, wd, n, q, p, dx.data_mut());
                {
                    let dxd = dx.data_mut();
                    for (d, &xraw) in dxd.iter_mut().zip(xv.data()) {
                        let s = sigmoid(xraw);
                        *d *= s + xraw * s * (T::ONE - s);
                    }
                }
                // spline path: e[n, p*nb] = g * wc, contracted with basis
                // derivatives at the clamped inputs
                let mut e = vec![T::ZERO; n * p * nb];
                kernels::matmul(gd, wc.data(), n, q, p * nb, &mut e);
                let (lo, hi) = basis.domain();
                let dxd = dx.data_mut();
                for (row, &xraw) in xv.data().iter().enumerate() {
                    if xraw < lo || xraw > hi {
                        continue; // clamp derivative is zero outside
                    }
                    let (start, _, derivs) = basis.eval_nonzero_with_deriv(xraw);
                    let base = row * nb;
                    let mut acc = T::ZERO;
                    for (off, &db) in derivs.iter().enumerate() {
                        acc += e[base + start + off] * db;
                    }
                    dxd[row] += acc;
                }
                sink.accum(x, dx);
            }
        })
    }))
}
