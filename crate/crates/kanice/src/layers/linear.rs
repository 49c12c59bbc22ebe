//! Fully connected layer.

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>, // [out, in]
    pub bias: Tensor<T>,   // [out]
}

impl<T: Element> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            weight: Tensor::from_fn(&[out_features, in_features], |_| {
                T::from_f64(rng.uniform(-bound, bound))
            }),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// `y = x W^T + b` for `x [N, in]`, `w [out, in]`, `b [out]`.
pub fn linear_forward<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(w).shape().to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: xs,
            rhs: ws,
        });
    }
    let (n, p, q) = (xs[0], xs[1], ws[0]);
    if tape.value(b).shape() != [q] {
        return Err(Error::ShapeMismatch {
            op: "linear bias",
            lhs: tape.value(b).shape().to_vec(),
            rhs: vec![q],
        });
    }
    let mut out = Tensor::zeros(&[n, q]);
    kernels::matmul_nt(
        tape.value(x).data(),
        tape.value(w).data(),
        n,
        p,
        q,
        out.data_mut(),
    );
    {
        let bd = tape.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(q) {
            for (v, &bias) in row.iter_mut().zip(&bd) {
                *v += bias;
            }
        }
    }
    Ok(tape.push_op(out, &[x, w, b], move || {
        Box::new(move |g, tape, sink| {
            let gd = g.data();
            if tape.requires_grad(x) {
                let mut dx = Tensor::zeros(&[n, p]);
                kernels::matmul(gd, tape.value(w).data(), n, q, p, dx.data_mut());
                sink.accum(x, dx);
            }
            if tape.requires_grad(w) {
                let mut dw = Tensor::zeros(&[q, p]);
                kernels::matmul_tn(gd, tape.value(x).data(), q, n, p, dw.data_mut());
                sink.accum(w, dw);
            }
            if tape.requires_grad(b) {
                let mut db = Tensor::zeros(&[q]);
                let dbd = db.data_mut();
                for row in gd.chunks(q) {
                    for (acc, &gv) in dbd.iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                sink.accum(b, db);
            }
        })
    }))
}
