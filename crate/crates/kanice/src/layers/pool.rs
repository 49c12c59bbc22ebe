//! 2x2 max pooling with stride 2.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Max over non-overlapping 2x2 windows; odd trailing rows/columns are
/// dropped (floor division). The gradient flows to the first maximal
/// element of each window in row-major order.
pub fn maxpool2d_forward<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d",
            lhs: xs,
            rhs: vec![0, 0, 0, 0],
        });
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d spatial",
            lhs: vec![h, w],
            rhs: vec![2, 2],
        });
    }

    let numel_in = n * c * h * w;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax: Vec<u32> = vec![0; n * c * oh * ow];
    {
        let xd = tape.value(x).data();
        let od = out.data_mut();
        for plane in 0..n * c {
            let src = plane * h * w;
            let dst = plane * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = src + (2 * oy) * w + 2 * ox;
                    // row-major window order; strict > keeps the first max
                    let mut best_idx = base;
                    let mut best = xd[base];
                    for &cand in &[base + 1, base + w, base + w + 1] {
                        if xd[cand] > best {
                            best = xd[cand];
                            best_idx = cand;
                        }
                    }
                    od[dst + oy * ow + ox] = best;
                    argmax[dst + oy * ow + ox] = best_idx as u32;
                }
            }
        }
    }

    Ok(tape.push_op(out, &[x], move || {
        Box::new(move |g, _tape, sink| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let dxd = dx.data_mut();
            debug_assert!(numel_in == dxd.len());
            for (i, &gv) in g.data().iter().enumerate() {
                dxd[argmax[i] as usize] += gv;
            }
            sink.accum(x, dx);
        })
    }))
}
