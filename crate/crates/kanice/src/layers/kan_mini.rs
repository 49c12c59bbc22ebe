//! Compact Kolmogorov-Arnold linear layer: a grouped linear map plus bias
//! plus a B-spline correction whose weights are optionally shared across
//! input features.

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::spline::SplineBasis;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Static configuration of the compact layer's spline and grouping scheme.
#[derive(Clone, Debug)]
pub struct MiniConfig<T: Element> {
    pub basis: SplineBasis<T>,
    /// Raw inputs are mapped onto the basis domain by
    /// `u(x) = clamp((x - lo) / (hi - lo), 0, 1)`.
    pub input_range: (T, T),
    pub shared: bool,
    /// In the non-shared case, multiply each feature's spline term by the
    /// raw input value (the literal reading of the layer equation).
    pub literal_x_gate: bool,
    pub groups: usize,
}

#[derive(Clone, Debug)]
pub struct KanLinearMini<T: Element> {
    pub w_base: Tensor<T>,   // [groups, out/groups, in/groups]
    pub bias: Tensor<T>,     // [out]
    pub w_spline: Tensor<T>, // [out, basis] shared, [out, in, basis] otherwise
    pub config: MiniConfig<T>,
    in_features: usize,
    out_features: usize,
}

impl<T: Element> KanLinearMini<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_features: usize,
        out_features: usize,
        grid_size: usize,
        degree: usize,
        groups: usize,
        shared: bool,
        literal_x_gate: bool,
        input_range: (T, T),
        rng: &mut Rng,
    ) -> Result<Self> {
        if groups == 0 || in_features % groups != 0 || out_features % groups != 0 {
            return Err(Error::GroupMismatch {
                groups,
                in_features,
                out_features,
            });
        }
        let basis = SplineBasis::uniform(grid_size, degree, T::ZERO, T::ONE)?;
        let nb = basis.num_basis();
        let (gi, go) = (in_features / groups, out_features / groups);
        let bound = 1.0 / (gi as f64).sqrt();
        let w_base = Tensor::from_fn(&[groups, go, gi], |_| {
            T::from_f64(rng.uniform(-bound, bound))
        });
        let sigma = 0.1 / nb as f64;
        let spline_shape: &[usize] = if shared {
            &[out_features, nb]
        } else {
            &[out_features, in_features, nb]
        };
        let w_spline = Tensor::from_fn(spline_shape, |_| T::from_f64(rng.normal() * sigma));
        Ok(KanLinearMini {
            w_base,
            bias: Tensor::zeros(&[out_features]),
            w_spline,
            config: MiniConfig {
                basis,
                input_range,
                shared,
                literal_x_gate,
                groups,
            },
            in_features,
            out_features,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }
}

fn normalize<T: Element>(x: T, range: (T, T)) -> T {
    ((x - range.0) / (range.1 - range.0)).clamp_to(T::ZERO, T::ONE)
}

/// Forward pass: grouped linear base path plus shared bias plus the spline
/// correction.
pub fn kan_mini_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w_base: Var,
    bias: Var,
    w_spline: Var,
    config: &MiniConfig<T>,
) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(w_base).shape().to_vec();
    if xs.len() != 2 || ws.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "kan_mini",
            lhs: xs,
            rhs: ws,
        });
    }
    let (n, in_f) = (xs[0], xs[1]);
    let groups = config.groups;
    let (go, gi) = (ws[1], ws[2]);
    let out_f = groups * go;
    if ws[0] != groups || gi * groups != in_f {
        return Err(Error::GroupMismatch {
            groups,
            in_features: in_f,
            out_features: out_f,
        });
    }
    if tape.value(bias).shape() != [out_f] {
        return Err(Error::ShapeMismatch {
            op: "kan_mini bias",
            lhs: tape.value(bias).shape().to_vec(),
            rhs: vec![out_f],
        });
    }
    let nb = config.basis.num_basis();
    let expected_spline: Vec<usize> = if config.shared {
        vec![out_f, nb]
    } else {
        vec![out_f, in_f, nb]
    };
    if tape.value(w_spline).shape() != expected_spline.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "kan_mini spline weights",
            lhs: tape.value(w_spline).shape().to_vec(),
            rhs: expected_spline,
        });
    }

    // grouped linear base path plus bias
    let mut out = Tensor::zeros(&[n, out_f]);
    {
        let xd = tape.value(x).data();
        let wd = tape.value(w_base).data();
        let bd = tape.value(bias).data();
        let od = out.data_mut();
        let mut xg = vec![T::ZERO; n * gi];
        let mut yg = vec![T::ZERO; n * go];
        for g in 0..groups {
            for row in 0..n {
                xg[row * gi..(row + 1) * gi]
                    .copy_from_slice(&xd[row * in_f + g * gi..row * in_f + (g + 1) * gi]);
            }
            kernels::matmul_nt(&xg, &wd[g * go * gi..(g + 1) * go * gi], n, gi, go, &mut yg);
            for row in 0..n {
                od[row * out_f + g * go..row * out_f + (g + 1) * go]
                    .copy_from_slice(&yg[row * go..(row + 1) * go]);
            }
        }
        for row in od.chunks_mut(out_f) {
            for (v, &b) in row.iter_mut().zip(bd) {
                *v += b;
            }
        }
    }

    // spline path
    let shared = config.shared;
    let literal = config.literal_x_gate;
    let range = config.input_range;
    // shared: accumulated basis activations [n, nb];
    // non-shared: gated dense basis matrix [n, in*nb]
    let spline_inputs: Tensor<T>;
    {
        let xd = tape.value(x).data();
        if shared {
            let mut beta = Tensor::zeros(&[n, nb]);
            let bd = beta.data_mut();
            for row in 0..n {
                for j in 0..in_f {
                    let u = normalize(xd[row * in_f + j], range);
                    let (start, vals) = config.basis.eval_nonzero(u);
                    for (off, &v) in vals.iter().enumerate() {
                        bd[row * nb + start + off] += v;
                    }
                }
            }
            spline_inputs = beta;
        } else {
            let mut bg = Tensor::zeros(&[n, in_f * nb]);
            let bd = bg.data_mut();
            for row in 0..n {
                for j in 0..in_f {
                    let xraw = xd[row * in_f + j];
                    let gate = if literal { xraw } else { T::ONE };
                    let u = normalize(xraw, range);
                    let (start, vals) = config.basis.eval_nonzero(u);
                    let base = (row * in_f + j) * nb;
                    for (off, &v) in vals.iter().enumerate() {
                        bd[base + start + off] = gate * v;
                    }
                }
            }
            spline_inputs = bg;
        }
    }
    {
        let inner = spline_inputs.shape()[1];
        let mut s = vec![T::ZERO; n * out_f];
        kernels::matmul_nt(
            spline_inputs.data(),
            tape.value(w_spline).data(),
            n,
            inner,
            out_f,
            &mut s,
        );
        for (o, &sv) in out.data_mut().iter_mut().zip(&s) {
            *o += sv;
        }
    }

    let basis = config.basis.clone();
    Ok(tape.push_op(out, &[x, w_base, bias, w_spline], move || {
        Box::new(move |g, tape, sink| {
            let gd = g.data();
            let xv = tape.value(x);
            let xd = xv.data();

            if tape.requires_grad(bias) {
                let mut db = Tensor::zeros(&[out_f]);
                let dbd = db.data_mut();
                for row in gd.chunks(out_f) {
                    for (acc, &gv) in dbd.iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                sink.accum(bias, db);
            }

            if tape.requires_grad(w_base) || tape.requires_grad(x) {
                let wd = tape.value(w_base).data();
                let mut dwb = Tensor::zeros(&[groups, go, gi]);
                let mut dx_base = Tensor::zeros(&[n, in_f]);
                let mut xg = vec![T::ZERO; n * gi];
                let mut gg = vec![T::ZERO; n * go];
                let mut tmp_w = vec![T::ZERO; go * gi];
                let mut tmp_x = vec![T::ZERO; n * gi];
                for grp in 0..groups {
                    for row in 0..n {
                        xg[row * gi..(row + 1) * gi].copy_from_slice(
                            &xd[row * in_f + grp * gi..row * in_f + (grp + 1) * gi],
                        );
                        gg[row * go..(row + 1) * go].copy_from_slice(
                            &gd[row * out_f + grp * go..row * out_f + (grp + 1) * go],
                        );
                    }
                    if tape.requires_grad(w_base) {
                        kernels::matmul_tn(&gg, &xg, go, n, gi, &mut tmp_w);
                        dwb.data_mut()[grp * go * gi..(grp + 1) * go * gi]
                            .copy_from_slice(&tmp_w);
                    }
                    if tape.requires_grad(x) {
                        kernels::matmul(
                            &gg,
                            &wd[grp * go * gi..(grp + 1) * go * gi],
                            n,
                            go,
                            gi,
                            &mut tmp_x,
                        );
                        for row in 0..n {
                            dx_base.data_mut()
                                [row * in_f + grp * gi..row * in_f + (grp + 1) * gi]
                                .copy_from_slice(&tmp_x[row * gi..(row + 1) * gi]);
                        }
                    }
                }
                if tape.requires_grad(w_base) {
                    sink.accum(w_base, dwb);
                }
                if tape.requires_grad(x) {
                    // spline contribution is added below via the same sink
                    sink.accum(x, dx_base);
                }
            }

            if tape.requires_grad(w_spline) {
                let inner = spline_inputs.shape()[1];
                let mut dws = Tensor::zeros(tape.value(w_spline).shape());
                kernels::matmul_tn(gd, spline_inputs.data(), out_f, n, inner, dws.data_mut());
                sink.accum(w_spline, dws);
            }

            if tape.requires_grad(x) {
                let wsd = tape.value(w_spline).data();
                let inv_span = T::ONE / (range.1 - range.0);
                let mut dx = Tensor::zeros(&[n, in_f]);
                let dxd = dx.data_mut();
                if shared {
                    // dbeta[n, nb] = g * w_spline
                    let mut dbeta = vec![T::ZERO; n * nb];
                    kernels::matmul(gd, wsd, n, out_f, nb, &mut dbeta);
                    for row in 0..n {
                        for j in 0..in_f {
                            let xraw = xd[row * in_f + j];
                            let t = (xraw - range.0) * inv_span;
                            if t < T::ZERO || t > T::ONE {
                                continue;
                            }
                            let (start, _, derivs) =
                                basis.eval_nonzero_with_deriv(t.clamp_to(T::ZERO, T::ONE));
                            let mut acc = T::ZERO;
                            for (off, &db) in derivs.iter().enumerate() {
                                acc += dbeta[row * nb + start + off] * db;
                            }
                            dxd[row * in_f + j] = acc * inv_span;
                        }
                    }
                } else {
                    // dbg[n, in*nb] = g * w_spline_flat
                    let mut dbg = vec![T::ZERO; n * in_f * nb];
                    kernels::matmul(gd, wsd, n, out_f, in_f * nb, &mut dbg);
                    for row in 0..n {
                        for j in 0..in_f {
                            let xraw = xd[row * in_f + j];
                            let t = (xraw - range.0) * inv_span;
                            let in_range = t >= T::ZERO && t <= T::ONE;
                            let u = t.clamp_to(T::ZERO, T::ONE);
                            let (start, vals, derivs) = basis.eval_nonzero_with_deriv(u);
                            let base = (row * in_f + j) * nb;
                            let gate = if literal { xraw } else { T::ONE };
                            let dgate = if literal { T::ONE } else { T::ZERO };
                            let mut acc = T::ZERO;
                            for (off, (&bv, &db)) in
                                vals.iter().zip(derivs.iter()).enumerate()
                            {
                                let mut term = dgate * bv;
                                if in_range {
                                    term += gate * db * inv_span;
                                }
                                acc += dbg[base + start + off] * term;
                            }
                            dxd[row * in_f + j] = acc;
                        }
                    }
                }
                sink.accum(x, dx);
            }
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::linear::linear_forward;
    use crate::rng::{streams, Rng};

    fn forward(layer: &KanLinearMini<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wb = tape.constant(layer.w_base.clone());
        let bv = tape.constant(layer.bias.clone());
        let ws = tape.constant(layer.w_spline.clone());
        let y = kan_mini_forward(&mut tape, xv, wb, bv, ws, &layer.config).unwrap();
        tape.value(y).clone()
    }

    /// Direct loop implementation of the grouped-linear + spline forward.
    fn oracle(layer: &KanLinearMini<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (n, in_f) = (x.shape()[0], layer.in_features());
        let out_f = layer.out_features();
        let cfg = &layer.config;
        let groups = cfg.groups;
        let (go, gi) = (out_f / groups, in_f / groups);
        let nb = cfg.basis.num_basis();
        let mut out = Tensor::zeros(&[n, out_f]);
        for ni in 0..n {
            for q in 0..out_f {
                let grp = q / go;
                let mut acc = layer.bias.data()[q];
                // block-diagonal base path
                for jj in 0..gi {
                    let j = grp * gi + jj;
                    let w = layer.w_base.data()[(grp * go + (q - grp * go)) * gi + jj];
                    acc += w * x.data()[ni * in_f + j];
                }
                // spline path over every input feature
                for j in 0..in_f {
                    let xraw = x.data()[ni * in_f + j];
                    let u = normalize(xraw, cfg.input_range);
                    let bvals = cfg.basis.eval(u);
                    let mut s = 0.0;
                    for i in 0..nb {
                        let w = if cfg.shared {
                            layer.w_spline.data()[q * nb + i]
                        } else {
                            layer.w_spline.data()[(q * in_f + j) * nb + i]
                        };
                        s += w * bvals[i];
                    }
                    if !cfg.shared && cfg.literal_x_gate {
                        s *= xraw;
                    }
                    acc += s;
                }
                out.data_mut()[ni * out_f + q] = acc;
            }
        }
        out
    }

    fn make(
        n: usize,
        m: usize,
        groups: usize,
        shared: bool,
        literal: bool,
        seed: u64,
    ) -> KanLinearMini<f64> {
        let mut rng = Rng::seeded(seed, streams::TEST);
        KanLinearMini::new(n, m, 8, 3, groups, shared, literal, (-1.0, 1.0), &mut rng).unwrap()
    }

    #[test]
    fn group_mismatch_is_rejected() {
        let mut rng = Rng::seeded(1, streams::TEST);
        assert!(matches!(
            KanLinearMini::<f64>::new(5, 2, 2, 8, 3, true, true, (-1.0, 1.0), &mut rng)
                .map(|_| ())
                .unwrap_err(),
            Error::GroupMismatch { .. }
        ));
    }

    #[test]
    fn dead_spline_single_group_equals_plain_linear() {
        let mut layer = make(4, 3, 1, true, true, 5);
        layer.w_spline = Tensor::zeros(layer.w_spline.shape());
        let mut rng = Rng::seeded(6, streams::TEST);
        let x = Tensor::from_fn(&[3, 4], |_| rng.uniform(-1.0, 1.0));

        let mini_out = forward(&layer, &x);

        let weight = layer.w_base.reshape(&[3, 4]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(weight);
        let bv = tape.constant(layer.bias.clone());
        let y = linear_forward(&mut tape, xv, wv, bv).unwrap();
        assert!(mini_out.max_abs_diff(tape.value(y)) < 1e-12);
    }

    #[test]
    fn shared_constant_rows_collapse_by_partition_of_unity() {
        let in_f = 4;
        let mut layer = make(in_f, 2, 1, true, true, 7);
        layer.w_base = Tensor::zeros(layer.w_base.shape());
        layer.bias = Tensor::zeros(layer.bias.shape());
        let c0 = 0.25;
        layer.w_spline = Tensor::full(layer.w_spline.shape(), c0);
        let mut rng = Rng::seeded(8, streams::TEST);
        let x = Tensor::from_fn(&[3, in_f], |_| rng.uniform(-1.0, 1.0));
        let y = forward(&layer, &x);
        // each feature's basis values sum to 1, so S_q = in_f * c0
        let expect = in_f as f64 * c0;
        for &v in y.data() {
            assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
        }
    }

    #[test]
    fn matches_loop_oracle_across_modes() {
        let mut rng = Rng::seeded(9, streams::TEST);
        for (shared, literal) in [(true, true), (true, false), (false, true), (false, false)] {
            for trial in 0..10 {
                let layer = make(4, 2, 2, shared, literal, 300 + trial);
                let x = Tensor::from_fn(&[3, 4], |_| rng.uniform(-1.5, 1.5));
                let fast = forward(&layer, &x);
                let slow = oracle(&layer, &x);
                assert!(
                    fast.max_abs_diff(&slow) < 1e-5,
                    "shared={shared} literal={literal} trial={trial}: {}",
                    fast.max_abs_diff(&slow)
                );
            }
        }
    }

    #[test]
    fn grouped_consistency_with_block_diagonal_weights() {
        // a C=2 layer equals a C=1 layer whose full weight matrix is the
        // corresponding block-diagonal embedding
        let grouped = make(4, 2, 2, true, true, 10);
        let mut full = make(4, 2, 1, true, true, 11);
        full.bias = grouped.bias.clone();
        full.w_spline = grouped.w_spline.clone();
        let mut w = Tensor::zeros(&[1, 2, 4]);
        // group 0: out 0, in 0..2 ; group 1: out 1, in 2..4
        let gd = grouped.w_base.data();
        w.data_mut()[0] = gd[0];
        w.data_mut()[1] = gd[1];
        w.data_mut()[4 + 2] = gd[2];
        w.data_mut()[4 + 3] = gd[3];
        full.w_base = w;

        let mut rng = Rng::seeded(12, streams::TEST);
        let x = Tensor::from_fn(&[5, 4], |_| rng.uniform(-1.0, 1.0));
        assert!(forward(&grouped, &x).max_abs_diff(&forward(&full, &x)) < 1e-12);
    }

    #[test]
    fn parameter_count_formulas() {
        // shared, single group: m*n + m + m*(g+k)
        let layer = make(6, 4, 1, true, true, 13);
        let total = layer.w_base.numel() + layer.bias.numel() + layer.w_spline.numel();
        assert_eq!(total, 4 * 6 + 4 + 4 * 11);
        // shared, two groups: m*n/2 + m + m*(g+k)
        let layer = make(6, 4, 2, true, true, 14);
        let total = layer.w_base.numel() + layer.bias.numel() + layer.w_spline.numel();
        assert_eq!(total, 4 * 6 / 2 + 4 + 4 * 11);
        // non-shared, single group: m*n + m + m*n*(g+k)
        let layer = make(6, 4, 1, false, true, 15);
        let total = layer.w_base.numel() + layer.bias.numel() + layer.w_spline.numel();
        assert_eq!(total, 4 * 6 + 4 + 4 * 6 * 11);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::seeded(16, streams::TEST);
        for (shared, literal) in [(true, false), (false, true), (false, false)] {
            let layer = make(4, 2, 2, shared, literal, 400);
            let x0 = Tensor::from_fn(&[2, 4], |_| rng.uniform(-0.9, 0.9));
            let lw = Tensor::from_fn(&[2, 2], |_| rng.uniform(0.5, 1.5));

            let eval = |x: &Tensor<f64>,
                        wb: &Tensor<f64>,
                        b: &Tensor<f64>,
                        ws: &Tensor<f64>| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let wbv = tape.constant(wb.clone());
                let bv = tape.constant(b.clone());
                let wsv = tape.constant(ws.clone());
                let y = kan_mini_forward(&mut tape, xv, wbv, bv, wsv, &layer.config).unwrap();
                let l = tape.constant(lw.clone());
                let p = tape.mul(y, l).unwrap();
                let s = tape.sum(p);
                tape.value(s).item()
            };

            let mut tape = Tape::new();
            let xv = tape.leaf(x0.clone(), true);
            let wbv = tape.leaf(layer.w_base.clone(), true);
            let bv = tape.leaf(layer.bias.clone(), true);
            let wsv = tape.leaf(layer.w_spline.clone(), true);
            let y = kan_mini_forward(&mut tape, xv, wbv, bv, wsv, &layer.config).unwrap();
            let l = tape.constant(lw.clone());
            let p = tape.mul(y, l).unwrap();
            let s = tape.sum(p);
            let grads = tape.backward(s).unwrap();

            let h = 1e-5;
            let cases: [(&str, Var, &Tensor<f64>); 4] = [
                ("x", xv, &x0),
                ("w_base", wbv, &layer.w_base),
                ("bias", bv, &layer.bias),
                ("w_spline", wsv, &layer.w_spline),
            ];
            for (name, var, base) in cases {
                let analytic = grads.get(var).unwrap();
                for i in 0..base.numel() {
                    let mut plus = base.clone();
                    plus.data_mut()[i] += h;
                    let mut minus = base.clone();
                    minus.data_mut()[i] -= h;
                    let numeric = match name {
                        "x" => {
                            (eval(&plus, &layer.w_base, &layer.bias, &layer.w_spline)
                                - eval(&minus, &layer.w_base, &layer.bias, &layer.w_spline))
                                / (2.0 * h)
                        }
                        "w_base" => {
                            (eval(&x0, &plus, &layer.bias, &layer.w_spline)
                                - eval(&x0, &minus, &layer.bias, &layer.w_spline))
                                / (2.0 * h)
                        }
                        "bias" => {
                            (eval(&x0, &layer.w_base, &plus, &layer.w_spline)
                                - eval(&x0, &layer.w_base, &minus, &layer.w_spline))
                                / (2.0 * h)
                        }
                        _ => {
                            (eval(&x0, &layer.w_base, &layer.bias, &plus)
                                - eval(&x0, &layer.w_base, &layer.bias, &minus))
                                / (2.0 * h)
                        }
                    };
                    let a = analytic.data()[i];
                    assert!(
                        (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0) < 1e-3,
                        "shared={shared} literal={literal} {name}[{i}]: {a} vs {numeric}"
                    );
                }
            }
        }
    }
}
