//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Tape::backward`] replays the records in reverse and returns the
//! gradients of all leaves that were registered with `requires_grad`.
//! A tape is single-use: a second backward pass is rejected.

use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::tensor::{BroadcastPlan, Element, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Tape<T>, &mut GradSink<T>) + Send>;

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn<T>>,
}

/// Accumulator for parent gradients during the reverse sweep.
pub struct GradSink<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> GradSink<T> {
    /// Add `delta` into the gradient slot of `var`.
    pub fn accum(&mut self, var: Var, delta: Tensor<T>) {
        match &mut self.grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Gradients keyed by the [`Var`] of each leaf.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Recording of one forward pass.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Register an input value. Only leaves with `requires_grad` appear in
    /// the gradient map.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf: true,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Convenience for a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a primitive. The backward closure is only constructed when
    /// some parent requires a gradient.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        make_backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Var {
        let requires_grad = parents.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = if requires_grad {
            Some(make_backward())
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf: false,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Returns the gradient of every
    /// `requires_grad` leaf; leaves not on the path to the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut sink = GradSink {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        sink.grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].backward.is_none() {
                continue;
            }
            let Some(grad_out) = sink.grads[i].take() else {
                continue;
            };
            let f = self.nodes[i].backward.as_ref().expect("checked above");
            f(&grad_out, self, &mut sink);
        }

        // Leaves off the path still receive a zero gradient; interior
        // gradients were dropped as the sweep consumed them.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad {
                if sink.grads[i].is_none() {
                    sink.grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                sink.grads[i] = None;
            }
        }
        Ok(Gradients { grads: sink.grads })
    }

    // ---- elementwise primitives ----------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |g, _, _, side| match side {
            Side::Lhs => g.clone(),
            Side::Rhs => g.clone(),
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |g, _, _, side| match side {
            Side::Lhs => g.clone(),
            Side::Rhs => g.map(|v| -v),
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |g, av, bv, side| match side {
            Side::Lhs => broadcast_combine(g, bv, |gv, o| gv * o),
            Side::Rhs => broadcast_combine(g, av, |gv, o| gv * o),
        })
    }

    /// Division with IEEE semantics; division by zero yields inf/nan rather
    /// than trapping.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |g, av, bv, side| match side {
            Side::Lhs => broadcast_combine(g, bv, |gv, o| gv / o),
            Side::Rhs => {
                // d/db (a/b) = -a / b^2
                let ga = broadcast_combine(g, av, |gv, o| gv * o);
                broadcast_combine(&ga, bv, |gv, o| -gv / (o * o))
            }
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| -v);
        self.push_op(value, &[a], || {
            Box::new(move |g, _t, sink| sink.accum(a, g.map(|v| -v)))
        })
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push_op(value, &[a], || {
            Box::new(move |g, _t, sink| sink.accum(a, g.map(|v| v * c)))
        })
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        grad: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>, Side) -> Tensor<T> + Send + Copy + 'static,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (value, layout) = apply_binary(op, av, bv, f)?;
        Ok(self.push_op(value, &[a, b], || {
            Box::new(move |g, tape, sink| {
                let av = tape.value(a);
                let bv = tape.value(b);
                if tape.requires_grad(a) {
                    let full = grad(g, av, bv, Side::Lhs);
                    sink.accum(a, reduce_to_shape(&full, av.shape(), layout));
                }
                if tape.requires_grad(b) {
                    let full = grad(g, av, bv, Side::Rhs);
                    sink.accum(b, reduce_to_shape(&full, bv.shape(), layout));
                }
            })
        }))
    }

    // ---- linear algebra -------------------------------------------------

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul(av.data(), bv.data(), m, k, n, out.data_mut());
        Ok(self.push_op(out, &[a, b], || {
            Box::new(move |g, tape, sink| {
                let av = tape.value(a);
                let bv = tape.value(b);
                if tape.requires_grad(a) {
                    // dA = G * B^T
                    let mut da = Tensor::zeros(&[m, k]);
                    kernels::matmul_nt(g.data(), bv.data(), m, n, k, da.data_mut());
                    sink.accum(a, da);
                }
                if tape.requires_grad(b) {
                    // dB = A^T * G
                    let mut db = Tensor::zeros(&[k, n]);
                    kernels::matmul_tn(av.data(), g.data(), k, m, n, db.data_mut());
                    sink.accum(b, db);
                }
            })
        }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let sh = av.shape();
        if sh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: sh.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (sh[0], sh[1]);
        let value = transpose2d(av, r, c);
        Ok(self.push_op(value, &[a], || {
            Box::new(move |g, _t, sink| sink.accum(a, transpose2d(g, c, r)))
        }))
    }

    // ---- reductions and shape -------------------------------------------

    /// Sum of all elements (ascending index order) as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let shape = self.value(a).shape().to_vec();
        let value = Tensor::scalar(total);
        self.push_op(value, &[a], || {
            Box::new(move |g, _t, sink| sink.accum(a, Tensor::full(&shape, g.item())))
        })
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::ONE / T::from_f64(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let old_shape = self.value(a).shape().to_vec();
        Ok(self.push_op(value, &[a], || {
            Box::new(move |g, _t, sink| {
                sink.accum(a, g.reshape(&old_shape).expect("reshape backward"))
            })
        }))
    }

    // ---- activations ------------------------------------------------------

    /// `x * Phi(x)` with `Phi` the standard normal CDF (via erf).
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| {
            let x = v.to_f64();
            T::from_f64(x * math::normal_cdf(x))
        });
        self.push_op(value, &[a], || {
            Box::new(move |g, tape, sink| {
                let x = tape.value(a);
                let dv = x
                    .zip_map(g, |xv, gv| {
                        let x = xv.to_f64();
                        let d = math::normal_cdf(x) + x * math::normal_pdf(x);
                        T::from_f64(d) * gv
                    })
                    .expect("gelu backward shapes");
                sink.accum(a, dv);
            })
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * sigmoid(v));
        self.push_op(value, &[a], || {
            Box::new(move |g, tape, sink| {
                let x = tape.value(a);
                let dv = x
                    .zip_map(g, |xv, gv| {
                        let s = sigmoid(xv);
                        (s + xv * s * (T::ONE - s)) * gv
                    })
                    .expect("silu backward shapes");
                sink.accum(a, dv);
            })
        })
    }

    /// Sum of absolute values as a scalar; subgradient at 0 is 0.
    pub fn l1_sum(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v.abs();
        }
        self.push_op(Tensor::scalar(acc), &[a], || {
            Box::new(move |g, tape, sink| {
                let gv = g.item();
                sink.accum(a, tape.value(a).map(|v| v.sign0() * gv));
            })
        })
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    // split on sign for numerical stability
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn transpose2d<T: Element>(t: &Tensor<T>, r: usize, c: usize) -> Tensor<T> {
    let src = t.data();
    Tensor::from_fn(&[c, r], |i| {
        let (tr, tc) = (i / r, i % r);
        src[tc * c + tr]
    })
}

#[derive(Clone, Copy)]
enum Side {
    Lhs,
    Rhs,
}

/// Which operand carried the full (result) shape.
#[derive(Clone, Copy)]
enum BinaryLayout {
    Equal,
    LhsBig,
    RhsBig,
}

fn apply_binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Tensor<T>, BinaryLayout)> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok((Tensor::new(a.shape().to_vec(), data)?, BinaryLayout::Equal));
    }
    if let Some(plan) = BroadcastPlan::new(a.shape(), b.shape()) {
        let bdata = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bdata[plan.small_index(i)]))
            .collect();
        return Ok((Tensor::new(a.shape().to_vec(), data)?, BinaryLayout::LhsBig));
    }
    if let Some(plan) = BroadcastPlan::new(b.shape(), a.shape()) {
        let adata = a.data();
        let data = b
            .data()
            .iter()
            .enumerate()
            .map(|(i, &y)| f(adata[plan.small_index(i)], y))
            .collect();
        return Ok((Tensor::new(b.shape().to_vec(), data)?, BinaryLayout::RhsBig));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

/// Elementwise combine of a full-shaped gradient with an operand that may be
/// smaller under the trailing broadcast rule.
fn broadcast_combine<T: Element>(
    g: &Tensor<T>,
    operand: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if g.shape() == operand.shape() {
        return g.zip_map(operand, f).expect("equal shapes");
    }
    let plan = BroadcastPlan::new(g.shape(), operand.shape())
        .expect("operand broadcastable onto gradient");
    let od = operand.data();
    Tensor::new(
        g.shape().to_vec(),
        g.data()
            .iter()
            .enumerate()
            .map(|(i, &gv)| f(gv, od[plan.small_index(i)]))
            .collect(),
    )
    .expect("shape preserved")
}

/// Reduce a full-shaped gradient back onto the shape of an operand that was
/// broadcast during the forward op.
fn reduce_to_shape<T: Element>(
    grad: &Tensor<T>,
    target: &[usize],
    _layout: BinaryLayout,
) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let plan = BroadcastPlan::new(grad.shape(), target).expect("reduce plan");
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        od[plan.small_index(i)] += g;
    }
    out
}
