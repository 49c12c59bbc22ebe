//! Differentiable layers and their forward primitives.

pub mod conv;
pub mod icb;
pub mod kan;
pub mod kan_mini;
pub mod linear;
pub mod norm;
pub mod pool;

pub use conv::{conv2d_forward, Conv2d};
pub use icb::{icb_forward, IcbLayer};
pub use kan::{kan_linear_forward, KanLinear};
pub use kan_mini::{kan_mini_forward, KanLinearMini, MiniConfig};
pub use linear::{linear_forward, Linear};
pub use norm::{batchnorm_eval, batchnorm_train, BatchNorm2d};
pub use pool::maxpool2d_forward;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// A parameter registered on the tape during one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BoundParam {
    /// Index into the layer's `params()` list.
    pub slot: usize,
    pub var: Var,
}

/// `lambda * sum |coefficients|` over a layer's spline coefficients.
/// The subgradient at zero is zero.
pub fn spline_l1_penalty<T: Element>(
    tape: &mut Tape<T>,
    coefficients: Var,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::NegativeLambda(lambda));
    }
    let s = tape.l1_sum(coefficients);
    Ok(tape.scale(s, T::from_f64(lambda)))
}

/// Any layer of the architecture family.
#[derive(Clone, Debug)]
pub enum Layer<T: Element> {
    Icb(IcbLayer<T>),
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    MaxPool,
    Gelu,
    Flatten,
    Linear(Linear<T>),
    KanLinear(KanLinear<T>),
    KanLinearMini(KanLinearMini<T>),
}

impl<T: Element> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Icb(_) => "icb",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::MaxPool => "maxpool",
            Layer::Gelu => "gelu",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
            Layer::KanLinear(_) => "kan_linear",
            Layer::KanLinearMini(_) => "kan_linear_mini",
        }
    }

    /// Trainable parameters in slot order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Icb(l) => vec![
                ("conv3.weight", &l.conv3.weight),
                ("conv3.bias", &l.conv3.bias),
                ("conv5.weight", &l.conv5.weight),
                ("conv5.bias", &l.conv5.bias),
            ],
            Layer::Conv2d(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &l.gamma), ("beta", &l.beta)],
            Layer::MaxPool | Layer::Gelu | Layer::Flatten => vec![],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::KanLinear(l) => vec![
                ("weight", &l.weight),
                ("coefficients", &l.coefficients),
            ],
            Layer::KanLinearMini(l) => vec![
                ("w_base", &l.w_base),
                ("bias", &l.bias),
                ("w_spline", &l.w_spline),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::Icb(l) => vec![
                ("conv3.weight", &mut l.conv3.weight),
                ("conv3.bias", &mut l.conv3.bias),
                ("conv5.weight", &mut l.conv5.weight),
                ("conv5.bias", &mut l.conv5.bias),
            ],
            Layer::Conv2d(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            Layer::MaxPool | Layer::Gelu | Layer::Flatten => vec![],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::KanLinear(l) => vec![
                ("weight", &mut l.weight),
                ("coefficients", &mut l.coefficients),
            ],
            Layer::KanLinearMini(l) => vec![
                ("w_base", &mut l.w_base),
                ("bias", &mut l.bias),
                ("w_spline", &mut l.w_spline),
            ],
        }
    }

    /// Non-trainable state that still belongs in checkpoints.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &l.running_mean),
                ("running_var", &l.running_var),
            ],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            _ => vec![],
        }
    }

    /// Slot of the spline-coefficient parameter, when the layer has one.
    pub fn spline_coeff_slot(&self) -> Option<usize> {
        match self {
            Layer::KanLinear(_) => Some(1),
            Layer::KanLinearMini(_) => Some(2),
            _ => None,
        }
    }

    /// Training forward: parameters become differentiable leaves (reported
    /// through `bound`), batch-norm layers consume batch statistics and
    /// update their running estimates.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        bound: &mut Vec<BoundParam>,
    ) -> Result<Var> {
        let mut bind = |tape: &mut Tape<T>, params: Vec<&Tensor<T>>| -> Vec<Var> {
            params
                .into_iter()
                .enumerate()
                .map(|(slot, p)| {
                    let var = tape.leaf(p.clone(), true);
                    bound.push(BoundParam { slot, var });
                    var
                })
                .collect()
        };
        match self {
            Layer::Icb(l) => {
                let vars = bind(
                    tape,
                    vec![&l.conv3.weight, &l.conv3.bias, &l.conv5.weight, &l.conv5.bias],
                );
                icb_forward(tape, x, vars[0], vars[1], vars[2], vars[3])
            }
            Layer::Conv2d(l) => {
                let vars = bind(tape, vec![&l.weight, &l.bias]);
                conv2d_forward(tape, x, vars[0], vars[1], l.stride, l.padding)
            }
            Layer::BatchNorm(l) => {
                let vars = bind(tape, vec![&l.gamma, &l.beta]);
                let (y, stats) = batchnorm_train(tape, x, vars[0], vars[1], l.eps)?;
                l.update_running(&stats);
                Ok(y)
            }
            Layer::MaxPool => maxpool2d_forward(tape, x),
            Layer::Gelu => Ok(tape.gelu(x)),
            Layer::Flatten => flatten(tape, x),
            Layer::Linear(l) => {
                let vars = bind(tape, vec![&l.weight, &l.bias]);
                linear_forward(tape, x, vars[0], vars[1])
            }
            Layer::KanLinear(l) => {
                let vars = bind(tape, vec![&l.weight, &l.coefficients]);
                kan_linear_forward(tape, x, vars[0], vars[1], &l.basis)
            }
            Layer::KanLinearMini(l) => {
                let vars = bind(tape, vec![&l.w_base, &l.bias, &l.w_spline]);
                kan_mini_forward(tape, x, vars[0], vars[1], vars[2], &l.config)
            }
        }
    }

    /// Evaluation forward: parameters are constants, batch-norm layers use
    /// their running statistics, no state is mutated.
    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Layer::Icb(l) => {
                let w3 = tape.constant(l.conv3.weight.clone());
                let b3 = tape.constant(l.conv3.bias.clone());
                let w5 = tape.constant(l.conv5.weight.clone());
                let b5 = tape.constant(l.conv5.bias.clone());
                icb_forward(tape, x, w3, b3, w5, b5)
            }
            Layer::Conv2d(l) => {
                let w = tape.constant(l.weight.clone());
                let b = tape.constant(l.bias.clone());
                conv2d_forward(tape, x, w, b, l.stride, l.padding)
            }
            Layer::BatchNorm(l) => {
                let g = tape.constant(l.gamma.clone());
                let b = tape.constant(l.beta.clone());
                batchnorm_eval(tape, x, g, b, &l.running_mean, &l.running_var, l.eps)
            }
            Layer::MaxPool => maxpool2d_forward(tape, x),
            Layer::Gelu => Ok(tape.gelu(x)),
            Layer::Flatten => flatten(tape, x),
            Layer::Linear(l) => {
                let w = tape.constant(l.weight.clone());
                let b = tape.constant(l.bias.clone());
                linear_forward(tape, x, w, b)
            }
            Layer::KanLinear(l) => {
                let w = tape.constant(l.weight.clone());
                let c = tape.constant(l.coefficients.clone());
                kan_linear_forward(tape, x, w, c, &l.basis)
            }
            Layer::KanLinearMini(l) => {
                let wb = tape.constant(l.w_base.clone());
                let b = tape.constant(l.bias.clone());
                let ws = tape.constant(l.w_spline.clone());
                kan_mini_forward(tape, x, wb, b, ws, &l.config)
            }
        }
    }
}

fn flatten<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "flatten",
            lhs: shape,
            rhs: vec![],
        });
    }
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    tape.reshape(x, &[n, rest])
}
