//! Interactive convolutional block: parallel 3x3 and 5x5 convolutions with
//! GELU on each path, combined by elementwise multiplication. Same-padding
//! (1 and 2) keeps both paths spatially aligned.

use crate::error::Result;
use crate::layers::conv::{conv2d_forward, Conv2d};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Element;

#[derive(Clone, Debug)]
pub struct IcbLayer<T: Element> {
    pub conv3: Conv2d<T>,
    pub conv5: Conv2d<T>,
}

impl<T: Element> IcbLayer<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        IcbLayer {
            conv3: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            conv5: Conv2d::new(c_in, c_out, 5, 1, 2, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.out_channels()
    }
}

/// `gelu(conv3(x)) * gelu(conv5(x))`, spatial size preserved.
#[allow(clippy::too_many_arguments)]
pub fn icb_forward<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    w3: Var,
    b3: Var,
    w5: Var,
    b5: Var,
) -> Result<Var> {
    let p3 = conv2d_forward(tape, x, w3, b3, 1, 1)?;
    let p5 = conv2d_forward(tape, x, w5, b5, 1, 2)?;
    let a3 = tape.gelu(p3);
    let a5 = tape.gelu(p5);
    tape.mul(a3, a5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::rng::{streams, Rng};
    use crate::tensor::Tensor;

    fn run_icb(
        x: &Tensor<f64>,
        c3: &Conv2d<f64>,
        c5: &Conv2d<f64>,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w3 = tape.constant(c3.weight.clone());
        let b3 = tape.constant(c3.bias.clone());
        let w5 = tape.constant(c5.weight.clone());
        let b5 = tape.constant(c5.bias.clone());
        let y = icb_forward(&mut tape, xv, w3, b3, w5, b5).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_first_path_annihilates_output() {
        let mut rng = Rng::seeded(81, streams::TEST);
        let mut c3 = Conv2d::new(1, 2, 3, 1, 1, &mut rng);
        let c5 = Conv2d::new(1, 2, 5, 1, 2, &mut rng);
        c3.weight = Tensor::zeros(c3.weight.shape());
        c3.bias = Tensor::zeros(c3.bias.shape());
        let x = Tensor::from_fn(&[1, 1, 4, 4], |_| rng.uniform(-1.0, 1.0));
        let y = run_icb(&x, &c3, &c5);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_preserves_spatial_size() {
        let mut rng = Rng::seeded(82, streams::TEST);
        let c3 = Conv2d::new(1, 64, 3, 1, 1, &mut rng);
        let c5 = Conv2d::new(1, 64, 5, 1, 2, &mut rng);
        let x = Tensor::zeros(&[1, 1, 28, 28]);
        let y = run_icb(&x, &c3, &c5);
        assert_eq!(y.shape(), &[1, 64, 28, 28]);
    }

    #[test]
    fn single_pixel_matches_scalar_hand_computation() {
        // 1x1 spatial input: only the center taps of the kernels see data
        let mut rng = Rng::seeded(83, streams::TEST);
        let mut c3 = Conv2d::new(1, 1, 3, 1, 1, &mut rng);
        let mut c5 = Conv2d::new(1, 1, 5, 1, 2, &mut rng);
        for v in c3.weight.data_mut() {
            *v = 0.0;
        }
        for v in c5.weight.data_mut() {
            *v = 0.0;
        }
        c3.weight.data_mut()[4] = 0.7; // center of 3x3
        c5.weight.data_mut()[12] = -1.3; // center of 5x5
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = run_icb(&x, &c3, &c5);
        let gelu = |v: f64| v * math::normal_cdf(v);
        let expect = gelu(0.7 * 2.0) * gelu(-1.3 * 2.0);
        assert!((y.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn swapping_paths_is_commutative() {
        let mut rng = Rng::seeded(84, streams::TEST);
        let c3 = Conv2d::new(2, 3, 3, 1, 1, &mut rng);
        let c5 = Conv2d::new(2, 3, 5, 1, 2, &mut rng);
        let x = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.uniform(-1.0, 1.0));

        let forward = run_icb(&x, &c3, &c5);
        // swapped: evaluate conv5 path first, then conv3, multiply the
        // other way around
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w3 = tape.constant(c3.weight.clone());
        let b3 = tape.constant(c3.bias.clone());
        let w5 = tape.constant(c5.weight.clone());
        let b5 = tape.constant(c5.bias.clone());
        let p5 = conv2d_forward(&mut tape, xv, w5, b5, 1, 2).unwrap();
        let p3 = conv2d_forward(&mut tape, xv, w3, b3, 1, 1).unwrap();
        let a5 = tape.gelu(p5);
        let a3 = tape.gelu(p3);
        let y = tape.mul(a5, a3).unwrap();
        let swapped = tape.value(y).clone();

        assert!(forward.max_abs_diff(&swapped) < 1e-12);
    }
}
