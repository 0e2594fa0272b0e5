//! Fully connected layer: `y = x W^T + b`.

use super::{init, Scalar};
use ndarray::{Array1, Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Linear<F: Scalar> {
    pub weight: Array2<F>, // (out_features, in_features)
    pub bias: Array1<F>,
    pub grad_weight: Array2<F>,
    pub grad_bias: Array1<F>,
    saved_input: Option<Array2<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: init::linear_weight(out_features, in_features, rng),
            bias: init::linear_bias(out_features, in_features, rng),
            grad_weight: Array2::zeros((out_features, in_features)),
            grad_bias: Array1::zeros(out_features),
            saved_input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&mut self, x: &Array2<F>, train: bool) -> Array2<F> {
        let y = self.forward_eval(&x.view());
        if train {
            self.saved_input = Some(x.clone());
        }
        y
    }

    pub fn forward_eval(&self, x: &ArrayView2<'_, F>) -> Array2<F> {
        assert_eq!(x.ncols(), self.in_features(), "linear input features");
        let mut y = x.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        y
    }

    pub fn backward(&mut self, grad_out: &Array2<F>) -> Array2<F> {
        let x = self.saved_input.as_ref().expect("linear backward without forward");
        self.grad_weight += &grad_out.t().dot(x);
        self.grad_bias += &grad_out.sum_axis(ndarray::Axis(0));
        grad_out.dot(&self.weight)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(F::zero());
        self.grad_bias.fill(F::zero());
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}
