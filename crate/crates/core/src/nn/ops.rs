//! Parameter-free operations: ReLU, pooling.

use super::{fromf, Scalar};
use ndarray::{s, Array2, Array4, ArrayView4};

/// Elementwise `max(0, x)`.
pub fn relu<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Backward of ReLU given the forward *output* (y > 0 iff x > 0).
pub fn relu_backward<F: Scalar>(grad_out: &Array4<F>, output: &Array4<F>) -> Array4<F> {
    let mut dx = grad_out.clone();
    dx.zip_mut_with(output, |g, &y| {
        if y <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

/// In-place variants used on hot paths.
pub fn relu_inplace<F: Scalar>(x: &mut Array4<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Global average pooling: (n, c, h, w) -> (n, c).
pub fn global_avg_pool<F: Scalar>(x: &ArrayView4<'_, F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let scale = F::one() / fromf::<F>((h * w) as f64);
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            out[[ni, ci]] = x.slice(s![ni, ci, .., ..]).sum() * scale;
        }
    }
    out
}

/// Backward of global average pooling: broadcast grad / (h*w).
pub fn global_avg_pool_backward<F: Scalar>(
    grad_out: &Array2<F>,
    h: usize,
    w: usize,
) -> Array4<F> {
    let (n, c) = grad_out.dim();
    let scale = F::one() / fromf::<F>((h * w) as f64);
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            dx.slice_mut(s![ni, ci, .., ..]).fill(grad_out[[ni, ci]] * scale);
        }
    }
    dx
}

/// Max pooling with argmax bookkeeping for the backward pass. Only used by
/// the large-input stem (kernel 3, stride 2, padding 1).
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Option<(Array4<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d { kernel, stride, padding, argmax: None }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<F: Scalar>(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (out, arg) = self.pool(&x.view());
        if train {
            self.argmax = Some((arg, x.dim()));
        }
        out
    }

    pub fn forward_eval<F: Scalar>(&self, x: &ArrayView4<'_, F>) -> Array4<F> {
        self.pool(x).0
    }

    fn pool<F: Scalar>(&self, x: &ArrayView4<'_, F>) -> (Array4<F>, Array4<usize>) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut arg = Array4::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.slice(s![ni, ci, .., ..]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0usize;
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = plane[[iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        out[[ni, ci, oy, ox]] = best;
                        arg[[ni, ci, oy, ox]] = best_idx;
                    }
                }
            }
        }
        (out, arg)
    }

    pub fn backward<F: Scalar>(&self, grad_out: &Array4<F>) -> Array4<F> {
        let (arg, in_dim) = self.argmax.as_ref().expect("maxpool backward without forward");
        let (n, c, h, w) = *in_dim;
        let mut dx = Array4::zeros((n, c, h, w));
        let (_, _, oh, ow) = grad_out.dim();
        for ni in 0..n {
            for ci in 0..c {
                let mut plane = dx.slice_mut(s![ni, ci, .., ..]);
                let flat = plane.as_slice_mut().unwrap();
                for oy in 0..oh {
                    for ox in 0..ow {
                        flat[arg[[ni, ci, oy, ox]]] += grad_out[[ni, ci, oy, ox]];
                    }
                }
            }
        }
        dx
    }
}
