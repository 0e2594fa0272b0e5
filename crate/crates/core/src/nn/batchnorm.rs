//! Per-channel batch normalization for NCHW tensors.
//!
//! Training uses batch statistics and keeps exponential running estimates
//! (momentum 0.1, unbiased variance in the running buffer, biased in the
//! normalization itself); evaluation uses the running estimates.

use super::{fromf, Scalar};
use ndarray::{s, Array1, Array4, ArrayView4};

#[derive(Clone, Debug)]
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub grad_gamma: Array1<F>,
    pub grad_beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub eps: F,
    pub momentum: F,
    cache: Option<Cache<F>>,
}

#[derive(Clone, Debug)]
struct Cache<F> {
    xhat: Array4<F>,
    istd: Array1<F>, // 1/sqrt(var + eps), batch statistics
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::one()),
            eps: fromf(1e-5),
            momentum: fromf(0.1),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let m = fromf::<F>((n * h * w) as f64);
        let mut out = Array4::zeros((n, c, h, w));
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut istd = Array1::zeros(c);
        for ci in 0..c {
            let xc = x.slice(s![.., ci, .., ..]);
            let mean = xc.sum() / m;
            let mut var = F::zero();
            for &v in xc.iter() {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / m;
            let inv = F::one() / (var + self.eps).sqrt();
            istd[ci] = inv;
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            let mut xh = xhat.slice_mut(s![.., ci, .., ..]);
            let mut oc = out.slice_mut(s![.., ci, .., ..]);
            for ((xv, xhv), ov) in xc.iter().zip(xh.iter_mut()).zip(oc.iter_mut()) {
                let z = (*xv - mean) * inv;
                *xhv = z;
                *ov = g * z + b;
            }
            // Running buffers track the unbiased variance estimate.
            let unbiased = if n * h * w > 1 {
                var * m / (m - F::one())
            } else {
                var
            };
            let mom = self.momentum;
            self.running_mean[ci] = (F::one() - mom) * self.running_mean[ci] + mom * mean;
            self.running_var[ci] = (F::one() - mom) * self.running_var[ci] + mom * unbiased;
        }
        self.cache = Some(Cache { xhat, istd });
        out
    }

    pub fn forward_eval(&self, x: &ArrayView4<'_, F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let mut out = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let inv = F::one() / (self.running_var[ci] + self.eps).sqrt();
            let mean = self.running_mean[ci];
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            let xc = x.slice(s![.., ci, .., ..]);
            let mut oc = out.slice_mut(s![.., ci, .., ..]);
            for (xv, ov) in xc.iter().zip(oc.iter_mut()) {
                *ov = g * (*xv - mean) * inv + b;
            }
        }
        out
    }

    /// Backward through the batch statistics. Accumulates gamma/beta
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let cache = self.cache.as_ref().expect("batchnorm backward without forward");
        let (n, c, h, w) = grad_out.dim();
        let m = fromf::<F>((n * h * w) as f64);
        let mut dx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let g = grad_out.slice(s![.., ci, .., ..]);
            let xh = cache.xhat.slice(s![.., ci, .., ..]);
            let mut dgamma = F::zero();
            let mut dbeta = F::zero();
            for (&gv, &xv) in g.iter().zip(xh.iter()) {
                dgamma = dgamma + gv * xv;
                dbeta = dbeta + gv;
            }
            self.grad_gamma[ci] = self.grad_gamma[ci] + dgamma;
            self.grad_beta[ci] = self.grad_beta[ci] + dbeta;
            // dxhat = gamma * dout; dx folds in the mean/variance paths:
            // dx = istd/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
            let gamma = self.gamma[ci];
            let sum_dxhat = dbeta * gamma;
            let sum_dxhat_xhat = dgamma * gamma;
            let scale = cache.istd[ci] / m;
            let mut dxc = dx.slice_mut(s![.., ci, .., ..]);
            for ((&gv, &xv), dv) in g.iter().zip(xh.iter()).zip(dxc.iter_mut()) {
                let dxhat = gamma * gv;
                *dv = scale * (m * dxhat - sum_dxhat - xv * sum_dxhat_xhat);
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(F::zero());
        self.grad_beta.fill(F::zero());
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}
