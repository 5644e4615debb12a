use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use super::{Mode, Module, Param};
use crate::rng::Rng;

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    mode: Mode,
}

impl BatchNorm2d {
    /// Scale initialised from N(1, 0.02), shift zero.
    pub fn new(ch: usize, rng: &mut Rng) -> Self {
        Self {
            gamma: Param::normal(&[ch], 1.0, 0.02, rng),
            beta: Param::zeros(&[ch]),
            running_mean: ArrayD::zeros(IxDyn(&[ch])),
            running_var: ArrayD::ones(IxDyn(&[ch])),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// Unit scale, zero shift.
    pub fn identity(ch: usize) -> Self {
        Self {
            gamma: Param::filled(&[ch], 1.0),
            beta: Param::zeros(&[ch]),
            running_mean: ArrayD::zeros(IxDyn(&[ch])),
            running_var: ArrayD::ones(IxDyn(&[ch])),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Eval-mode normalisation without caching.
    pub fn apply_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut y = x.clone();
        for ci in 0..self.channels() {
            let is = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (mu, g, b) = (self.running_mean[ci], self.gamma.value[ci], self.beta.value[ci]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * (v - mu) * is + b);
        }
        y
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let m = (n * h * w) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for (ci, ch) in x.axis_iter(Axis(1)).enumerate() {
                    let mu = ch.sum() / m;
                    let v = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ci in 0..c {
                    self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
                    self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var[ci] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                Array1::from_iter(self.running_mean.iter().copied()),
                Array1::from_iter(self.running_var.iter().copied()),
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        let mut y = x.clone();
        for ci in 0..c {
            let (mu, is, g, b) = (mean[ci], inv_std[ci], self.gamma.value[ci], self.beta.value[ci]);
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - mu) * is);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * (v - mu) * is + b);
        }
        self.cache = Some(Cache { xhat, inv_std, mode });
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.as_ref().expect("forward before backward");
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let mut dx = dy.clone();
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy = dyc.sum();
            let sum_dy_xh: f64 = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            self.gamma.grad[ci] += sum_dy_xh;
            self.beta.grad[ci] += sum_dy;
            let scale = self.gamma.value[ci] * cache.inv_std[ci];
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            match cache.mode {
                Mode::Train => {
                    ndarray::Zip::from(&mut dxc).and(&xh).for_each(|d, &x| {
                        *d = scale * (*d - sum_dy / m - x * sum_dy_xh / m);
                    });
                }
                Mode::Eval => dxc.mapv_inplace(|d| d * scale),
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&ArrayD<f64>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalises_each_channel() {
        let mut bn = BatchNorm2d::identity(2);
        let x = Array4::from_shape_fn((3, 2, 2, 2), |(n, c, h, w)| (n * 7 + c * 3 + h * 2 + w) as f64 * (c as f64 + 1.0));
        let y = bn.forward(&x, Mode::Train);
        for ch in y.axis_iter(Axis(1)) {
            let mean = ch.mean().unwrap();
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ch.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut bn = BatchNorm2d::identity(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0 - bn.eps;
        let x = Array4::from_elem((1, 1, 1, 1), 6.0);
        let y = bn.forward(&x, Mode::Eval);
        assert!((y[[0, 0, 0, 0]] - 2.0).abs() < 1e-12);
    }
}
