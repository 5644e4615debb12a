use ndarray::Array2;

use super::{Module, Param};
use crate::rng::Rng;

/// Fully connected layer, weight `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(inp: usize, out: usize, init_std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Param::normal(&[out, inp], 0.0, init_std, rng),
            bias: Param::zeros(&[out]),
            input: None,
        }
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality().expect("2d weight")
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Forward without caching (inference on arbitrary inputs).
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1d bias");
        x.dot(&self.w().t()) + &b
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.apply(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.input.as_ref().expect("forward before backward");
        let dw = dy.t().dot(x);
        let mut g = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().expect("2d");
        g += &dw;
        for (gb, col) in self.bias.grad.iter_mut().zip(dy.columns()) {
            *gb += col.sum();
        }
        dy.dot(&self.w())
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
