use ndarray::{Array4, Zip};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

/// Elementwise activation caching its input and output.
#[derive(Debug, Clone)]
pub struct Act {
    pub kind: ActKind,
    input: Option<Array4<f64>>,
    output: Option<Array4<f64>>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Act {
    pub fn new(kind: ActKind) -> Self {
        Self {
            kind,
            input: None,
            output: None,
        }
    }

    pub fn apply(kind: ActKind, x: f64) -> f64 {
        match kind {
            ActKind::Relu => x.max(0.0),
            ActKind::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            ActKind::Tanh => x.tanh(),
            ActKind::Sigmoid => sigmoid(x),
        }
    }

    pub fn forward(&mut self, x: Array4<f64>) -> Array4<f64> {
        let kind = self.kind;
        let y = x.mapv(|v| Self::apply(kind, v));
        self.output = Some(y.clone());
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self.input.as_ref().expect("forward before backward");
        let y = self.output.as_ref().expect("forward before backward");
        let mut dx = dy.clone();
        match self.kind {
            ActKind::Relu => Zip::from(&mut dx).and(x).for_each(|d, &xi| {
                if xi <= 0.0 {
                    *d = 0.0
                }
            }),
            ActKind::LeakyRelu(a) => Zip::from(&mut dx).and(x).for_each(|d, &xi| {
                if xi <= 0.0 {
                    *d *= a
                }
            }),
            ActKind::Tanh => Zip::from(&mut dx).and(y).for_each(|d, &yi| *d *= 1.0 - yi * yi),
            ActKind::Sigmoid => Zip::from(&mut dx).and(y).for_each(|d, &yi| *d *= yi * (1.0 - yi)),
        }
        dx
    }
}
