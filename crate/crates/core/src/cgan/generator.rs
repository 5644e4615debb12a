use ndarray::{concatenate, Array2, Array4, Axis};

use super::{ArchConfig, LayerShape, INIT_STD};
use crate::error::{Error, Result};
use crate::nn::{Act, ActKind, BatchNorm2d, ConvTranspose2d, Mode, Module, Param};
use crate::rng::Rng;

/// Maps `[z, e]` to a `3 x S x S` image in `[-1, 1]`.
///
/// The input is reshaped to a `(nz + nef) x 1 x 1` map; the first block
/// upsamples to 4x4 and every later block doubles the resolution. Interior
/// blocks are deconv-batchnorm-ReLU, the last is deconv-tanh.
#[derive(Debug, Clone)]
pub struct Generator {
    arch: ArchConfig,
    deconvs: Vec<ConvTranspose2d>,
    norms: Vec<BatchNorm2d>,
    acts: Vec<Act>,
    trace: Vec<LayerShape>,
}

impl Generator {
    pub fn new(arch: ArchConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let widths = arch.g_widths();
        let mut deconvs = Vec::new();
        let mut norms = Vec::new();
        let mut acts = Vec::new();
        let mut inp = arch.nz + arch.nef;
        for (i, &out) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let (s, p) = if i == 0 { (1, 0) } else { (2, 1) };
            deconvs.push(ConvTranspose2d::new(inp, out, 4, s, p, last, INIT_STD, rng));
            if last {
                acts.push(Act::new(ActKind::Tanh));
            } else {
                norms.push(BatchNorm2d::new(out, rng));
                acts.push(Act::new(ActKind::Relu));
            }
            inp = out;
        }
        Ok(Self {
            arch,
            deconvs,
            norms,
            acts,
            trace: Vec::new(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn nef(&self) -> usize {
        self.arch.nef
    }

    /// Layer shapes observed during the most recent `forward`.
    pub fn trace(&self) -> &[LayerShape] {
        &self.trace
    }

    fn input(&self, z: &Array2<f64>, e: &Array2<f64>) -> Result<Array4<f64>> {
        if z.ncols() != self.arch.nz {
            return Err(Error::dim(format!("noise length {} != {}", z.ncols(), self.arch.nz)));
        }
        if e.ncols() != self.arch.nef {
            return Err(Error::dim(format!("embedding length {} != generator nef {}", e.ncols(), self.arch.nef)));
        }
        if z.nrows() != e.nrows() {
            return Err(Error::dim(format!("{} noise rows vs {} embedding rows", z.nrows(), e.nrows())));
        }
        let x = concatenate(Axis(1), &[z.view(), e.view()]).expect("same rows");
        let n = x.nrows();
        Ok(x.to_shape((n, self.arch.nz + self.arch.nef, 1, 1)).expect("reshape").to_owned())
    }

    /// Training-path forward; caches activations for `backward`.
    pub fn forward(&mut self, z: &Array2<f64>, e: &Array2<f64>, mode: Mode) -> Result<Array4<f64>> {
        let mut x = self.input(z, e)?;
        self.trace.clear();
        let n_blocks = self.deconvs.len();
        for i in 0..n_blocks {
            let (cin, rin) = (x.dim().1, x.dim().2);
            let mut y = self.deconvs[i].forward(&x);
            if i + 1 < n_blocks {
                y = self.norms[i].forward(&y, mode);
            }
            x = self.acts[i].forward(y);
            self.trace.push(LayerShape::new(&format!("deconv{}", i + 1), cin, x.dim().1, rin, x.dim().2));
        }
        Ok(x)
    }

    /// Eval-mode generation without touching any cache.
    pub fn generate(&self, z: &Array2<f64>, e: &Array2<f64>) -> Result<Array4<f64>> {
        let mut x = self.input(z, e)?;
        let n_blocks = self.deconvs.len();
        for i in 0..n_blocks {
            let mut y = self.deconvs[i].apply(&x);
            if i + 1 < n_blocks {
                y = self.norms[i].apply_eval(&y);
            }
            let kind = self.acts[i].kind;
            x = y.mapv(|v| Act::apply(kind, v));
        }
        Ok(x)
    }

    /// Backpropagates `d loss / d image`; returns `d loss / d [z, e]`.
    pub fn backward(&mut self, dimg: &Array4<f64>) -> Array2<f64> {
        let n_blocks = self.deconvs.len();
        let mut d = dimg.clone();
        for i in (0..n_blocks).rev() {
            d = self.acts[i].backward(&d);
            if i + 1 < n_blocks {
                d = self.norms[i].backward(&d);
            }
            d = self.deconvs[i].backward(&d);
        }
        let (n, c, _, _) = d.dim();
        d.to_shape((n, c)).expect("1x1 input").to_owned()
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for (i, dc) in self.deconvs.iter().enumerate() {
            v.extend(dc.params());
            if let Some(bn) = self.norms.get(i) {
                v.extend(bn.params());
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        let mut norms = self.norms.iter_mut();
        for dc in self.deconvs.iter_mut() {
            v.extend(dc.params_mut());
            if let Some(bn) = norms.next() {
                v.extend(bn.params_mut());
            }
        }
        v
    }

    fn buffers(&self) -> Vec<&ndarray::ArrayD<f64>> {
        self.norms.iter().flat_map(|b| b.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::ArrayD<f64>> {
        self.norms.iter_mut().flat_map(|b| b.buffers_mut()).collect()
    }
}
