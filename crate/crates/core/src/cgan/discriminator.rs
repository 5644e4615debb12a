use ndarray::{concatenate, s, Array1, Array2, Array4, Axis};

use super::{ArchConfig, LayerShape, INIT_STD, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::features::global_avg_pool;
use crate::nn::{sigmoid, Act, ActKind, BatchNorm2d, Conv2d, Mode, Module, Param};
use crate::rng::Rng;

/// One conv-batchnorm-LeakyReLU stage.
#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Act,
}

impl Block {
    fn new(inp: usize, out: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(inp, out, 4, 2, 1, false, INIT_STD, rng),
            bn: BatchNorm2d::new(out, rng),
            act: Act::new(ActKind::LeakyRelu(LEAKY_SLOPE)),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let y = self.conv.forward(x);
        let y = self.bn.forward(&y, mode);
        self.act.forward(y)
    }

    fn finish_eval(&self, y: Array4<f64>) -> Array4<f64> {
        self.bn.apply_eval(&y).mapv(|v| Act::apply(ActKind::LeakyRelu(LEAKY_SLOPE), v))
    }

    fn backward_to_conv_output(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.act.backward(dy);
        self.bn.backward(&d)
    }
}

/// Scores (image, embedding) pairs.
///
/// The image branch and the embedding branch (the vector broadcast to `nef`
/// constant `S x S` channels) each halve the resolution to `ndf` channels;
/// their concatenation runs through conv-batchnorm-LeakyReLU blocks down to
/// 4x4, and a final 4x4 valid convolution yields one logit per sample.
#[derive(Debug, Clone)]
pub struct Discriminator {
    arch: ArchConfig,
    image: Block,
    embed: Block,
    blocks: Vec<Block>,
    head: Conv2d,
    trace: Vec<LayerShape>,
}

impl Discriminator {
    pub fn new(arch: ArchConfig, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let image = Block::new(3, arch.ndf, rng);
        let embed = Block::new(arch.nef, arch.ndf, rng);
        let mut blocks = Vec::new();
        let mut inp = 2 * arch.ndf;
        for out in arch.d_widths() {
            blocks.push(Block::new(inp, out, rng));
            inp = out;
        }
        let head = Conv2d::new(inp, 1, 4, 1, 0, true, INIT_STD, rng);
        Ok(Self {
            arch,
            image,
            embed,
            blocks,
            head,
            trace: Vec::new(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn nef(&self) -> usize {
        self.arch.nef
    }

    pub fn trace(&self) -> &[LayerShape] {
        &self.trace
    }

    /// The final 1-channel convolution (the layer replaced by pooling when
    /// the network is used as a feature extractor).
    pub fn head_mut(&mut self) -> &mut Conv2d {
        &mut self.head
    }

    fn check(&self, img: &Array4<f64>, e: &Array2<f64>) -> Result<()> {
        let (n, c, h, w) = img.dim();
        let s = self.arch.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::dim(format!("discriminator expects 3x{s}x{s} images, got {c}x{h}x{w}")));
        }
        if e.ncols() != self.arch.nef {
            return Err(Error::dim(format!("embedding length {} != discriminator nef {}", e.ncols(), self.arch.nef)));
        }
        if e.nrows() != n {
            return Err(Error::dim(format!("{n} images vs {} embeddings", e.nrows())));
        }
        Ok(())
    }

    /// Training-path forward returning one logit per sample.
    pub fn forward(&mut self, img: &Array4<f64>, e: &Array2<f64>, mode: Mode) -> Result<Array1<f64>> {
        self.check(img, e)?;
        let s = self.arch.image_size;
        self.trace.clear();
        let a = self.image.forward(img, mode);
        self.trace.push(LayerShape::new("conv1_1", 3, a.dim().1, s, a.dim().2));
        let y = self.embed.conv.forward_broadcast(e, s, s);
        let y = self.embed.bn.forward(&y, mode);
        let b = self.embed.act.forward(y);
        self.trace.push(LayerShape::new("conv1_2", self.arch.nef, b.dim().1, s, b.dim().2));
        let mut x = concatenate(Axis(1), &[a.view(), b.view()]).expect("same spatial dims");
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let (cin, rin) = (x.dim().1, x.dim().2);
            x = blk.forward(&x, mode);
            self.trace.push(LayerShape::new(&format!("conv{}", i + 2), cin, x.dim().1, rin, x.dim().2));
        }
        let (cin, rin) = (x.dim().1, x.dim().2);
        let out = self.head.forward(&x);
        let name = format!("conv{}", self.blocks.len() + 2);
        self.trace.push(LayerShape::new(&name, cin, 1, rin, out.dim().2));
        Ok(logits(out))
    }

    /// Eval-mode probabilities `D(img, e)` in `(0, 1)`.
    pub fn predict(&self, img: &Array4<f64>, e: &Array2<f64>) -> Result<Array1<f64>> {
        let fmap = self.feature_map(img, e)?;
        Ok(logits(self.head.apply(&fmap)).mapv(sigmoid))
    }

    /// Eval-mode post-activation map feeding the final layer
    /// (`feature_dim x 4 x 4`).
    pub fn feature_map(&self, img: &Array4<f64>, e: &Array2<f64>) -> Result<Array4<f64>> {
        self.check(img, e)?;
        let s = self.arch.image_size;
        let a = self.image.finish_eval(self.image.conv.apply(img));
        let b = self.embed.finish_eval(self.embed.conv.apply_broadcast(e, s, s));
        let mut x = concatenate(Axis(1), &[a.view(), b.view()]).expect("same spatial dims");
        for blk in &self.blocks {
            x = blk.finish_eval(blk.conv.apply(&x));
        }
        Ok(x)
    }

    /// Pooled features: the head is dropped and the last activation map is
    /// averaged spatially. One row per sample.
    pub fn features(&self, img: &Array4<f64>, e: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(global_avg_pool(&self.feature_map(img, e)?))
    }

    /// Backpropagates `d loss / d logit`; returns `d loss / d image`.
    pub fn backward(&mut self, dlogits: &Array1<f64>) -> Array4<f64> {
        let n = dlogits.len();
        let dout = dlogits.clone().into_shape_with_order((n, 1, 1, 1)).expect("reshape");
        let mut d = self.head.backward(&dout);
        for blk in self.blocks.iter_mut().rev() {
            let dy = blk.backward_to_conv_output(&d);
            d = blk.conv.backward(&dy);
        }
        let ndf = self.arch.ndf;
        let da = d.slice(s![.., ..ndf, .., ..]).to_owned();
        let db = d.slice(s![.., ndf.., .., ..]).to_owned();
        let db = self.embed.backward_to_conv_output(&db);
        self.embed.conv.backward(&db);
        let da = self.image.backward_to_conv_output(&da);
        self.image.conv.backward(&da)
    }
}

fn logits(out: Array4<f64>) -> Array1<f64> {
    let n = out.dim().0;
    out.to_shape(n).expect("one logit per sample").to_owned()
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for blk in std::iter::once(&self.image).chain(std::iter::once(&self.embed)).chain(&self.blocks) {
            v.extend(blk.conv.params());
            v.extend(blk.bn.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for blk in std::iter::once(&mut self.image).chain(std::iter::once(&mut self.embed)).chain(&mut self.blocks) {
            v.extend(blk.conv.params_mut());
            v.extend(blk.bn.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&ndarray::ArrayD<f64>> {
        std::iter::once(&self.image)
            .chain(std::iter::once(&self.embed))
            .chain(&self.blocks)
            .flat_map(|b| b.bn.buffers())
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut ndarray::ArrayD<f64>> {
        std::iter::once(&mut self.image)
            .chain(std::iter::once(&mut self.embed))
            .chain(&mut self.blocks)
            .flat_map(|b| b.bn.buffers_mut())
            .collect()
    }
}
