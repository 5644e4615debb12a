//! Small residual CNN over ground images: the desk-scale stand-in for a deep
//! classifier, split into a feature extractor (pooled 512D) and a linear
//! head.

use std::path::Path;

use image::RgbImage;
use log::info;
use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{accuracy, check_labels, join, parse_list, Classifier};
use crate::checkpoint::{read_blob, write_blob};
use crate::error::{Error, Result};
use crate::features::global_avg_pool;
use crate::imageops::batch_from_images;
use crate::nn::{Act, ActKind, Adam, BatchNorm2d, Conv2d, Linear, Mode, Module, Param};
use crate::rng::{derive_indexed, derive_seed, rng, Rng};

pub const CNN_FEATURE_DIM: usize = 512;
const MAGIC: &str = "groundview-refcnn v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnParams {
    /// Channel width of each residual stage; every stage after the first
    /// halves the resolution.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CnnParams {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32, 64],
            epochs: 6,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

fn he(inp: usize, k: usize) -> f64 {
    (2.0 / (inp * k * k) as f64).sqrt()
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(inp: usize, out: usize, k: usize, stride: usize, r: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(inp, out, k, stride, k / 2, false, he(inp, k), r),
            bn: BatchNorm2d::identity(out),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let y = self.conv.forward(x);
        self.bn.forward(&y, mode)
    }

    fn apply(&self, x: &Array4<f64>) -> Array4<f64> {
        self.bn.apply_eval(&self.conv.apply(x))
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.bn.backward(dy);
        self.conv.backward(&d)
    }

    fn modules(&self) -> [&dyn Module; 2] {
        [&self.conv, &self.bn]
    }

    fn modules_mut(&mut self) -> [&mut dyn Module; 2] {
        [&mut self.conv, &mut self.bn]
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
    proj: Option<ConvBn>,
    mid: Act,
    out: Act,
}

impl ResBlock {
    fn new(inp: usize, out: usize, stride: usize, r: &mut Rng) -> Self {
        Self {
            a: ConvBn::new(inp, out, 3, stride, r),
            b: ConvBn::new(out, out, 3, 1, r),
            proj: (inp != out || stride != 1).then(|| ConvBn::new(inp, out, 1, stride, r)),
            mid: Act::new(ActKind::Relu),
            out: Act::new(ActKind::Relu),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let h = self.a.forward(x, mode);
        let h = self.mid.forward(h);
        let h = self.b.forward(&h, mode);
        let sc = match &mut self.proj {
            Some(p) => p.forward(x, mode),
            None => x.clone(),
        };
        self.out.forward(h + sc)
    }

    fn apply(&self, x: &Array4<f64>) -> Array4<f64> {
        let h = self.a.apply(x).mapv(|v| v.max(0.0));
        let h = self.b.apply(&h);
        let sc = match &self.proj {
            Some(p) => p.apply(x),
            None => x.clone(),
        };
        (h + sc).mapv(|v| v.max(0.0))
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.out.backward(dy);
        let dh = self.b.backward(&d);
        let dh = self.mid.backward(&dh);
        let dx = self.a.backward(&dh);
        let dsc = match &mut self.proj {
            Some(p) => p.backward(&d),
            None => d,
        };
        dx + dsc
    }

    fn modules(&self) -> Vec<&dyn Module> {
        let mut v: Vec<&dyn Module> = self.a.modules().into();
        v.extend(self.b.modules());
        if let Some(p) = &self.proj {
            v.extend(p.modules());
        }
        v
    }

    fn modules_mut(&mut self) -> Vec<&mut dyn Module> {
        let mut v: Vec<&mut dyn Module> = self.a.modules_mut().into();
        v.extend(self.b.modules_mut());
        if let Some(p) = &mut self.proj {
            v.extend(p.modules_mut());
        }
        v
    }
}

/// stem (3x3/2) -> residual stages -> 1x1 to 512 -> ReLU -> global average
/// pool (the feature) -> linear head.
#[derive(Debug, Clone)]
pub struct ReferenceCnn {
    stem: ConvBn,
    stem_act: Act,
    blocks: Vec<ResBlock>,
    expand: ConvBn,
    expand_act: Act,
    head: Linear,
    pool_hw: (usize, usize),
    pub classes: Vec<usize>,
    pub params: CnnParams,
    pub train_accuracy: f64,
}

impl ReferenceCnn {
    pub fn new(classes: Vec<usize>, params: CnnParams) -> Result<Self> {
        if params.widths.is_empty() || params.widths.contains(&0) {
            return Err(Error::config("reference CNN needs at least one non-zero stage width"));
        }
        if classes.len() < 2 {
            return Err(Error::DegenerateLabels(format!("need at least two classes, got {:?}", classes)));
        }
        let mut r = rng(derive_seed(params.seed, "refcnn-init"));
        let w0 = params.widths[0];
        let stem = ConvBn::new(3, w0, 3, 2, &mut r);
        let mut blocks = Vec::new();
        let mut inp = w0;
        for (i, &w) in params.widths.iter().enumerate() {
            blocks.push(ResBlock::new(inp, w, if i == 0 { 1 } else { 2 }, &mut r));
            inp = w;
        }
        let expand = ConvBn::new(inp, CNN_FEATURE_DIM, 1, 1, &mut r);
        let head = Linear::new(CNN_FEATURE_DIM, classes.len(), (1.0 / CNN_FEATURE_DIM as f64).sqrt(), &mut r);
        Ok(Self {
            stem,
            stem_act: Act::new(ActKind::Relu),
            blocks,
            expand,
            expand_act: Act::new(ActKind::Relu),
            head,
            pool_hw: (0, 0),
            classes,
            params,
            train_accuracy: 0.0,
        })
    }

    fn forward_features(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let h = self.stem.forward(x, mode);
        let mut h = self.stem_act.forward(h);
        for b in &mut self.blocks {
            h = b.forward(&h, mode);
        }
        let h = self.expand.forward(&h, mode);
        let h = self.expand_act.forward(h);
        self.pool_hw = (h.dim().2, h.dim().3);
        global_avg_pool(&h)
    }

    fn backward_features(&mut self, df: &Array2<f64>) {
        let (n, c) = df.dim();
        let (h, w) = self.pool_hw;
        let scale = 1.0 / (h * w) as f64;
        let d = Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| df[[i, j]] * scale);
        let d = self.expand_act.backward(&d);
        let mut d = self.expand.backward(&d);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        let d = self.stem_act.backward(&d);
        self.stem.backward(&d);
    }

    /// Eval-mode pooled 512D features, one row per image.
    pub fn features(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut h = self.stem.apply(x).mapv(|v| v.max(0.0));
        for b in &self.blocks {
            h = b.apply(&h);
        }
        let h = self.expand.apply(&h).mapv(|v| v.max(0.0));
        global_avg_pool(&h)
    }

    /// Features of RGB images, batched.
    pub fn image_features(&self, imgs: &[&RgbImage]) -> Result<Array2<f64>> {
        let mut parts = Vec::new();
        for chunk in imgs.chunks(64) {
            parts.push(self.features(&batch_from_images(chunk.iter().copied())));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::dim(e.to_string()))
    }

    pub fn predict_images(&self, imgs: &[&RgbImage]) -> Result<Vec<usize>> {
        self.predict(self.image_features(imgs)?.view())
    }

    fn modules(&self) -> Vec<&dyn Module> {
        let mut v: Vec<&dyn Module> = self.stem.modules().into();
        for b in &self.blocks {
            v.extend(b.modules());
        }
        v.extend(self.expand.modules());
        v.push(&self.head);
        v
    }

    fn modules_mut(&mut self) -> Vec<&mut dyn Module> {
        let mut v: Vec<&mut dyn Module> = self.stem.modules_mut().into();
        for b in &mut self.blocks {
            v.extend(b.modules_mut());
        }
        v.extend(self.expand.modules_mut());
        v.push(&mut self.head);
        v
    }

    pub fn save(&self, path: &Path, fingerprint: &str) -> Result<()> {
        let header = vec![
            ("kind".to_string(), "reference-cnn".to_string()),
            ("widths".to_string(), join(&self.params.widths)),
            ("epochs".to_string(), self.params.epochs.to_string()),
            ("batch_size".to_string(), self.params.batch_size.to_string()),
            ("learning_rate".to_string(), format!("{:?}", self.params.learning_rate)),
            ("seed".to_string(), self.params.seed.to_string()),
            ("classes".to_string(), join(&self.classes)),
            ("train_accuracy".to_string(), format!("{:?}", self.train_accuracy)),
            ("fingerprint".to_string(), fingerprint.to_string()),
        ];
        write_blob(path, MAGIC, &header, &self.flat_state())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, vals) = read_blob(path, MAGIC)?;
        let bad = |k: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("missing or invalid header field {k}"),
        };
        let get = |k: &str| h.get(k).ok_or_else(|| bad(k));
        let params = CnnParams {
            widths: parse_list(get("widths")?, path)?,
            epochs: get("epochs")?.parse().map_err(|_| bad("epochs"))?,
            batch_size: get("batch_size")?.parse().map_err(|_| bad("batch_size"))?,
            learning_rate: get("learning_rate")?.parse().map_err(|_| bad("learning_rate"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        };
        let mut m = Self::new(parse_list(get("classes")?, path)?, params)?;
        m.train_accuracy = get("train_accuracy")?.parse().map_err(|_| bad("train_accuracy"))?;
        let mut it = vals.into_iter();
        for module in m.modules_mut() {
            for p in module.params_mut() {
                for w in p.value.iter_mut() {
                    *w = it.next().ok_or_else(|| bad("payload"))?;
                }
            }
            for b in module.buffers_mut() {
                for w in b.iter_mut() {
                    *w = it.next().ok_or_else(|| bad("payload"))?;
                }
            }
        }
        if it.next().is_some() {
            return Err(bad("payload"));
        }
        Ok(m)
    }

    /// Parameters and running statistics, in checkpoint order.
    pub fn flat_state(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for m in self.modules() {
            v.extend(m.flat_params());
            for b in m.buffers() {
                v.extend(b.iter().copied());
            }
        }
        v
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.modules().iter().flat_map(|m| m.flat_params()).collect()
    }

    fn all_params_mut(&mut self) -> Vec<&mut Param> {
        self.modules_mut().into_iter().flat_map(|m| m.params_mut()).collect()
    }
}

impl Classifier for ReferenceCnn {
    fn dim(&self) -> usize {
        CNN_FEATURE_DIM
    }

    fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn scores(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != CNN_FEATURE_DIM {
            return Err(Error::dim(format!("CNN head expects {CNN_FEATURE_DIM}D features, got {}D", x.ncols())));
        }
        Ok(self.head.apply(&x.to_owned()))
    }
}

/// Softmax cross-entropy: mean loss and gradient w.r.t. the logits.
fn softmax_xent(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &t) in grad.rows_mut().into_iter().zip(targets) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
        loss -= row[t].max(1e-300).ln();
        row[t] -= 1.0;
        row.mapv_inplace(|v| v / n);
    }
    (loss / n, grad)
}

/// Train the reference CNN on labelled ground images.
pub fn train_reference_cnn(images: &[&RgbImage], labels: &[usize], hp: &CnnParams) -> Result<ReferenceCnn> {
    let dummy = Array2::<f64>::zeros((labels.len(), 1));
    let classes = check_labels(dummy.view(), labels)?;
    if images.len() != labels.len() {
        return Err(Error::dim(format!("{} images for {} labels", images.len(), labels.len())));
    }
    if let Some(bad) = images.iter().find(|i| i.dimensions() != (64, 64)) {
        return Err(Error::dim(format!("reference CNN expects 64x64 images, got {:?}", bad.dimensions())));
    }
    if hp.batch_size < 2 {
        return Err(Error::config("reference CNN batch_size must be >= 2"));
    }
    if !(hp.learning_rate >= 0.0 && hp.learning_rate.is_finite()) {
        return Err(Error::config("reference CNN learning_rate must be finite and non-negative"));
    }
    let mut model = ReferenceCnn::new(classes.clone(), hp.clone())?;
    let targets: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("known class")).collect();
    let mut opt = Adam::new(hp.learning_rate, 0.9, 0.999);
    let n = images.len();
    let bs = hp.batch_size.min(n);
    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(derive_indexed(hp.seed, "refcnn-shuffle", epoch as u64)));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks_exact(bs) {
            let x = batch_from_images(chunk.iter().map(|&i| images[i]));
            let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            for m in model.modules_mut() {
                m.zero_grad();
            }
            let f = model.forward_features(&x, Mode::Train);
            let logits = model.head.forward(&f);
            let (loss, dlogits) = softmax_xent(&logits, &t);
            if !loss.is_finite() {
                return Err(Error::Divergence { step: steps });
            }
            let df = model.head.backward(&dlogits);
            model.backward_features(&df);
            opt.step(model.all_params_mut());
            total += loss;
            steps += 1;
        }
        info!("reference cnn epoch {epoch}: mean loss {:.4}", total / steps.max(1) as f64);
    }
    let pred = model.predict_images(images)?;
    model.train_accuracy = accuracy(&pred, labels);
    Ok(model)
}
