use std::io::Write;
use std::path::Path;

use image::RgbImage;
use log::{debug, info};
use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{d_loss, d_loss_fake_grad, d_loss_real_grad, g_loss, g_loss_grad, GLossKind};
use super::{Discriminator, Generator};
use crate::error::{Error, Result};
use crate::geodata::PairedSample;
use crate::imageops::{batch_from_images, resize_bilinear};
use crate::nn::{sigmoid, Adam, Mode, Module};
use crate::rng::{derive_indexed, normal_vec, rng};

/// How the discriminator consumes its real and fake batches each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DUpdate {
    /// Gradients of both halves are summed into one optimizer step.
    #[default]
    Summed,
    /// One optimizer step per half (real first).
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub d_update: DUpdate,
    pub g_loss: GLossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 32,
            epochs: 5,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            max_steps: None,
            d_update: DUpdate::Summed,
            g_loss: GLossKind::NonSaturating,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size must be >= 2 for batch normalisation, got {}", self.batch_size)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("Adam coefficients must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,d_loss,g_loss\n");
        for r in &self.records {
            s.push_str(&format!("{},{:e},{:e}\n", r.step, r.d_loss, r.g_loss));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Mean discriminator loss over the last `n` steps.
    pub fn tail_mean_d(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.d_loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn ground_image(s: &PairedSample, size: usize) -> RgbImage {
    let px = &s.ground.pixels;
    if px.dimensions() == (size as u32, size as u32) {
        px.clone()
    } else {
        resize_bilinear(px, size as u32, size as u32)
    }
}

fn noise(seed: u64, tag: &str, index: u64, n: usize, nz: usize) -> Array2<f64> {
    let mut r = rng(derive_indexed(seed, tag, index));
    Array2::from_shape_vec((n, nz), normal_vec(&mut r, n * nz)).expect("shape")
}

fn select_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Adversarial training on `(ground image, embedding)` pairs.
///
/// `embeddings` holds one row per sample (the conditioning vectors of the
/// samples' overhead patches). Each step the discriminator sees one real
/// batch and one fake batch generated from the same embeddings, then the
/// generator is updated through the freshly updated discriminator.
/// Samples are reshuffled each epoch; a trailing partial batch is dropped.
pub fn train(g: &mut Generator, d: &mut Discriminator, samples: &[PairedSample], embeddings: &Array2<f64>, cfg: &TrainConfig) -> Result<LossHistory> {
    cfg.validate()?;
    if g.nef() != d.nef() || g.arch() != d.arch() {
        return Err(Error::dim("generator and discriminator architectures differ"));
    }
    if embeddings.nrows() != samples.len() || embeddings.ncols() != g.nef() {
        return Err(Error::dim(format!(
            "embeddings are {}x{}, expected {}x{}",
            embeddings.nrows(),
            embeddings.ncols(),
            samples.len(),
            g.nef()
        )));
    }
    if samples.len() < cfg.batch_size {
        return Err(Error::InsufficientSamples {
            needed: cfg.batch_size,
            got: samples.len(),
        });
    }
    let arch = *g.arch();
    let mut opt_g = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut history = LossHistory::default();
    let per_epoch = samples.len() / cfg.batch_size;
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng(derive_indexed(cfg.seed, "shuffle", epoch as u64)));
        for b in 0..per_epoch {
            if step >= limit {
                break 'epochs;
            }
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let imgs: Vec<RgbImage> = idx.iter().map(|&i| ground_image(&samples[i], arch.image_size)).collect();
            let real = batch_from_images(&imgs);
            let e = select_rows(embeddings, idx);
            let z = noise(cfg.seed, "noise", step as u64, idx.len(), arch.nz);
            let rec = train_step(g, d, &mut opt_g, &mut opt_d, &real, &e, &z, cfg)?;
            let rec = LossRecord { step, ..rec };
            if !rec.d_loss.is_finite() || !rec.g_loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            debug!("step {step}: d_loss {:.4} g_loss {:.4}", rec.d_loss, rec.g_loss);
            history.records.push(rec);
            step += 1;
        }
        if let Some(last) = history.records.last() {
            info!("epoch {epoch}: step {} d_loss {:.4} g_loss {:.4}", last.step, last.d_loss, last.g_loss);
        }
    }
    Ok(history)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    g: &mut Generator,
    d: &mut Discriminator,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    real: &Array4<f64>,
    e: &Array2<f64>,
    z: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let fake = g.forward(z, e, Mode::Train)?;

    d.zero_grad();
    let lr = d.forward(real, e, Mode::Train)?;
    d.backward(&d_loss_real_grad(&lr));
    if cfg.d_update == DUpdate::Separate {
        opt_d.step(d.params_mut());
        d.zero_grad();
    }
    let lf = d.forward(&fake, e, Mode::Train)?;
    d.backward(&d_loss_fake_grad(&lf));
    opt_d.step(d.params_mut());
    let pr: Vec<f64> = lr.iter().map(|&l| sigmoid(l)).collect();
    let pf: Vec<f64> = lf.iter().map(|&l| sigmoid(l)).collect();
    let dl = d_loss(&pr, &pf);

    g.zero_grad();
    d.zero_grad();
    let lg = d.forward(&fake, e, Mode::Train)?;
    let dimg = d.backward(&g_loss_grad(&lg, cfg.g_loss));
    g.backward(&dimg);
    opt_g.step(g.params_mut());
    let pg: Vec<f64> = lg.iter().map(|&l| sigmoid(l)).collect();
    let gl = g_loss(&pg, cfg.g_loss);
    Ok(LossRecord {
        step: 0,
        d_loss: dl,
        g_loss: gl,
    })
}

/// Eval-mode real-vs-fake accuracy of `d`: real pairs should score above
/// 0.5, generated ones (from the same embeddings) below.
pub fn discriminator_accuracy(g: &Generator, d: &Discriminator, samples: &[PairedSample], embeddings: &Array2<f64>, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let arch = *g.arch();
    let mut correct = 0usize;
    for (c, chunk) in (0..samples.len()).collect::<Vec<_>>().chunks(64).enumerate() {
        let imgs: Vec<RgbImage> = chunk.iter().map(|&i| ground_image(&samples[i], arch.image_size)).collect();
        let real = batch_from_images(&imgs);
        let e = select_rows(embeddings, chunk);
        let z = noise(seed, "eval-noise", c as u64, chunk.len(), arch.nz);
        let fake = g.generate(&z, &e)?;
        correct += d.predict(&real, &e)?.iter().filter(|&&p| p > 0.5).count();
        correct += d.predict(&fake, &e)?.iter().filter(|&&p| p < 0.5).count();
    }
    Ok(correct as f64 / (2 * samples.len()) as f64)
}
