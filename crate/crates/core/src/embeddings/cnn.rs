use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Array4, Axis};

use super::{fit_pca, Embedder, Embedding, EmbeddingKind, PcaProjection, CNN_EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::geodata::OverheadPatch;
use crate::imageops::{image_to_tensor, resize_bilinear};
use crate::nn::Conv2d;
use crate::rng::{derive_seed, rng};

/// Descriptor length produced by patch encoders before PCA.
pub const DESCRIPTOR_DIM: usize = 1024;

/// A fixed, pretrained image encoder producing one descriptor per patch.
pub trait PatchEncoder: Send + Sync {
    fn descriptor_dim(&self) -> usize;

    /// Describes the encoder so runs can log and reproduce it.
    fn recipe(&self) -> String;

    fn encode(&self, patches: &[&OverheadPatch]) -> Result<Array2<f64>>;
}

/// Build an encoder from its recipe string.
///
/// `random-conv:seed=<n>` is the built-in frozen encoder. Pretrained VGG
/// weights are not bundled, so `vgg16:*` recipes fail with a dependency
/// error.
pub fn encoder_from_recipe(recipe: &str) -> Result<Box<dyn PatchEncoder>> {
    if let Some(rest) = recipe.strip_prefix("random-conv") {
        let seed = match rest.strip_prefix(":seed=") {
            Some(s) => s.parse().map_err(|_| Error::config(format!("bad encoder seed in {recipe:?}")))?,
            None if rest.is_empty() => 0,
            None => return Err(Error::config(format!("bad encoder recipe {recipe:?}"))),
        };
        return Ok(Box::new(RandomConvEncoder::new(seed)));
    }
    Err(Error::Dependency(format!(
        "encoder {recipe:?} is not available (pretrained weights are not bundled); \
         use the grayscale or hsv embedding, or the random-conv encoder"
    )))
}

/// Frozen random-feature CNN: the patch is resized to 32x32, passed through
/// conv3x3(3->32)-ReLU, conv3x3/2(32->64)-ReLU, conv1x1(64->1024)-ReLU and
/// globally average pooled to a 1024D descriptor. He-normal weights are
/// drawn from `seed`.
#[derive(Debug, Clone)]
pub struct RandomConvEncoder {
    seed: u64,
    layers: [Conv2d; 3],
}

impl RandomConvEncoder {
    pub const INPUT_SIZE: u32 = 32;

    pub fn new(seed: u64) -> Self {
        let mut r = rng(derive_seed(seed, "random-conv-encoder"));
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let layers = [
            Conv2d::new(3, 32, 3, 1, 1, true, he(27), &mut r),
            Conv2d::new(32, 64, 3, 2, 1, true, he(288), &mut r),
            Conv2d::new(64, DESCRIPTOR_DIM, 1, 1, 0, true, he(64), &mut r),
        ];
        Self { seed, layers }
    }
}

impl PatchEncoder for RandomConvEncoder {
    fn descriptor_dim(&self) -> usize {
        DESCRIPTOR_DIM
    }

    fn recipe(&self) -> String {
        format!("random-conv:seed={}", self.seed)
    }

    fn encode(&self, patches: &[&OverheadPatch]) -> Result<Array2<f64>> {
        let s = Self::INPUT_SIZE as usize;
        let mut x = Array4::zeros((patches.len(), 3, s, s));
        for (i, p) in patches.iter().enumerate() {
            let img = resize_bilinear(&p.pixels, Self::INPUT_SIZE, Self::INPUT_SIZE);
            x.index_axis_mut(Axis(0), i).assign(&image_to_tensor(&img));
        }
        for layer in &self.layers {
            x = layer.apply(&x).mapv(|v| v.max(0.0));
        }
        Ok(crate::features::global_avg_pool(&x))
    }
}

/// CNN-descriptor embedding: encoder, PCA to 25D, then rescale by the
/// training range. Out-of-range test values are clamped and counted.
pub struct CnnEmbedder {
    encoder: Box<dyn PatchEncoder>,
    pca: Option<PcaProjection>,
    clamped: AtomicUsize,
    embedded: AtomicUsize,
}

impl CnnEmbedder {
    pub fn unfitted(encoder: Box<dyn PatchEncoder>) -> Self {
        Self {
            encoder,
            pca: None,
            clamped: AtomicUsize::new(0),
            embedded: AtomicUsize::new(0),
        }
    }

    pub fn with_pca(encoder: Box<dyn PatchEncoder>, pca: PcaProjection) -> Result<Self> {
        if pca.input_dim() != encoder.descriptor_dim() {
            return Err(Error::dim(format!(
                "PCA expects {}D descriptors, encoder produces {}D",
                pca.input_dim(),
                encoder.descriptor_dim()
            )));
        }
        let mut e = Self::unfitted(encoder);
        e.pca = Some(pca);
        Ok(e)
    }

    /// Fit the PCA on the descriptors of `patches`.
    pub fn fit(&mut self, patches: &[&OverheadPatch]) -> Result<()> {
        let desc = self.descriptors(patches)?;
        self.pca = Some(fit_pca(desc.view(), CNN_EMBEDDING_DIM)?);
        Ok(())
    }

    fn descriptors(&self, patches: &[&OverheadPatch]) -> Result<Array2<f64>> {
        let mut parts = Vec::new();
        for chunk in patches.chunks(256) {
            parts.push(self.encoder.encode(chunk)?);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::dim(e.to_string()))
    }

    pub fn pca(&self) -> Option<&PcaProjection> {
        self.pca.as_ref()
    }

    pub fn encoder_recipe(&self) -> String {
        self.encoder.recipe()
    }

    /// (clamped coordinates, embedded patches) since construction.
    pub fn clamp_stats(&self) -> (usize, usize) {
        (self.clamped.load(Ordering::Relaxed), self.embedded.load(Ordering::Relaxed))
    }

    fn finish(&self, pca: &PcaProjection, desc: ndarray::ArrayView1<f64>) -> Result<Embedding> {
        let y = pca.rescale(pca.project(desc)?.view());
        let mut clamped = 0;
        let values = y
            .iter()
            .map(|&v| {
                if !(-1.0..=1.0).contains(&v) {
                    clamped += 1;
                }
                v.clamp(-1.0, 1.0)
            })
            .collect();
        if clamped > 0 {
            self.clamped.fetch_add(clamped, Ordering::Relaxed);
            log::debug!("cnn embedding: clamped {clamped} coordinates outside the training range");
        }
        self.embedded.fetch_add(1, Ordering::Relaxed);
        Ok(Embedding {
            values,
            kind: EmbeddingKind::Cnn,
        })
    }
}

impl Embedder for CnnEmbedder {
    fn kind(&self) -> EmbeddingKind {
        EmbeddingKind::Cnn
    }

    fn nef(&self) -> usize {
        CNN_EMBEDDING_DIM
    }

    fn embed(&self, patch: &OverheadPatch) -> Result<Embedding> {
        let pca = self.pca.as_ref().ok_or_else(|| Error::State("CNN embedding used before its PCA was fitted".into()))?;
        let desc = self.encoder.encode(&[patch])?;
        self.finish(pca, desc.row(0))
    }

    fn embed_all(&self, patches: &[&OverheadPatch]) -> Result<Vec<Embedding>> {
        let pca = self.pca.as_ref().ok_or_else(|| Error::State("CNN embedding used before its PCA was fitted".into()))?;
        let desc = self.descriptors(patches)?;
        desc.rows().into_iter().map(|row| self.finish(pca, row)).collect()
    }
}
