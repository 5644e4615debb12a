//! Overhead-patch embeddings: the 1D conditioning vectors fed to both
//! networks of the conditional GAN.
//!
//! * grayscale: per-pixel RGB mean, scaled to [-1, 1] (100D for 10x10)
//! * hsv: per-pixel (H, S, V), each scaled to [-1, 1], interleaved (300D)
//! * cnn: CNN descriptor projected by PCA to 25D, rescaled to [-1, 1]

mod cnn;
mod pca;

pub use cnn::{encoder_from_recipe, CnnEmbedder, PatchEncoder, RandomConvEncoder, DESCRIPTOR_DIM};
pub use pca::{fit_pca, PcaProjection, CNN_EMBEDDING_DIM};

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geodata::{OverheadPatch, DEFAULT_PATCH_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Grayscale,
    Hsv,
    Cnn,
}

impl EmbeddingKind {
    /// Embedding dimension for the default 10x10 patch.
    pub fn nef(self) -> usize {
        match self {
            EmbeddingKind::Grayscale => 100,
            EmbeddingKind::Hsv => 300,
            EmbeddingKind::Cnn => CNN_EMBEDDING_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Grayscale => "grayscale",
            EmbeddingKind::Hsv => "hsv",
            EmbeddingKind::Cnn => "cnn",
        }
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grayscale" | "gray" => Ok(Self::Grayscale),
            "hsv" => Ok(Self::Hsv),
            "cnn" | "vgg" => Ok(Self::Cnn),
            _ => Err(Error::config(format!("unknown embedding kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub kind: EmbeddingKind,
}

impl Embedding {
    pub fn nef(&self) -> usize {
        self.values.len()
    }
}

/// An embedding function phi(I_s).
pub trait Embedder: Send + Sync {
    fn kind(&self) -> EmbeddingKind;
    fn nef(&self) -> usize;
    fn embed(&self, patch: &OverheadPatch) -> Result<Embedding>;

    fn embed_all(&self, patches: &[&OverheadPatch]) -> Result<Vec<Embedding>> {
        use rayon::prelude::*;
        patches.par_iter().map(|p| self.embed(p)).collect()
    }
}

/// Stack embeddings into an `(N, nef)` matrix.
pub fn stack_embeddings(embs: &[Embedding]) -> Result<ndarray::Array2<f64>> {
    let nef = embs.first().map_or(0, Embedding::nef);
    if let Some(bad) = embs.iter().find(|e| e.nef() != nef) {
        return Err(Error::dim(format!("mixed embedding lengths {nef} and {}", bad.nef())));
    }
    let flat: Vec<f64> = embs.iter().flat_map(|e| e.values.iter().copied()).collect();
    Ok(ndarray::Array2::from_shape_vec((embs.len(), nef), flat).expect("consistent lengths"))
}

fn check_size(patch: &OverheadPatch, expected: u32) -> Result<()> {
    if patch.pixels.dimensions() != (expected, expected) {
        let (w, h) = patch.pixels.dimensions();
        return Err(Error::dim(format!("expected a {expected}x{expected} patch, got {w}x{h}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct GrayscaleEmbedder {
    pub patch_size: u32,
}

impl Default for GrayscaleEmbedder {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }
}

impl Embedder for GrayscaleEmbedder {
    fn kind(&self) -> EmbeddingKind {
        EmbeddingKind::Grayscale
    }

    fn nef(&self) -> usize {
        (self.patch_size * self.patch_size) as usize
    }

    fn embed(&self, patch: &OverheadPatch) -> Result<Embedding> {
        check_size(patch, self.patch_size)?;
        let values = patch
            .pixels
            .pixels()
            .map(|p| {
                let g = (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0;
                2.0 * g / 255.0 - 1.0
            })
            .collect();
        Ok(Embedding {
            values,
            kind: EmbeddingKind::Grayscale,
        })
    }
}

/// Standard RGB -> HSV with H in [0, 360) and S, V in [0, 1]. Achromatic
/// pixels get H = 0.
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

#[derive(Debug, Clone, Copy)]
pub struct HsvEmbedder {
    pub patch_size: u32,
}

impl Default for HsvEmbedder {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }
}

impl Embedder for HsvEmbedder {
    fn kind(&self) -> EmbeddingKind {
        EmbeddingKind::Hsv
    }

    fn nef(&self) -> usize {
        3 * (self.patch_size * self.patch_size) as usize
    }

    fn embed(&self, patch: &OverheadPatch) -> Result<Embedding> {
        check_size(patch, self.patch_size)?;
        let mut values = Vec::with_capacity(self.nef());
        for p in patch.pixels.pixels() {
            let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            values.extend([2.0 * h / 360.0 - 1.0, 2.0 * s - 1.0, 2.0 * v - 1.0]);
        }
        Ok(Embedding {
            values,
            kind: EmbeddingKind::Hsv,
        })
    }
}
