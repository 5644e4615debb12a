//! Conditional GAN: generator, discriminator, losses and the training loop.
//!
//! Both networks are parameterised by [`ArchConfig`]. At canonical widths
//! (`ngf = 128`, `ndf = 64`, `image_size = 64`) they reproduce the reference
//! layer table exactly; narrower widths keep the topology for CPU-scale
//! experiments, and smaller image sizes give miniature networks for
//! gradient checking.

mod discriminator;
mod generator;
mod io;
pub mod loss;
mod train;

pub use discriminator::Discriminator;
pub use generator::Generator;
pub use io::{load_models, save_models, CheckpointMeta, CHECKPOINT_MAGIC};
pub use loss::{d_loss, g_loss, GLossKind, PROB_EPS};
pub use train::{discriminator_accuracy, train, DUpdate, LossHistory, LossRecord, TrainConfig};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Length of the noise vector z.
pub const NOISE_DIM: usize = 100;
/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;
/// Negative slope of the discriminator's LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub nz: usize,
    pub nef: usize,
    pub ngf: usize,
    pub ndf: usize,
    pub image_size: usize,
}

impl ArchConfig {
    /// Full-width networks.
    pub fn canonical(nef: usize) -> Self {
        Self {
            nz: NOISE_DIM,
            nef,
            ngf: 128,
            ndf: 64,
            image_size: 64,
        }
    }

    /// Same topology at 1/8 width; trainable on a CPU in minutes.
    pub fn desk(nef: usize) -> Self {
        Self {
            ngf: 16,
            ndf: 8,
            ..Self::canonical(nef)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nz == 0 || self.nef == 0 || self.ngf == 0 || self.ndf == 0 {
            return Err(Error::config("nz, nef, ngf and ndf must be positive"));
        }
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return Err(Error::config(format!("image_size must be a power of two >= 8, got {}", self.image_size)));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.image_size.trailing_zeros() as usize
    }

    /// Output channels of each generator block, ending in 3 (RGB).
    pub fn g_widths(&self) -> Vec<usize> {
        let n = self.levels() - 1;
        let mut w: Vec<usize> = (0..n - 1).map(|i| self.ngf << (n - 2 - i)).collect();
        w.push(3);
        w
    }

    /// Output channels of the discriminator's downsampling blocks after the
    /// two-branch input (each branch produces `ndf`).
    pub fn d_widths(&self) -> Vec<usize> {
        let blocks = self.levels() - 3;
        (1..=blocks).map(|i| (2 * self.ndf) << i).collect()
    }

    /// Length of the pooled discriminator feature.
    pub fn feature_dim(&self) -> usize {
        self.d_widths().last().copied().unwrap_or(2 * self.ndf)
    }

    /// Short stable digest of the architecture, stored in checkpoints.
    pub fn hash(&self) -> String {
        let desc = format!(
            "g:{:?};d:{:?};nz={};nef={};size={};act=relu/leaky{};out=tanh;bcast-emb",
            self.g_widths(),
            self.d_widths(),
            self.nz,
            self.nef,
            self.image_size,
            LEAKY_SLOPE
        );
        let digest = Sha256::digest(desc.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One observed layer transition, recorded during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_res: usize,
    pub out_res: usize,
}

impl LayerShape {
    fn new(name: &str, in_ch: usize, out_ch: usize, in_res: usize, out_res: usize) -> Self {
        Self {
            name: name.to_string(),
            in_ch,
            out_ch,
            in_res,
            out_res,
        }
    }
}

impl std::fmt::Display for LayerShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<8} {:>5} -> {:<5} {:>2}x{:<2} -> {}x{}",
            self.name, self.in_ch, self.out_ch, self.in_res, self.in_res, self.out_res, self.out_res
        )
    }
}
