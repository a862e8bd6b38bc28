use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the compact ViT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl Default for ViTConfig {
    /// The desk-scale toy model: 32×32×3 images, 8×8 patches, D=64, 4 heads,
    /// 4 blocks, MLP ratio 4, 3 classes.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            heads: 4,
            blocks: 4,
            mlp_ratio: 4.0,
            classes: 3,
            ln_eps: default_ln_eps(),
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!(
                "mlp_ratio {} must be positive",
                self.mlp_ratio
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!(
                "ln_eps {} must be positive",
                self.ln_eps
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    /// Patches per image.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Tokens per image including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}
