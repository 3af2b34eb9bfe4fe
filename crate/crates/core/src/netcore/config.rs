use serde::{Deserialize, Serialize};

use crate::body::BodyDims;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Self-attention blocks after the patch embedding.
    pub n_enc: usize,
    /// Layers per decoder.
    pub n_layers: usize,
    pub n_state: usize,
    pub d_state: usize,
    pub mlp_ratio: usize,
    /// Prior feature width; 0 disables the prior encoder.
    pub c_prior: usize,
    /// Per-patch embedding width inside the prior encoder.
    pub prior_embed: usize,
    /// Detection threshold τ.
    pub tau: f64,
    /// Whether the state branch also attends to human prompts.
    pub state_sees_humans: bool,
    pub body: BodyDims,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            width: 64,
            height: 64,
            channels: 6,
            patch: 8,
            d_model: 64,
            n_heads: 4,
            n_enc: 2,
            n_layers: 2,
            n_state: 16,
            d_state: 64,
            mlp_ratio: 2,
            c_prior: 32,
            prior_embed: 16,
            tau: 0.5,
            state_sees_humans: true,
            body: BodyDims::desk(),
        }
    }

    /// Reference-scale sizes. Not trainable here; kept for configuration
    /// checks and parameter-count reporting.
    pub fn full() -> Self {
        Self {
            width: 512,
            height: 384,
            channels: 3,
            patch: 16,
            d_model: 768,
            n_heads: 12,
            n_enc: 12,
            n_layers: 12,
            n_state: 768,
            d_state: 768,
            mlp_ratio: 4,
            c_prior: 1024,
            prior_embed: 64,
            tau: 0.5,
            state_sees_humans: true,
            body: BodyDims::full(),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn n_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn mask_pixels(&self) -> usize {
        self.patch * self.patch
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// θ, β, α, raw quaternion, translation.
    pub fn human_out(&self) -> usize {
        self.body.n_theta() * 3 + self.body.n_beta + self.body.n_alpha + 7
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.width.is_multiple_of(self.patch) || !self.height.is_multiple_of(self.patch) {
            return bad(format!(
                "image {}x{} is not a multiple of patch {}",
                self.width, self.height, self.patch
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.d_state != self.d_model {
            return bad("state width must equal d_model".into());
        }
        if self.n_state == 0 || self.n_layers == 0 || self.channels == 0 {
            return bad("n_state, n_layers and channels must be positive".into());
        }
        if !self.d_model.is_multiple_of(4) {
            return bad("d_model must be a multiple of 4 for the 2D positional encoding".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if self.c_prior > 0 && self.prior_embed == 0 {
            return bad("prior_embed must be positive when the prior is enabled".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        assert_eq!(ModelConfig::desk().n_patches(), 64);
        assert_eq!(ModelConfig::full().n_state, 768);
    }

    #[test]
    fn bad_heads_rejected() {
        let mut c = ModelConfig::desk();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.width = 60;
        assert!(c.validate().is_err());
    }
}
