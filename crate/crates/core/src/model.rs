use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{Extractor3D, FusionConfig, FusionNet, TextEmbedding};
use crate::generator::{GeneratorConfig, GeneratorNet};
use crate::streamer::{frames_for_latents, FusionContext};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSetup {
    /// Extractor output channels c′.
    pub feature_channels: usize,
    /// Latents per extracted feature; d′ follows from the frame law.
    pub feature_latents: usize,
    pub text_tokens: usize,
    /// Seed of the synthetic prompt embedding.
    pub prompt_seed: u64,
}

impl Default for FusionSetup {
    fn default() -> Self {
        Self {
            feature_channels: 8,
            feature_latents: 3,
            text_tokens: 4,
            prompt_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub fusion: FusionSetup,
}

impl ModelConfig {
    pub fn fusion_config(&self) -> Result<FusionConfig> {
        Ok(FusionConfig {
            feature_channels: self.fusion.feature_channels,
            feature_frames: frames_for_latents(self.fusion.feature_latents)?,
            text_tokens: self.fusion.text_tokens,
            text_dim: self.generator.cond_dim,
        })
    }
}

/// Generator, fusion net, frozen extractor and prompt embedding.
#[derive(Debug, Clone)]
pub struct Nets {
    pub config: ModelConfig,
    pub generator: GeneratorNet,
    pub fusion: FusionNet,
    pub extractor: Extractor3D,
    pub text: TextEmbedding,
}

impl Nets {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let g = config.generator;
        Ok(Self {
            generator: GeneratorNet::new(g, seed)?,
            fusion: FusionNet::new(config.fusion_config()?, seed.wrapping_add(1))?,
            extractor: Extractor3D::new(g.latent, config.fusion.feature_channels)?,
            text: TextEmbedding::synthetic(config.fusion.prompt_seed, config.fusion.text_tokens, g.cond_dim)?,
            config,
        })
    }

    pub fn fusion_context(&self) -> FusionContext {
        FusionContext {
            extractor: self.extractor.clone(),
            net: self.fusion.clone(),
            text: self.text.clone(),
        }
    }
}
