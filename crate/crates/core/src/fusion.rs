//! Toy 3D feature extraction and fusion into the text embedding.
//!
//! The extractor is a frozen, fixed-seed convolution stack applied to the
//! latent after temporal upsampling to the decoded frame count. The fusion
//! network projects features to the text width with a 1×1 convolution,
//! mean-pools space, maps time onto the text tokens, and passes the result
//! through a zero-initialized 1×1 convolution before adding it to the text
//! embedding. A freshly built network is therefore the exact identity on the
//! text embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::{LatentDims, VideoLatent};
use crate::streamer::frames_for_latents;
use crate::tensor::Tensor;

pub const EXTRACTOR_VERSION: &str = "toy-conv3x3-silu-conv1x1/v1";

/// Feature grid `[c′ × h′ × w′ × d′]`.
#[derive(Debug, Clone)]
pub struct Feature3D {
    pub data: Tensor,
    pub version: &'static str,
}

impl Feature3D {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[3]
    }
}

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    tokens: Tensor,
}

impl TextEmbedding {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "text embedding must be [n_tok ≥ 1 × dim], got {:?}",
                tokens.shape()
            )));
        }
        Ok(Self { tokens })
    }

    /// Deterministic stand-in for an encoded prompt.
    pub fn synthetic(seed: u64, n_tok: usize, dim: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(Tensor::randn(&[n_tok, dim], &mut rng))
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    TextOnly,
    Fused,
}

#[derive(Debug, Clone)]
pub struct FusedEmbedding {
    pub tokens: Tensor,
    pub provenance: Provenance,
}

impl FusedEmbedding {
    pub fn text_only(e_text: &TextEmbedding) -> Self {
        Self {
            tokens: e_text.tokens.clone(),
            provenance: Provenance::TextOnly,
        }
    }
}

/// Frozen feature extractor. Its weights are constants and never receive
/// gradients, but gradients do flow through it to the input latent.
#[derive(Debug, Clone)]
pub struct Extractor3D {
    dims: LatentDims,
    channels: usize,
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
}

fn scaled_randn(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    Tensor::randn(shape, rng).data().iter().map(|v| v * s).collect()
}

impl Extractor3D {
    pub const SEED: u64 = 0x3D3D_0001;

    pub fn new(dims: LatentDims, channels: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::SEED);
        let c = dims.c;
        Ok(Self {
            dims,
            channels,
            conv1_w: Tensor::new(scaled_randn(&mut rng, &[channels, c, 3, 3], c * 9), &[channels, c, 3, 3])?,
            conv1_b: Tensor::new(scaled_randn(&mut rng, &[channels], 1), &[channels])?,
            conv2_w: Tensor::new(
                scaled_randn(&mut rng, &[channels, channels, 1, 1], channels),
                &[channels, channels, 1, 1],
            )?,
            conv2_b: Tensor::new(vec![0.0; channels], &[channels])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weights(&self) -> [&Tensor; 4] {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b]
    }

    /// Latent index feeding decoded frame `f`: frame 0 comes from latent 0,
    /// every later latent expands to four frames.
    pub fn source_latent(frame: usize) -> usize {
        if frame == 0 {
            0
        } else {
            (frame - 1) / 4 + 1
        }
    }

    pub fn extract(&self, latent: &VideoLatent) -> Result<Feature3D> {
        if latent.dims() != self.dims {
            return Err(Error::Shape(format!(
                "extractor built for {:?}, latent is {:?}",
                self.dims,
                latent.dims()
            )));
        }
        let d_out = frames_for_latents(latent.len())?;
        let rows: Vec<usize> = (0..d_out).map(Self::source_latent).collect();
        let LatentDims { c, h, w } = self.dims;
        let x = latent.frames().select_rows(&rows)?.reshape(&[d_out, c, h, w])?;
        let y = x.conv2d(&self.conv1_w, &self.conv1_b)?.silu();
        let y = y.conv2d(&self.conv2_w, &self.conv2_b)?;
        Ok(Feature3D {
            data: y.permute(&[1, 2, 3, 0])?,
            version: EXTRACTOR_VERSION,
        })
    }
}

pub fn extract_3d(extractor: &Extractor3D, latent: &VideoLatent) -> Result<Feature3D> {
    extractor.extract(latent)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub feature_channels: usize,
    /// Decoded frame count d′ the temporal map expects.
    pub feature_frames: usize,
    pub text_tokens: usize,
    pub text_dim: usize,
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    cfg: FusionConfig,
    proj_w: Tensor,
    proj_b: Tensor,
    temporal: Tensor,
    zero_w: Tensor,
    zero_b: Tensor,
}

impl FusionNet {
    pub fn new(cfg: FusionConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let FusionConfig {
            feature_channels: cf,
            feature_frames: df,
            text_tokens: nt,
            text_dim: td,
        } = cfg;
        Ok(Self {
            cfg,
            proj_w: Tensor::param(scaled_randn(&mut rng, &[td, cf, 1, 1], cf), &[td, cf, 1, 1])?,
            proj_b: Tensor::param(vec![0.0; td], &[td])?,
            temporal: Tensor::param(scaled_randn(&mut rng, &[df, nt], df), &[df, nt])?,
            zero_w: Tensor::param(vec![0.0; td * td], &[td, td, 1, 1])?,
            zero_b: Tensor::param(vec![0.0; td], &[td])?,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn zero_conv(&self) -> (&Tensor, &Tensor) {
        (&self.zero_w, &self.zero_b)
    }

    pub fn projection(&self) -> (&Tensor, &Tensor, &Tensor) {
        (&self.proj_w, &self.proj_b, &self.temporal)
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("temporal", &self.temporal),
            ("zero_w", &self.zero_w),
            ("zero_b", &self.zero_b),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
            ("temporal", &mut self.temporal),
            ("zero_w", &mut self.zero_w),
            ("zero_b", &mut self.zero_b),
        ]
    }

    /// `ẽ = e_text + zero_conv(pool(proj(f3d)))`.
    pub fn fuse(&self, e_text: &TextEmbedding, f3d: &Feature3D) -> Result<FusedEmbedding> {
        let FusionConfig {
            feature_channels: cf,
            feature_frames: df,
            text_tokens: nt,
            text_dim: td,
        } = self.cfg;
        let s = f3d.data.shape();
        if s.len() != 4 || s[0] != cf {
            return Err(Error::Shape(format!("feature {s:?} does not have {cf} channels")));
        }
        if s[3] != df {
            return Err(Error::Shape(format!(
                "feature temporal extent {} does not match the configured {df}",
                s[3]
            )));
        }
        if e_text.tokens.shape() != [nt, td] {
            return Err(Error::Shape(format!(
                "text embedding {:?} is not [{nt} × {td}]",
                e_text.tokens.shape()
            )));
        }
        let spatial = s[1] * s[2];
        // The projection is a 1x1 conv, so pooling space first is equivalent.
        let x = f3d.data.reshape(&[cf, spatial, df])?.mean_axis(1)?.reshape(&[1, cf, 1, df])?;
        let p = x.conv2d(&self.proj_w, &self.proj_b)?.reshape(&[td, df])?;
        let pooled = p.matmul(&self.temporal)?; // [td × nt]
        let z = pooled
            .reshape(&[1, td, nt, 1])?
            .conv2d(&self.zero_w, &self.zero_b)?
            .reshape(&[td, nt])?
            .transpose()?;
        Ok(FusedEmbedding {
            tokens: e_text.tokens.add(&z)?,
            provenance: Provenance::Fused,
        })
    }
}

pub fn fuse(net: &FusionNet, e_text: &TextEmbedding, f3d: &Feature3D) -> Result<FusedEmbedding> {
    net.fuse(e_text, f3d)
}

/// Bypasses fusion entirely when no feature is available.
pub fn fuse_optional(net: &FusionNet, e_text: &TextEmbedding, f3d: Option<&Feature3D>) -> Result<FusedEmbedding> {
    match f3d {
        None => Ok(FusedEmbedding::text_only(e_text)),
        Some(f) => net.fuse(e_text, f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::optim::Adam;

    const DIMS: LatentDims = LatentDims { c: 2, h: 4, w: 4 };

    fn latent(seed: u64, d: usize) -> VideoLatent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoLatent::new(Tensor::randn(&[d, DIMS.frame_len()], &mut rng), DIMS).unwrap()
    }

    fn cfg() -> FusionConfig {
        FusionConfig {
            feature_channels: 3,
            feature_frames: 9,
            text_tokens: 4,
            text_dim: 6,
        }
    }

    #[test]
    fn extractor_is_deterministic_and_follows_frame_law() {
        let ex = Extractor3D::new(DIMS, 3).unwrap();
        let v = latent(1, 3);
        let a = ex.extract(&v).unwrap();
        let b = ex.extract(&v).unwrap();
        assert_eq!(a.data.to_vec(), b.data.to_vec());
        assert_eq!(a.data.shape(), &[3, 4, 4, 9]);
        assert_eq!(ex.extract(&latent(1, 1)).unwrap().frames(), 1);
    }

    #[test]
    fn extractor_distinguishes_distinct_latents() {
        let ex = Extractor3D::new(DIMS, 3).unwrap();
        for seed in 0..10 {
            let (a, b) = (latent(100 + seed, 3), latent(200 + seed, 3));
            let gap = a
                .frames()
                .data()
                .iter()
                .zip(b.frames().data())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(gap > 0.1);
            assert_ne!(ex.extract(&a).unwrap().data.to_vec(), ex.extract(&b).unwrap().data.to_vec());
        }
    }

    #[test]
    fn extractor_weights_never_get_gradients() {
        let ex = Extractor3D::new(DIMS, 3).unwrap();
        let frames = Tensor::param(latent(5, 2).frames().to_vec(), &[2, DIMS.frame_len()]).unwrap();
        let v = VideoLatent::new(frames.clone(), DIMS).unwrap();
        ex.extract(&v).unwrap().data.sum().backward();
        assert!(frames.grad_norm() > 0.0);
        assert!(ex.weights().iter().all(|w| w.grad().is_none()));
    }

    #[test]
    fn fresh_fusion_is_exact_identity() {
        let ex = Extractor3D::new(DIMS, 3).unwrap();
        let net = FusionNet::new(cfg(), 7).unwrap();
        let e = TextEmbedding::synthetic(3, 4, 6).unwrap();
        let f = ex.extract(&latent(2, 3)).unwrap();
        let fused = fuse(&net, &e, &f).unwrap();
        assert_eq!(fused.provenance, Provenance::Fused);
        assert_eq!(fused.tokens.to_vec(), e.tokens().to_vec());
        let bypass = fuse_optional(&net, &e, None).unwrap();
        assert_eq!(bypass.provenance, Provenance::TextOnly);
        assert_eq!(bypass.tokens.to_vec(), e.tokens().to_vec());
    }

    #[test]
    fn one_step_makes_fusion_non_identity() {
        let ex = Extractor3D::new(DIMS, 3).unwrap();
        let mut net = FusionNet::new(cfg(), 7).unwrap();
        let e = TextEmbedding::synthetic(3, 4, 6).unwrap();
        let f = ex.extract(&latent(2, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let upstream = Tensor::randn(&[4, 6], &mut rng);
        net.fuse(&e, &f).unwrap().tokens.mul(&upstream).unwrap().sum().backward();
        assert!(net.zero_w.grad_norm() > 0.0);
        let mut opt = Adam::new(1e-2);
        let mut params: Vec<&mut Tensor> = net.params_mut().into_iter().map(|(_, p)| p).collect();
        opt.step(&mut params).unwrap();
        let fused = fuse_optional(&net, &e, Some(&f)).unwrap();
        assert_ne!(fused.tokens.to_vec(), e.tokens().to_vec());
        assert_eq!(fused.tokens.shape(), e.tokens().shape());
    }

    #[test]
    fn temporal_mismatch_is_shape_error() {
        let ex = Extractor3D::new(DIMS, 3).unwrap();
        let net = FusionNet::new(cfg(), 7).unwrap();
        let e = TextEmbedding::synthetic(3, 4, 6).unwrap();
        let f = ex.extract(&latent(2, 2)).unwrap(); // d′ = 5
        assert!(matches!(net.fuse(&e, &f), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        // Nonzero zero-conv so the projection stage is actually reachable.
        let ex = Extractor3D::new(DIMS, 3).unwrap();
        let f = ex.extract(&latent(4, 3)).unwrap();
        let e = TextEmbedding::synthetic(3, 4, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zw = Tensor::randn(&[6, 6, 1, 1], &mut rng).to_vec();
        let net = FusionNet::new(cfg(), 7).unwrap();
        let (pw, pb, tm) = net.projection();
        let inputs = vec![
            (pw.to_vec(), pw.shape().to_vec()),
            (pb.to_vec(), pb.shape().to_vec()),
            (tm.to_vec(), tm.shape().to_vec()),
            (zw, vec![6, 6, 1, 1]),
        ];
        let weights = Tensor::randn(&[4, 6], &mut rng);
        let rep = gradcheck::check(
            &inputs,
            |p| {
                let mut n = net.clone();
                n.proj_w = p[0].clone();
                n.proj_b = p[1].clone();
                n.temporal = p[2].clone();
                n.zero_w = p[3].clone();
                n.fuse(&e, &f)?.tokens.mul(&weights)
            },
            gradcheck::DEFAULT_STEP,
            None,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
