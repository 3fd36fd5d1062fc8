//! Chunked few-step denoiser and sequential rollout.
//!
//! Each latent frame is patchified into tokens. A chunk of three frames is
//! denoised in `K` steps on the grid `t_k = 1 − k/K` with a linear
//! variance-preserving parameterization (`σ = t`, `α = √(1−t²)`); the network
//! predicts the clean chunk as `α·x_t + head(h)`. After the last step the
//! clean chunk is run once more at `t = 0` and its per-layer keys/values are
//! committed to the cache.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionConfig, QueryBlock};
use crate::cache::{CacheGeometry, KVCache, PositionPolicy};
use crate::error::{Error, Result};
use crate::fusion::FusedEmbedding;
use crate::rope::{RotaryEmbedding, DEFAULT_BASE};
use crate::streamer::frames_for_latents;
use crate::tensor::{no_grad, Tensor};

pub const CHUNK_LATENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentDims {
    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Latent video stored frame-major as `[d × c·h·w]`.
#[derive(Debug, Clone)]
pub struct VideoLatent {
    frames: Tensor,
    dims: LatentDims,
}

impl VideoLatent {
    pub fn new(frames: Tensor, dims: LatentDims) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[1] != dims.frame_len() {
            return Err(Error::Shape(format!(
                "latent frames {:?} are not [d × {}]",
                frames.shape(),
                dims.frame_len()
            )));
        }
        Ok(Self { frames, dims })
    }

    pub fn empty(dims: LatentDims) -> Self {
        Self {
            frames: Tensor::zeros(&[0, dims.frame_len()]),
            dims,
        }
    }

    /// Joins latents along time.
    pub fn concat(parts: &[VideoLatent], dims: LatentDims) -> Result<Self> {
        let frames: Vec<Tensor> = parts.iter().filter(|p| !p.is_empty()).map(|p| p.frames.clone()).collect();
        if frames.is_empty() {
            return Ok(Self::empty(dims));
        }
        Self::new(Tensor::concat(&frames, 0)?, dims)
    }

    /// From a `[c × h × w × d]` tensor.
    pub fn from_chwd(data: &Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected [c × h × w × d], got {s:?}")));
        }
        let dims = LatentDims { c: s[0], h: s[1], w: s[2] };
        let frames = data.permute(&[3, 0, 1, 2])?.reshape(&[s[3], dims.frame_len()])?;
        Self::new(frames, dims)
    }

    /// As `[c × h × w × d]`.
    pub fn to_chwd(&self) -> Result<Tensor> {
        let LatentDims { c, h, w } = self.dims;
        self.frames.reshape(&[self.len(), c, h, w])?.permute(&[1, 2, 3, 0])
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn dims(&self) -> LatentDims {
        self.dims
    }

    /// Number of latent frames `d`.
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decoded_frames(&self) -> Result<usize> {
        frames_for_latents(self.len())
    }

    /// Latent frames `[start, start+len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Shape(format!(
                "slice {start}..{} of a {}-frame latent",
                start + len,
                self.len()
            )));
        }
        if len == 0 {
            return Ok(Self::empty(self.dims));
        }
        Self::new(self.frames.slice_rows(start, len)?, self.dims)
    }

    pub fn detach(&self) -> Self {
        Self {
            frames: self.frames.detach(),
            dims: self.dims,
        }
    }
}

/// Exactly [`CHUNK_LATENTS`] consecutive latent frames.
#[derive(Debug, Clone)]
pub struct LatentChunk {
    frames: Tensor,
    dims: LatentDims,
}

impl LatentChunk {
    pub fn new(frames: Tensor, dims: LatentDims) -> Result<Self> {
        if frames.shape() != [CHUNK_LATENTS, dims.frame_len()] {
            return Err(Error::Shape(format!(
                "chunk {:?} is not [{CHUNK_LATENTS} × {}]",
                frames.shape(),
                dims.frame_len()
            )));
        }
        Ok(Self { frames, dims })
    }

    pub fn noise(dims: LatentDims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            frames: Tensor::randn(&[CHUNK_LATENTS, dims.frame_len()], rng),
            dims,
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn dims(&self) -> LatentDims {
        self.dims
    }

    pub fn into_latent(self) -> VideoLatent {
        VideoLatent {
            frames: self.frames,
            dims: self.dims,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub latent: LatentDims,
    /// Square patch edge; `h` and `w` must be multiples of it.
    pub patch: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub denoise_steps: usize,
    /// Width of the conditioning (text) embedding.
    pub cond_dim: usize,
    pub sink_frames: usize,
    pub window_frames: usize,
    pub rope_base: f64,
    /// Start with an all-zero output head.
    pub zero_init_output: bool,
    /// Back-propagate through the final denoise step only.
    pub truncate_grad: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent: LatentDims { c: 4, h: 8, w: 8 },
            patch: 4,
            model_dim: 32,
            n_heads: 4,
            n_layers: 2,
            mlp_hidden: 64,
            denoise_steps: 4,
            cond_dim: 16,
            sink_frames: 1,
            window_frames: 17,
            rope_base: DEFAULT_BASE,
            zero_init_output: false,
            truncate_grad: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let LatentDims { c, h, w } = self.latent;
        if c == 0 || self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "latent {h}×{w} is not tiled by {p}×{p} patches",
                p = self.patch
            )));
        }
        if self.n_layers == 0 || self.denoise_steps == 0 || self.mlp_hidden == 0 || self.cond_dim == 0 {
            return Err(Error::Config(
                "n_layers, denoise_steps, mlp_hidden and cond_dim must be positive".into(),
            ));
        }
        if self.sink_frames == 0 {
            return Err(Error::Config("the sink must hold at least one frame".into()));
        }
        self.attention()?;
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.latent.h / self.patch) * (self.latent.w / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.latent.c * self.patch * self.patch
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        let tpf = self.tokens_per_frame();
        AttentionConfig::new(
            self.n_heads,
            self.model_dim,
            tpf,
            self.sink_frames * tpf,
            self.window_frames * tpf,
            self.rope_base,
        )
    }

    pub fn cache_geometry(&self) -> CacheGeometry {
        let tpf = self.tokens_per_frame();
        CacheGeometry {
            dim: self.model_dim,
            tokens_per_frame: tpf,
            sink_tokens: self.sink_frames * tpf,
            window_tokens: self.window_frames * tpf,
        }
    }

    /// Noise levels visited while denoising, `1, 1 − 1/K, …, 1/K`.
    pub fn step_grid(&self) -> Vec<f64> {
        let k = self.denoise_steps;
        (0..k).map(|i| 1.0 - i as f64 / k as f64).collect()
    }
}

fn vp(t: f64) -> (f64, f64) {
    ((1.0 - t * t).max(0.0).sqrt(), t)
}

#[derive(Debug, Clone)]
struct Layer {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct GeneratorNet {
    cfg: GeneratorConfig,
    attn: AttentionConfig,
    rope: RotaryEmbedding,
    patchify: Arc<Vec<usize>>,
    unpatchify: Arc<Vec<usize>>,
    in_w: Tensor,
    in_b: Tensor,
    time_vec: Tensor,
    cond_w: Tensor,
    cond_b: Tensor,
    layers: Vec<Layer>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

/// What happens to the chunk's keys/values after denoising.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheCommit {
    /// Computed without a graph: no gradient reaches the chunk through the
    /// cache.
    Detached,
    /// Computed with a graph, so later chunks back-propagate into this one.
    Attached,
    Skip,
}

fn init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let s = 1.0 / (rows as f64).sqrt();
    Tensor::param(Tensor::randn(&[rows, cols], rng).data().iter().map(|v| v * s).collect(), &[rows, cols])
}

fn filled(n: usize, v: f64) -> Result<Tensor> {
    Tensor::param(vec![v; n], &[n])
}

impl GeneratorNet {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let attn = cfg.attention()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (md, td, hid) = (cfg.model_dim, cfg.token_dim(), cfg.mlp_hidden);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(Layer {
                ln1_g: filled(md, 1.0)?,
                ln1_b: filled(md, 0.0)?,
                wq: init(&mut rng, md, md)?,
                wk: init(&mut rng, md, md)?,
                wv: init(&mut rng, md, md)?,
                wo: init(&mut rng, md, md)?,
                ln2_g: filled(md, 1.0)?,
                ln2_b: filled(md, 0.0)?,
                w1: init(&mut rng, md, hid)?,
                b1: filled(hid, 0.0)?,
                w2: init(&mut rng, hid, md)?,
                b2: filled(md, 0.0)?,
            });
        }
        let out_w = if cfg.zero_init_output {
            Tensor::param(vec![0.0; md * td], &[md, td])?
        } else {
            let t = init(&mut rng, md, td)?;
            Tensor::param(t.data().iter().map(|v| v * 0.1).collect(), &[md, td])?
        };
        let (patchify, unpatchify) = patch_maps(&cfg);
        Ok(Self {
            rope: attn.rope()?,
            attn,
            patchify: Arc::new(patchify),
            unpatchify: Arc::new(unpatchify),
            in_w: init(&mut rng, td, md)?,
            in_b: filled(md, 0.0)?,
            time_vec: Tensor::param(Tensor::randn(&[md], &mut rng).to_vec(), &[md])?,
            cond_w: init(&mut rng, cfg.cond_dim, md)?,
            cond_b: filled(md, 0.0)?,
            layers,
            lnf_g: filled(md, 1.0)?,
            lnf_b: filled(md, 0.0)?,
            out_w,
            out_b: filled(td, 0.0)?,
            cfg,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn attention(&self) -> &AttentionConfig {
        &self.attn
    }

    pub fn set_position_policy(&mut self, policy: PositionPolicy) {
        self.attn.positions = policy;
    }

    pub fn new_caches(&self) -> Result<Vec<KVCache>> {
        (0..self.cfg.n_layers).map(|_| KVCache::new(self.cfg.cache_geometry())).collect()
    }

    /// Parameters in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("in_w".into(), &self.in_w),
            ("in_b".into(), &self.in_b),
            ("time_vec".into(), &self.time_vec),
            ("cond_w".into(), &self.cond_w),
            ("cond_b".into(), &self.cond_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{n}"), t));
            }
        }
        out.extend([
            ("lnf_g".into(), &self.lnf_g),
            ("lnf_b".into(), &self.lnf_b),
            ("out_w".into(), &self.out_w),
            ("out_b".into(), &self.out_b),
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.in_w,
            &mut self.in_b,
            &mut self.time_vec,
            &mut self.cond_w,
            &mut self.cond_b,
        ];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.out_w, &mut self.out_b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn output_head(&self) -> (&Tensor, &Tensor) {
        (&self.out_w, &self.out_b)
    }

    /// Per-token bias from the conditioning: learned projection of the mean
    /// fused token.
    fn cond_vector(&self, cond: &FusedEmbedding) -> Result<Tensor> {
        let toks = &cond.tokens;
        if toks.rank() != 2 || toks.shape()[1] != self.cfg.cond_dim {
            return Err(Error::Config(format!(
                "conditioning {:?} does not have width {}",
                toks.shape(),
                self.cfg.cond_dim
            )));
        }
        let pooled = toks.mean_axis(0)?.reshape(&[1, self.cfg.cond_dim])?;
        pooled.matmul(&self.cond_w)?.reshape(&[self.cfg.model_dim])?.add(&self.cond_b)
    }

    /// One network evaluation on a chunk at noise level `t`. Returns the
    /// clean-chunk prediction and, when `collect` is set, each layer's
    /// keys/values.
    fn forward(
        &self,
        x_t: &Tensor,
        t: f64,
        cond: &Tensor,
        caches: &[KVCache],
        collect: bool,
    ) -> Result<(Tensor, Vec<(Tensor, Tensor)>)> {
        let tpf = self.cfg.tokens_per_frame();
        let n_tok = CHUNK_LATENTS * tpf;
        let tokens = x_t.gather(self.patchify.clone(), &[n_tok, self.cfg.token_dim()])?;
        let bias = self.time_vec.scale(t).add(cond)?;
        let mut h = tokens.matmul(&self.in_w)?.add_bias(&self.in_b)?.add_bias(&bias)?;
        let mut kv = Vec::with_capacity(if collect { self.layers.len() } else { 0 });
        for (layer, cache) in self.layers.iter().zip(caches) {
            let a = h.layer_norm(&layer.ln1_g, &layer.ln1_b)?;
            let q = a.matmul(&layer.wq)?;
            let k = a.matmul(&layer.wk)?;
            let v = a.matmul(&layer.wv)?;
            let block = QueryBlock {
                q,
                own: Some((k.clone(), v.clone())),
            };
            let o = attend(&block, cache, &self.attn, &self.rope)?;
            h = h.add(&o.matmul(&layer.wo)?)?;
            let m = h.layer_norm(&layer.ln2_g, &layer.ln2_b)?;
            let f = m.matmul(&layer.w1)?.add_bias(&layer.b1)?.silu().matmul(&layer.w2)?.add_bias(&layer.b2)?;
            h = h.add(&f)?;
            if collect {
                kv.push((k, v));
            }
        }
        let out = h
            .layer_norm(&self.lnf_g, &self.lnf_b)?
            .matmul(&self.out_w)?
            .add_bias(&self.out_b)?
            .gather(self.unpatchify.clone(), x_t.shape())?;
        let (alpha, _) = vp(t);
        Ok((x_t.scale(alpha).add(&out)?, kv))
    }

    fn check_caches(&self, caches: &[KVCache]) -> Result<()> {
        if caches.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let want = self.cfg.cache_geometry();
        if let Some(c) = caches.iter().find(|c| *c.geometry() != want) {
            return Err(Error::Config(format!(
                "cache geometry {:?} does not match the net ({want:?})",
                c.geometry()
            )));
        }
        Ok(())
    }

    /// Runs the clean chunk at `t = 0` and appends its keys/values.
    pub fn commit(&self, chunk: &Tensor, caches: &mut [KVCache], cond: &FusedEmbedding, how: CacheCommit) -> Result<()> {
        self.check_caches(caches)?;
        let run = |x: &Tensor| -> Result<Vec<(Tensor, Tensor)>> {
            let c = self.cond_vector(cond)?;
            Ok(self.forward(x, 0.0, &c, caches, true)?.1)
        };
        let kv = match how {
            CacheCommit::Skip => return Ok(()),
            CacheCommit::Detached => no_grad(|| run(&chunk.detach()))?,
            CacheCommit::Attached => run(chunk)?,
        };
        for (cache, (k, v)) in caches.iter_mut().zip(kv) {
            cache.append_frames(&k, &v)?;
        }
        Ok(())
    }
}

/// Gather maps between frame-major chunks `[3 × c·h·w]` and patch tokens
/// `[3·tpf × c·p·p]`.
fn patch_maps(cfg: &GeneratorConfig) -> (Vec<usize>, Vec<usize>) {
    let LatentDims { c, h, w } = cfg.latent;
    let p = cfg.patch;
    let (ph, pw) = (h / p, w / p);
    let (frame_len, tpf, td) = (c * h * w, ph * pw, c * p * p);
    let n = CHUNK_LATENTS * frame_len;
    let mut fwd = Vec::with_capacity(n);
    let mut inv = vec![0; n];
    for f in 0..CHUNK_LATENTS {
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let src = f * frame_len + ch * h * w + (py * p + dy) * w + px * p + dx;
                            let dst = (f * tpf + py * pw + px) * td + ch * p * p + dy * p + dx;
                            debug_assert_eq!(dst, fwd.len());
                            fwd.push(src);
                            inv[src] = dst;
                        }
                    }
                }
            }
        }
    }
    (fwd, inv)
}

/// Denoises `noisy` (the chunk at `t = 1`) in `steps` steps, re-noising
/// between steps with draws from `rng`, then commits the clean chunk's
/// keys/values to `caches` as `commit` says.
pub fn denoise_chunk(
    net: &GeneratorNet,
    noisy: &LatentChunk,
    caches: &mut [KVCache],
    cond: &FusedEmbedding,
    steps: usize,
    rng: &mut ChaCha8Rng,
    commit: CacheCommit,
) -> Result<LatentChunk> {
    if steps == 0 {
        return Err(Error::Config("denoise needs at least one step".into()));
    }
    if noisy.dims != net.cfg.latent {
        return Err(Error::Config(format!(
            "chunk dims {:?} do not match the net ({:?})",
            noisy.dims, net.cfg.latent
        )));
    }
    net.check_caches(caches)?;
    let grid: Vec<f64> = (0..steps).map(|i| 1.0 - i as f64 / steps as f64).collect();
    let cond_vec = net.cond_vector(cond)?;
    let mut x = noisy.frames.clone();
    let mut x0 = x.clone();
    for (i, &t) in grid.iter().enumerate() {
        let last = i + 1 == steps;
        let step = |x: &Tensor| net.forward(x, t, &cond_vec, caches, false).map(|r| r.0);
        x0 = if net.cfg.truncate_grad && !last {
            no_grad(|| step(&x.detach()))?.detach()
        } else {
            step(&x)?
        };
        if !last {
            let (a, s) = vp(grid[i + 1]);
            let eps = Tensor::randn(x0.shape(), rng);
            x = x0.scale(a).add(&eps.scale(s))?;
        }
    }
    net.commit(&x0, caches, cond, commit)?;
    LatentChunk::new(x0, net.cfg.latent)
}

/// Caches and RNG of one generation session.
#[derive(Debug, Clone)]
pub struct GenSession {
    pub caches: Vec<KVCache>,
    pub rng: ChaCha8Rng,
    pub chunks_generated: u64,
}

impl GenSession {
    pub fn new(net: &GeneratorNet, seed: u64) -> Result<Self> {
        Ok(Self {
            caches: net.new_caches()?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            chunks_generated: 0,
        })
    }

    pub fn set_visible_frames(&mut self, frames: usize) -> Result<()> {
        self.caches.iter_mut().try_for_each(|c| c.set_visible_frames(frames))
    }

    pub fn live_tokens(&self) -> usize {
        self.caches.first().map_or(0, KVCache::live_tokens)
    }

    pub fn stored_tokens(&self) -> usize {
        self.caches.first().map_or(0, KVCache::stored_tokens)
    }

    pub fn cache_bytes(&self) -> usize {
        self.caches.iter().map(KVCache::allocated_bytes).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// No graph is built; everything is detached by construction.
    Inference,
    /// The first `context_chunks` chunks are conditioning context; with
    /// `detach_context` they enter the cache detached.
    Train { context_chunks: usize, detach_context: bool },
}

#[derive(Debug, Clone)]
pub struct RolloutOutput {
    pub latent: VideoLatent,
    /// Per-chunk outputs, graph intact in train mode.
    pub chunks: Vec<Tensor>,
}

/// Generates `n_chunks` chunks in order, each conditioned on the cache.
pub fn rollout(
    net: &GeneratorNet,
    n_chunks: usize,
    cond: &FusedEmbedding,
    session: &mut GenSession,
    mode: RolloutMode,
) -> Result<RolloutOutput> {
    let dims = net.cfg.latent;
    let steps = net.cfg.denoise_steps;
    let mut chunks = Vec::with_capacity(n_chunks);
    for i in 0..n_chunks {
        let noise = LatentChunk::noise(dims, &mut session.rng);
        let out = match mode {
            RolloutMode::Inference => no_grad(|| {
                denoise_chunk(net, &noise, &mut session.caches, cond, steps, &mut session.rng, CacheCommit::Detached)
            })?,
            RolloutMode::Train {
                context_chunks,
                detach_context,
            } => {
                let commit = if i < context_chunks && detach_context {
                    CacheCommit::Detached
                } else {
                    CacheCommit::Attached
                };
                denoise_chunk(net, &noise, &mut session.caches, cond, steps, &mut session.rng, commit)?
            }
        };
        session.chunks_generated += 1;
        chunks.push(out.frames);
    }
    let latent = if chunks.is_empty() {
        VideoLatent::empty(dims)
    } else {
        VideoLatent::new(Tensor::concat(&chunks, 0)?, dims)?
    };
    Ok(RolloutOutput { latent, chunks })
}
