//! Conditional autoregressive training.
//!
//! Each step masks a random future segment of an 81-frame (21-latent)
//! sequence. The generator rolls the whole sequence out chunk by chunk; the
//! chunks before the mask are conditioning context and, with
//! `detach_conditioning`, enter both the cache and the loss as constants.
//! The distribution-matching loss is computed over the full sequence against
//! a stationary AR(1) supervision process. The optional 3D loss regenerates
//! the masked chunks from the context and compares extracted features with
//! the first generation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusedEmbedding};
use crate::generator::{
    denoise_chunk, rollout, CacheCommit, GenSession, GeneratorNet, LatentChunk, LatentDims, RolloutMode,
    VideoLatent, CHUNK_LATENTS,
};
use crate::losses::{
    dmd_grad_over_schedule, dmd_loss, loss_3d, total_loss, DiffusionSchedule, GaussianScore, LossWeights,
    ScorePair,
};
use crate::model::{ModelConfig, Nets};
use crate::optim::Adam;
use crate::tensor::{no_grad, Tensor};

pub const TRAIN_FRAMES: usize = 81;
pub const TRAIN_LATENTS: usize = 21;
pub const TRAIN_CHUNKS: usize = TRAIN_LATENTS / CHUNK_LATENTS;

/// Latent holding 1-based decoded frame `f`: frame 1 is latent 0, then four
/// frames per latent.
pub fn latent_of_frame(f: usize) -> usize {
    if f <= 1 {
        0
    } else {
        (f - 2) / 4 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingPlan {
    /// First masked frame; frames `[1, t)` are context.
    pub t: usize,
    pub first_masked_latent: usize,
    /// First masked chunk. Never 0: the first chunk always stays context.
    pub first_masked_chunk: usize,
}

impl MaskingPlan {
    pub fn from_t(t: usize) -> Result<Self> {
        if !t.is_multiple_of(3) || !(3..TRAIN_FRAMES).contains(&t) {
            return Err(Error::Domain(format!(
                "mask start {t} must be a multiple of 3 in [3, {TRAIN_FRAMES})"
            )));
        }
        let latent = latent_of_frame(t);
        Ok(Self {
            t,
            first_masked_latent: latent,
            first_masked_chunk: (latent / CHUNK_LATENTS).max(1),
        })
    }

    pub fn masked_chunks(&self) -> std::ops::Range<usize> {
        self.first_masked_chunk..TRAIN_CHUNKS
    }

    pub fn masked_latents(&self) -> Vec<usize> {
        (self.first_masked_chunk * CHUNK_LATENTS..TRAIN_LATENTS).collect()
    }
}

/// `t` uniform over `{3, 6, …, 78}`.
pub fn sample_masking_plan<R: Rng + ?Sized>(rng: &mut R) -> MaskingPlan {
    let t = 3 * rng.random_range(1..=(TRAIN_FRAMES - 1) / 3);
    MaskingPlan::from_t(t).expect("t drawn from the valid set")
}

/// Stationary linear-Gaussian latent process,
/// `v_{k+1} = a·v_k + √(1−a²)·ξ`, unit marginal variance per coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionProcess {
    pub a: f64,
    pub dims: LatentDims,
}

impl SupervisionProcess {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n_latents: usize) -> Result<VideoLatent> {
        let d = self.dims.frame_len();
        let mut data = Vec::with_capacity(n_latents * d);
        let innov = (1.0 - self.a * self.a).sqrt();
        for k in 0..n_latents {
            for i in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                let v = if k == 0 { e } else { self.a * data[(k - 1) * d + i] + innov * e };
                data.push(v);
            }
        }
        VideoLatent::new(Tensor::new(data, &[n_latents, d])?, self.dims)
    }

    /// `E[v_{k+m} | v_k] = a^m·v_k`.
    pub fn conditional_mean(&self, last: &[f64], lag: usize) -> Vec<f64> {
        let f = self.a.powi(lag as i32);
        last.iter().map(|v| f * v).collect()
    }

    /// `Var[v_{k+m} | v_k] = 1 − a^{2m}` per coordinate.
    pub fn conditional_variance(&self, lag: usize) -> f64 {
        1.0 - self.a.powi(2 * lag as i32)
    }

    pub fn score(&self, n_latents: usize) -> GaussianScore {
        GaussianScore::ar1(n_latents, self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Adam learning rate (β = 0.9, 0.999).
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub lambda_3d: f64,
    pub enable_l3d: bool,
    pub detach_conditioning: bool,
    pub seed: u64,
    /// AR coefficient of the supervision process.
    pub ar_coeff: f64,
    /// Noise levels in the distribution-matching schedule.
    pub dmd_points: usize,
    pub fake_ridge: f64,
    /// Generator steps a fake-score fit stays valid for.
    pub max_staleness: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 50,
            batch: 1,
            lambda_3d: 0.1,
            enable_l3d: true,
            detach_conditioning: true,
            seed: 0,
            ar_coeff: 0.9,
            dmd_points: 6,
            fake_ridge: 1e-3,
            max_staleness: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.ar_coeff.abs() < 1.0) {
            return Err(Error::Config(format!("ar_coeff {} must satisfy |a| < 1", self.ar_coeff)));
        }
        if self.dmd_points < 3 {
            return Err(Error::Config("dmd_points must be at least 3".into()));
        }
        LossWeights::new(self.lambda_3d)?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_3d: self.lambda_3d,
        }
    }
}

/// Full generation `v` and the context-conditioned regeneration `v̂` of the
/// masked chunks.
#[derive(Debug, Clone)]
pub struct TwoStepGenRecord {
    pub full: Vec<Tensor>,
    pub masked_chunks: Vec<usize>,
    pub regenerated: Vec<Tensor>,
    pub dims: LatentDims,
}

impl TwoStepGenRecord {
    pub fn predicted(&self) -> Result<VideoLatent> {
        VideoLatent::concat(
            &self
                .regenerated
                .iter()
                .map(|t| VideoLatent::new(t.clone(), self.dims))
                .collect::<Result<Vec<_>>>()?,
            self.dims,
        )
    }

    pub fn reference(&self) -> Result<VideoLatent> {
        VideoLatent::concat(
            &self
                .masked_chunks
                .iter()
                .map(|&k| VideoLatent::new(self.full[k].clone(), self.dims))
                .collect::<Result<Vec<_>>>()?,
            self.dims,
        )
    }
}

/// Regenerates the chunks covering `masked_latents` with a fresh session
/// seeded by `seed`; unmasked chunks before them are replayed into the cache
/// as context.
pub fn two_step_generate(
    net: &GeneratorNet,
    cond: &FusedEmbedding,
    full: &[Tensor],
    masked_latents: &[usize],
    seed: u64,
    detach_context: bool,
) -> Result<TwoStepGenRecord> {
    let dims = net.config().latent;
    let n = full.len() * CHUNK_LATENTS;
    let set: BTreeSet<usize> = masked_latents.iter().copied().collect();
    if let Some(&bad) = set.iter().find(|&&i| i >= n) {
        return Err(Error::Alignment(format!("masked latent {bad} outside a {n}-latent sequence")));
    }
    let chunks: BTreeSet<usize> = set.iter().map(|i| i / CHUNK_LATENTS).collect();
    for &k in &chunks {
        if !(k * CHUNK_LATENTS..(k + 1) * CHUNK_LATENTS).all(|i| set.contains(&i)) {
            return Err(Error::Alignment(format!("chunk {k} is only partly masked")));
        }
    }
    let mut regenerated = Vec::with_capacity(chunks.len());
    if let Some(&last) = chunks.last() {
        let mut session = GenSession::new(net, seed)?;
        let steps = net.config().denoise_steps;
        for (k, chunk) in full.iter().enumerate().take(last + 1) {
            if chunks.contains(&k) {
                let noise = LatentChunk::noise(dims, &mut session.rng);
                let out = denoise_chunk(
                    net,
                    &noise,
                    &mut session.caches,
                    cond,
                    steps,
                    &mut session.rng,
                    CacheCommit::Attached,
                )?;
                regenerated.push(out.frames().clone());
            } else {
                let how = if detach_context {
                    CacheCommit::Detached
                } else {
                    CacheCommit::Attached
                };
                net.commit(chunk, &mut session.caches, cond, how)?;
            }
        }
    }
    Ok(TwoStepGenRecord {
        full: full.to_vec(),
        masked_chunks: chunks.into_iter().collect(),
        regenerated,
        dims,
    })
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub clips: Vec<VideoLatent>,
    pub plans: Vec<MaskingPlan>,
    pub rollout_seeds: Vec<u64>,
    pub regen_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub gen_loss: f64,
    pub l3d: f64,
    pub lambda_3d: f64,
    pub total: f64,
    pub prefix_grad_norm: f64,
    pub generated_grad_norm: f64,
    pub fusion_grad_norm: f64,
    pub mask_t: Vec<usize>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Nets,
    process: SupervisionProcess,
    schedule: DiffusionSchedule,
    scores: ScorePair,
    gen_opt: Adam,
    fusion_opt: Adam,
    rng: ChaCha8Rng,
    regen_rng: ChaCha8Rng,
    step: u64,
}

fn combined_norm(tensors: &[&Tensor]) -> f64 {
    tensors.iter().map(|t| t.grad_norm().powi(2)).sum::<f64>().sqrt()
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if model.fusion.feature_latents > CHUNK_LATENTS {
            return Err(Error::Config(format!(
                "feature_latents {} exceeds the {CHUNK_LATENTS}-latent context available at the earliest mask",
                model.fusion.feature_latents
            )));
        }
        let nets = Nets::new(model, cfg.seed)?;
        let process = SupervisionProcess {
            a: cfg.ar_coeff,
            dims: model.generator.latent,
        };
        let mut regen_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        regen_rng.set_stream(1);
        Ok(Self {
            scores: ScorePair::new(process.score(TRAIN_LATENTS), cfg.max_staleness, cfg.fake_ridge),
            schedule: DiffusionSchedule::linear_vp(cfg.dmd_points)?,
            gen_opt: Adam::new(cfg.lr),
            fusion_opt: Adam::new(cfg.lr),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            regen_rng,
            process,
            nets,
            cfg,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn process(&self) -> &SupervisionProcess {
        &self.process
    }

    pub fn sample_batch(&mut self) -> Result<TrainBatch> {
        let b = self.cfg.batch;
        let mut batch = TrainBatch {
            clips: Vec::with_capacity(b),
            plans: Vec::with_capacity(b),
            rollout_seeds: Vec::with_capacity(b),
            regen_seeds: Vec::with_capacity(b),
        };
        for _ in 0..b {
            batch.clips.push(self.process.sample(&mut self.rng, TRAIN_LATENTS)?);
            batch.plans.push(sample_masking_plan(&mut self.rng));
            batch.rollout_seeds.push(self.rng.random());
            batch.regen_seeds.push(self.regen_rng.random());
        }
        Ok(batch)
    }

    /// Fused embedding from the clip's latents just before the mask.
    fn conditioning(&self, clip: &VideoLatent, plan: &MaskingPlan) -> Result<FusedEmbedding> {
        let n = self.nets.config.fusion.feature_latents;
        let end = plan.first_masked_chunk * CHUNK_LATENTS;
        let feature = self.nets.extractor.extract(&clip.slice(end - n, n)?)?;
        fuse(&self.nets.fusion, &self.nets.text, &feature)
    }

    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepReport> {
        let detach = self.cfg.detach_conditioning;
        let net = &self.nets.generator;
        let mut columns = Vec::with_capacity(batch.clips.len());
        let mut prefix_chunks = Vec::new();
        let mut generated_chunks = Vec::new();
        let mut l3d_terms = Vec::new();
        for (((clip, plan), &seed), &regen_seed) in batch
            .clips
            .iter()
            .zip(&batch.plans)
            .zip(&batch.rollout_seeds)
            .zip(&batch.regen_seeds)
        {
            let cond = self.conditioning(clip, plan)?;
            let mut session = GenSession::new(net, seed)?;
            let m = plan.first_masked_chunk;
            let out = rollout(
                net,
                TRAIN_CHUNKS,
                &cond,
                &mut session,
                RolloutMode::Train {
                    context_chunks: m,
                    detach_context: detach,
                },
            )?;
            let seq: Vec<Tensor> = out
                .chunks
                .iter()
                .enumerate()
                .map(|(k, c)| if k < m && detach { c.detach() } else { c.clone() })
                .collect();
            columns.push(Tensor::concat(&seq, 0)?);
            if self.cfg.enable_l3d {
                let rec = two_step_generate(net, &cond, &out.chunks, &plan.masked_latents(), regen_seed, detach)?;
                let pred = self.nets.extractor.extract(&rec.predicted()?)?;
                let mut reference = self.nets.extractor.extract(&rec.reference()?.detach())?;
                reference.data = reference.data.detach();
                l3d_terms.push(loss_3d(&pred, &reference)?);
            }
            prefix_chunks.extend(out.chunks[..m].iter().cloned());
            generated_chunks.extend(out.chunks[m..].iter().cloned());
        }

        // Columns of all batch elements are draws of the same 21-dim process.
        let x = Tensor::concat(&columns, 1)?;
        self.scores.fit_fake(&x.detach())?;
        let g = dmd_grad_over_schedule(&x, &self.scores, &self.schedule, &mut self.rng)?;
        let gen = dmd_loss(&x, &g)?;
        let l3d = if l3d_terms.is_empty() {
            Tensor::scalar(0.0)
        } else {
            let n = l3d_terms.len() as f64;
            l3d_terms.iter().skip(1).try_fold(l3d_terms[0].clone(), |acc, t| acc.add(t))?.scale(1.0 / n)
        };
        let total = total_loss(&gen, &l3d, &self.cfg.weights())?;
        if !total.all_finite() {
            return Err(Error::NonFinite {
                what: format!("training loss at step {}", self.step),
                stats: format!(
                    "gen {}; l3d {}; samples {}; dmd grad {}",
                    gen.stats(),
                    l3d.stats(),
                    x.stats(),
                    g.stats()
                ),
            });
        }
        total.backward();

        let prefix: Vec<&Tensor> = prefix_chunks.iter().collect();
        let generated: Vec<&Tensor> = generated_chunks.iter().collect();
        let fusion_params: Vec<&Tensor> = self.nets.fusion.params().into_iter().map(|(_, t)| t).collect();
        let report = StepReport {
            step: self.step,
            gen_loss: gen.item(),
            l3d: l3d.item(),
            lambda_3d: self.cfg.lambda_3d,
            total: total.item(),
            prefix_grad_norm: combined_norm(&prefix),
            generated_grad_norm: combined_norm(&generated),
            fusion_grad_norm: combined_norm(&fusion_params),
            mask_t: batch.plans.iter().map(|p| p.t).collect(),
        };

        let mut gp = self.nets.generator.params_mut();
        self.gen_opt.step(&mut gp)?;
        let mut fp: Vec<&mut Tensor> = self.nets.fusion.params_mut().into_iter().map(|(_, t)| t).collect();
        self.fusion_opt.step(&mut fp)?;
        self.scores.generator_stepped();
        self.step += 1;
        Ok(report)
    }

    /// Samples a batch and trains on it.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.sample_batch()?;
        self.train_step(&batch)
    }

    pub fn run(&mut self, mut on_report: impl FnMut(&StepReport) -> Result<()>) -> Result<Vec<StepReport>> {
        let mut out = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let r = self.step()?;
            on_report(&r)?;
            out.push(r);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    pub train_steps: usize,
    pub horizon_chunks: usize,
    pub eval_rollouts: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            train_steps: 20,
            horizon_chunks: 32,
            eval_rollouts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSeries {
    pub detach_conditioning: bool,
    /// Mean squared deviation of chunk `k` from the supervision process's
    /// conditional mean given the data chunk 0.
    pub divergence: Vec<f64>,
    pub prefix_grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Conditional variance of the process per chunk: the divergence an
    /// exact sampler would show.
    pub reference_variance: Vec<f64>,
    pub detached: DriftSeries,
    pub baseline: DriftSeries,
}

fn drift_series(cfg: &TrainConfig, model: &ModelConfig, drift: &DriftConfig) -> Result<DriftSeries> {
    let mut trainer = Trainer::new(TrainConfig { steps: drift.train_steps, ..*cfg }, *model)?;
    let prefix_grad_norms = trainer.run(|_| Ok(()))?.iter().map(|r| r.prefix_grad_norm).collect();
    let process = *trainer.process();
    let net = &trainer.nets.generator;
    let d = model.generator.latent.frame_len();
    let mut divergence = vec![0.0; drift.horizon_chunks];
    // Evaluation draws are shared across configs.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD81F7);
    for _ in 0..drift.eval_rollouts {
        let clip = process.sample(&mut eval_rng, CHUNK_LATENTS)?;
        let seed: u64 = eval_rng.random();
        let feature = trainer.nets.extractor.extract(&clip)?;
        let cond = fuse(&trainer.nets.fusion, &trainer.nets.text, &feature)?;
        let mut session = GenSession::new(net, seed)?;
        no_grad(|| -> Result<()> {
            net.commit(clip.frames(), &mut session.caches, &cond, CacheCommit::Detached)?;
            let last = &clip.frames().data()[(CHUNK_LATENTS - 1) * d..];
            let out = rollout(
                net,
                drift.horizon_chunks.saturating_sub(1),
                &cond,
                &mut session,
                RolloutMode::Inference,
            )?;
            for (i, chunk) in out.chunks.iter().enumerate() {
                let k = i + 1;
                let mut sq = 0.0;
                for j in 0..CHUNK_LATENTS {
                    let lag = k * CHUNK_LATENTS + j - (CHUNK_LATENTS - 1);
                    let mean = process.conditional_mean(last, lag);
                    let row = &chunk.data()[j * d..(j + 1) * d];
                    sq += row.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                }
                divergence[k] += sq / (CHUNK_LATENTS * d) as f64 / drift.eval_rollouts as f64;
            }
            Ok(())
        })?;
    }
    Ok(DriftSeries {
        detach_conditioning: cfg.detach_conditioning,
        divergence,
        prefix_grad_norms,
    })
}

/// Trains one net per config and measures per-chunk divergence from the
/// supervision process over a long rollout. The configs must differ only in
/// `detach_conditioning`.
pub fn drift_experiment(
    pair: (&TrainConfig, &TrainConfig),
    model: &ModelConfig,
    drift: &DriftConfig,
) -> Result<DriftReport> {
    let (a, b) = pair;
    let flipped = TrainConfig {
        detach_conditioning: !b.detach_conditioning,
        ..*b
    };
    if a.detach_conditioning == b.detach_conditioning || *a != flipped {
        return Err(Error::Config(
            "drift configs must differ in detach_conditioning and nothing else".into(),
        ));
    }
    let (det, base) = if a.detach_conditioning { (a, b) } else { (b, a) };
    let process = SupervisionProcess {
        a: det.ar_coeff,
        dims: model.generator.latent,
    };
    let reference_variance = (0..drift.horizon_chunks)
        .map(|k| {
            if k == 0 {
                return 0.0;
            }
            (0..CHUNK_LATENTS)
                .map(|j| process.conditional_variance(k * CHUNK_LATENTS + j - (CHUNK_LATENTS - 1)))
                .sum::<f64>()
                / CHUNK_LATENTS as f64
        })
        .collect();
    Ok(DriftReport {
        reference_variance,
        detached: drift_series(det, model, drift)?,
        baseline: drift_series(base, model, drift)?,
    })
}
