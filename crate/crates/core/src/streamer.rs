//! Unbounded generation driver.
//!
//! Phases alternate strictly, long first. A long phase generates one chunk
//! with a wide context; a short phase generates several chunks with only the
//! sink and the two latest frames visible. The cache always stores the full
//! long window; a phase only changes how much of it attention reads.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::PositionPolicy;
use crate::error::{Error, Result};
use crate::fusion::{fuse_optional, Extractor3D, Feature3D, FusedEmbedding, FusionNet, TextEmbedding};
use crate::generator::{rollout, GenSession, GeneratorNet, LatentDims, RolloutMode, VideoLatent, CHUNK_LATENTS};
use crate::tensor::no_grad;

/// Decoded frame count of `d` latents: `4(d−1)+1`.
pub fn frames_for_latents(d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::Domain("a latent sequence needs at least one latent".into()));
    }
    Ok(4 * (d - 1) + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseMode {
    LongContext,
    ShortContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulePhase {
    pub mode: PhaseMode,
    /// Latents visible as context, sink included.
    pub context_latents: usize,
    pub generate_latents: usize,
}

impl SchedulePhase {
    /// Window frames attention reads (the sink is not part of the window).
    pub fn window_frames(&self) -> usize {
        self.context_latents - 1
    }

    pub fn chunks(&self) -> usize {
        self.generate_latents / CHUNK_LATENTS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub long_context: usize,
    pub long_generate: usize,
    pub short_context: usize,
    pub short_generate: usize,
    /// Latents fed to the extractor when fusion is refreshed.
    pub feature_latents: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            long_context: 18,
            long_generate: 3,
            short_context: 3,
            short_generate: 18,
            feature_latents: 3,
        }
    }
}

impl ScheduleConfig {
    pub fn long(&self) -> SchedulePhase {
        SchedulePhase {
            mode: PhaseMode::LongContext,
            context_latents: self.long_context,
            generate_latents: self.long_generate,
        }
    }

    pub fn short(&self) -> SchedulePhase {
        SchedulePhase {
            mode: PhaseMode::ShortContext,
            context_latents: self.short_context,
            generate_latents: self.short_generate,
        }
    }

    pub fn validate(&self, window_frames: usize) -> Result<()> {
        for p in [self.long(), self.short()] {
            if p.context_latents < 1 || p.generate_latents == 0 || p.generate_latents % CHUNK_LATENTS != 0 {
                return Err(Error::Config(format!(
                    "phase {p:?} must have context ≥ 1 and generate a positive multiple of {CHUNK_LATENTS}"
                )));
            }
            if p.window_frames() > window_frames {
                return Err(Error::Config(format!(
                    "phase {:?} needs a {}-frame window, the cache holds {window_frames}",
                    p.mode,
                    p.window_frames()
                )));
            }
        }
        if self.feature_latents == 0 {
            return Err(Error::Config("feature_latents must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen extractor, fusion net and prompt used while streaming.
#[derive(Debug, Clone)]
pub struct FusionContext {
    pub extractor: Extractor3D,
    pub net: FusionNet,
    pub text: TextEmbedding,
}

impl FusionContext {
    pub fn features(&self, latent: &VideoLatent) -> Result<Feature3D> {
        self.extractor.extract(latent)
    }
}

/// Everything needed to continue a stream exactly.
#[derive(Debug, Clone)]
pub struct RolloutState {
    pub session: GenSession,
    pub schedule: ScheduleConfig,
    pub positions: PositionPolicy,
    /// Phases started so far; the next one is long iff this is even.
    pub phases_started: u64,
    pub phase: Option<SchedulePhase>,
    pub chunks_left_in_phase: usize,
    pub latents_emitted: u64,
    /// Generated but not yet emitted latent frames.
    pub pending: VideoLatent,
    /// Most recent latents, for refreshing fusion.
    pub recent: VideoLatent,
    pub chunk0_features: Option<Vec<f64>>,
    pub fused: FusedEmbedding,
}

impl RolloutState {
    pub fn new(net: &GeneratorNet, fusion: &FusionContext, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        schedule.validate(net.config().window_frames)?;
        let dims = net.config().latent;
        Ok(Self {
            session: GenSession::new(net, seed)?,
            schedule,
            positions: net.attention().positions,
            phases_started: 0,
            phase: None,
            chunks_left_in_phase: 0,
            latents_emitted: 0,
            pending: VideoLatent::empty(dims),
            recent: VideoLatent::empty(dims),
            chunk0_features: None,
            fused: FusedEmbedding::text_only(&fusion.text),
        })
    }

    pub fn latents_generated(&self) -> u64 {
        self.session.chunks_generated * CHUNK_LATENTS as u64
    }

    pub fn frames_emitted(&self) -> usize {
        frames_for_latents(self.latents_emitted as usize).unwrap_or(0)
    }
}

/// Starts the next phase: long first, then strict alternation.
pub fn next_phase(state: &mut RolloutState) -> SchedulePhase {
    let phase = if state.phases_started.is_multiple_of(2) {
        state.schedule.long()
    } else {
        state.schedule.short()
    };
    state.phases_started += 1;
    state.phase = Some(phase);
    state.chunks_left_in_phase = phase.chunks();
    phase
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTarget {
    Latents(u64),
    /// Until the stop flag is raised.
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkStat {
    pub chunk: u64,
    pub phase: PhaseMode,
    pub wall_ms: f64,
    pub live_tokens: usize,
    pub stored_tokens: usize,
    pub cache_bytes: usize,
    /// `1 − cos` between this chunk's features and chunk 0's.
    pub drift: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub chunks: Vec<ChunkStat>,
    pub latents_emitted: u64,
    pub frames_emitted: usize,
    pub max_live_tokens: usize,
    pub stopped: bool,
}

/// Nearest-rank percentile of unsorted samples; `p` in (0, 1].
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() || !(p > 0.0 && p <= 1.0) {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

/// Latency and footprint figures over a stream report. The first quartile
/// of chunks counts as warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StreamSummary {
    pub chunks: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub head_median_ms: f64,
    pub tail_p95_ms: f64,
    /// `tail_p95_ms / head_median_ms`.
    pub tail_ratio: f64,
    /// Coefficient of variation of cache bytes after warm-up.
    pub cache_bytes_cv: f64,
    pub max_live_tokens: usize,
}

impl StreamReport {
    /// `None` with fewer than four chunks.
    pub fn summary(&self) -> Option<StreamSummary> {
        let n = self.chunks.len();
        if n < 4 {
            return None;
        }
        let ms: Vec<f64> = self.chunks.iter().map(|c| c.wall_ms).collect();
        let q = n / 4;
        let head_median_ms = percentile(&ms[..q], 0.5)?;
        let tail_p95_ms = percentile(&ms[n - q..], 0.95)?;
        let bytes: Vec<f64> = self.chunks[q..].iter().map(|c| c.cache_bytes as f64).collect();
        let mean = bytes.iter().sum::<f64>() / bytes.len() as f64;
        let var = bytes.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / bytes.len() as f64;
        Some(StreamSummary {
            chunks: n,
            median_ms: percentile(&ms, 0.5)?,
            p95_ms: percentile(&ms, 0.95)?,
            head_median_ms,
            tail_p95_ms,
            tail_ratio: tail_p95_ms / head_median_ms,
            cache_bytes_cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
            max_live_tokens: self.max_live_tokens,
        })
    }
}

/// One emitted latent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub chunk: u64,
    pub latent: u64,
    pub dims: LatentDims,
    pub data: Vec<f64>,
}

pub trait StreamSink {
    fn emit(&mut self, record: StreamRecord) -> Result<()>;

    /// Called after every generated chunk, at a resumable boundary.
    fn chunk_done(&mut self, _state: &RolloutState) -> Result<()> {
        Ok(())
    }
}

impl StreamSink for Vec<StreamRecord> {
    fn emit(&mut self, record: StreamRecord) -> Result<()> {
        self.push(record);
        Ok(())
    }
}

/// Producer half of a bounded queue: `emit` blocks while the queue is full.
pub struct ChannelSink {
    tx: SyncSender<StreamRecord>,
}

pub fn bounded_channel(capacity: usize) -> (ChannelSink, Receiver<StreamRecord>) {
    let (tx, rx) = sync_channel(capacity);
    (ChannelSink { tx }, rx)
}

impl StreamSink for ChannelSink {
    fn emit(&mut self, record: StreamRecord) -> Result<()> {
        self.tx
            .send(record)
            .map_err(|_| Error::State("stream consumer hung up".into()))
    }
}

fn emit_pending(state: &mut RolloutState, target: StreamTarget, sink: &mut dyn StreamSink) -> Result<()> {
    let room = match target {
        StreamTarget::Latents(n) => n.saturating_sub(state.latents_emitted) as usize,
        StreamTarget::Infinite => usize::MAX,
    };
    let take = room.min(state.pending.len());
    if take == 0 {
        return Ok(());
    }
    let dims = state.pending.dims();
    let frame_len = dims.frame_len();
    let data = state.pending.frames().data();
    // Pending latents always belong to the most recent chunk.
    let first_latent = state.latents_generated() - state.pending.len() as u64;
    for i in 0..take {
        let latent = first_latent + i as u64;
        sink.emit(StreamRecord {
            chunk: latent / CHUNK_LATENTS as u64,
            latent,
            dims,
            data: data[i * frame_len..(i + 1) * frame_len].to_vec(),
        })?;
    }
    state.latents_emitted += take as u64;
    state.pending = state.pending.slice(take, state.pending.len() - take)?;
    Ok(())
}

/// `cached` holds the features of `state.recent` when already known.
fn refresh_fusion(state: &mut RolloutState, fusion: &FusionContext, cached: Option<&Feature3D>) -> Result<()> {
    let want = state.schedule.feature_latents;
    let feature = if state.recent.len() >= want {
        match cached {
            Some(f) => Some(f.clone()),
            None => {
                let src = state.recent.slice(state.recent.len() - want, want)?;
                Some(fusion.features(&src)?)
            }
        }
    } else {
        None
    };
    state.fused = fuse_optional(&fusion.net, &fusion.text, feature.as_ref())?;
    Ok(())
}

/// Generates and emits latents until `target` is met or `stop` is raised.
/// The stop flag is checked between chunks, so a chunk in progress always
/// completes.
pub fn stream(
    net: &GeneratorNet,
    fusion: &FusionContext,
    state: &mut RolloutState,
    target: StreamTarget,
    stop: &AtomicBool,
    sink: &mut dyn StreamSink,
) -> Result<StreamReport> {
    let local;
    let net = if net.attention().positions != state.positions {
        let mut n = net.clone();
        n.set_position_policy(state.positions);
        local = n;
        &local
    } else {
        net
    };
    let dims = net.config().latent;
    let mut report = StreamReport::default();
    // Features of `state.recent`, when it is exactly the last chunk.
    let mut recent_features: Option<Feature3D> = None;
    no_grad(|| -> Result<()> {
        emit_pending(state, target, sink)?;
        loop {
            if let StreamTarget::Latents(n) = target {
                if state.latents_emitted >= n {
                    break;
                }
            }
            if stop.load(Ordering::SeqCst) {
                report.stopped = true;
                break;
            }
            let started = Instant::now();
            if state.chunks_left_in_phase == 0 {
                let phase = next_phase(state);
                state.session.set_visible_frames(phase.window_frames())?;
                if phase.mode == PhaseMode::LongContext {
                    refresh_fusion(state, fusion, recent_features.as_ref())?;
                }
            }
            let phase = state.phase.expect("phase set above");
            let out = rollout(net, 1, &state.fused, &mut state.session, RolloutMode::Inference)?;
            state.chunks_left_in_phase -= 1;
            let chunk = state.session.chunks_generated - 1;

            let features = fusion.features(&out.latent)?;
            let drift = match &state.chunk0_features {
                None => {
                    state.chunk0_features = Some(features.data.to_vec());
                    0.0
                }
                Some(f0) => {
                    let f0 = crate::tensor::Tensor::new(f0.clone(), features.data.shape())?;
                    1.0 - features.data.cosine_similarity(&f0)?.item()
                }
            };
            let recent = VideoLatent::concat(&[state.recent.clone(), out.latent.clone()], dims)?;
            let keep = state.schedule.feature_latents.min(recent.len());
            state.recent = recent.slice(recent.len() - keep, keep)?;
            recent_features = (keep == out.latent.len()).then(|| features.clone());
            state.pending = VideoLatent::concat(&[state.pending.clone(), out.latent], dims)?;
            emit_pending(state, target, sink)?;

            let live = state.session.live_tokens();
            report.max_live_tokens = report.max_live_tokens.max(live);
            report.chunks.push(ChunkStat {
                chunk,
                phase: phase.mode,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                live_tokens: live,
                stored_tokens: state.session.stored_tokens(),
                cache_bytes: state.session.cache_bytes(),
                drift,
            });
            sink.chunk_done(state)?;
        }
        Ok(())
    })?;
    report.latents_emitted = state.latents_emitted;
    report.frames_emitted = state.frames_emitted();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::generator::GeneratorConfig;

    pub(crate) fn setup() -> (GeneratorNet, FusionContext) {
        let cfg = GeneratorConfig {
            latent: LatentDims { c: 2, h: 4, w: 4 },
            patch: 2,
            model_dim: 16,
            n_heads: 2,
            n_layers: 1,
            mlp_hidden: 16,
            denoise_steps: 2,
            cond_dim: 4,
            ..GeneratorConfig::default()
        };
        let net = GeneratorNet::new(cfg, 1).unwrap();
        let fusion = FusionContext {
            extractor: Extractor3D::new(cfg.latent, 3).unwrap(),
            net: FusionNet::new(
                FusionConfig {
                    feature_channels: 3,
                    feature_frames: 9,
                    text_tokens: 2,
                    text_dim: 4,
                },
                2,
            )
            .unwrap(),
            text: TextEmbedding::synthetic(3, 2, 4).unwrap(),
        };
        (net, fusion)
    }

    #[test]
    fn frame_law() {
        assert_eq!(frames_for_latents(1).unwrap(), 1);
        assert_eq!(frames_for_latents(3).unwrap(), 9);
        assert_eq!(frames_for_latents(21).unwrap(), 81);
        assert!(matches!(frames_for_latents(0), Err(Error::Domain(_))));
    }

    #[test]
    fn phases_alternate_long_first() {
        let (net, fusion) = setup();
        let mut s = RolloutState::new(&net, &fusion, ScheduleConfig::default(), 0).unwrap();
        let modes: Vec<_> = (0..6).map(|_| next_phase(&mut s)).collect();
        for (i, p) in modes.iter().enumerate() {
            let budget = (p.context_latents, p.generate_latents);
            if i % 2 == 0 {
                assert_eq!(p.mode, PhaseMode::LongContext);
                assert_eq!(budget, (18, 3));
                assert_eq!(p.window_frames(), 17);
            } else {
                assert_eq!(p.mode, PhaseMode::ShortContext);
                assert_eq!(budget, (3, 18));
                assert_eq!(p.window_frames(), 2);
            }
        }
    }

    #[test]
    fn zero_target_is_empty() {
        let (net, fusion) = setup();
        let mut s = RolloutState::new(&net, &fusion, ScheduleConfig::default(), 0).unwrap();
        let mut out = Vec::new();
        let rep = stream(&net, &fusion, &mut s, StreamTarget::Latents(0), &AtomicBool::new(false), &mut out).unwrap();
        assert!(out.is_empty());
        assert!(rep.chunks.is_empty());
        assert_eq!(rep.frames_emitted, 0);
    }

    #[test]
    fn accounting_for_42_and_partial_targets() {
        let (net, fusion) = setup();
        let stop = AtomicBool::new(false);
        let mut s = RolloutState::new(&net, &fusion, ScheduleConfig::default(), 0).unwrap();
        let mut out = Vec::new();
        let rep = stream(&net, &fusion, &mut s, StreamTarget::Latents(42), &stop, &mut out).unwrap();
        assert_eq!(out.len(), 42);
        assert_eq!(rep.frames_emitted, frames_for_latents(42).unwrap());
        // 42 latents = two full long/short cycles of 7 chunks each.
        assert_eq!(s.phases_started, 4);
        assert_eq!(rep.chunks.len(), 14);
        let long = rep.chunks.iter().filter(|c| c.phase == PhaseMode::LongContext).count();
        assert_eq!(long, 2);
        assert!(out.iter().enumerate().all(|(i, r)| r.latent == i as u64 && r.chunk == i as u64 / 3));

        let mut s = RolloutState::new(&net, &fusion, ScheduleConfig::default(), 0).unwrap();
        let mut part = Vec::new();
        stream(&net, &fusion, &mut s, StreamTarget::Latents(5), &stop, &mut part).unwrap();
        assert_eq!(part.len(), 5);
        assert_eq!(s.pending.len(), 1);
        stream(&net, &fusion, &mut s, StreamTarget::Latents(42), &stop, &mut part).unwrap();
        assert_eq!(part, out);
    }

    #[test]
    fn sink_persists_and_live_tokens_bounded() {
        let (net, fusion) = setup();
        let mut s = RolloutState::new(&net, &fusion, ScheduleConfig::default(), 4).unwrap();
        let mut out = Vec::new();
        let rep = stream(&net, &fusion, &mut s, StreamTarget::Latents(90), &AtomicBool::new(false), &mut out).unwrap();
        let g = net.config().cache_geometry();
        assert!(rep.max_live_tokens <= g.sink_tokens + g.window_tokens);
        assert!(s.session.caches.iter().all(|c| c.sink_len() == g.sink_tokens && c.is_sealed()));
        assert!(rep.chunks.iter().all(|c| c.drift.is_finite()));
        assert_eq!(rep.chunks[0].drift, 0.0);
    }

    #[test]
    fn stop_flag_halts_at_chunk_boundary() {
        let (net, fusion) = setup();
        let mut s = RolloutState::new(&net, &fusion, ScheduleConfig::default(), 0).unwrap();
        let stop = AtomicBool::new(false);

        struct StopAfter<'a>(&'a AtomicBool, usize, usize);
        impl StreamSink for StopAfter<'_> {
            fn emit(&mut self, _: StreamRecord) -> Result<()> {
                self.2 += 1;
                Ok(())
            }
            fn chunk_done(&mut self, _: &RolloutState) -> Result<()> {
                self.1 -= 1;
                if self.1 == 0 {
                    self.0.store(true, Ordering::SeqCst);
                }
                Ok(())
            }
        }
        let mut sink = StopAfter(&stop, 4, 0);
        let rep = stream(&net, &fusion, &mut s, StreamTarget::Infinite, &stop, &mut sink).unwrap();
        assert!(rep.stopped);
        assert_eq!(rep.chunks.len(), 4);
        assert_eq!(sink.2, 12);
    }

    #[test]
    fn bounded_channel_delivers_in_order() {
        let (net, fusion) = setup();
        let mut s = RolloutState::new(&net, &fusion, ScheduleConfig::default(), 0).unwrap();
        let (mut tx, rx) = bounded_channel(2);
        let consumer = std::thread::spawn(move || rx.iter().map(|r| r.latent).collect::<Vec<_>>());
        stream(&net, &fusion, &mut s, StreamTarget::Latents(12), &AtomicBool::new(false), &mut tx).unwrap();
        drop(tx);
        assert_eq!(consumer.join().unwrap(), (0..12).collect::<Vec<u64>>());
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(percentile(&v, 0.5), Some(3.0));
        assert_eq!(percentile(&v, 0.95), Some(5.0));
        assert_eq!(percentile(&v, 0.2), Some(1.0));
        assert_eq!(percentile(&[], 0.5), None);
    }
}
