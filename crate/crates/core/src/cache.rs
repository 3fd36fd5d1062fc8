//! Per-layer KV cache with a persistent sink segment and a rolling window.
//!
//! Keys are stored un-rotated; positions are assigned when the cache is read
//! (see [`PositionPolicy`]). The window evicts whole latent frames, oldest
//! first, so the retained history is always frame-aligned. The sink holds the
//! tokens of the first latent frame and is never evicted.

use std::collections::VecDeque;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::RotaryEmbedding;
use crate::tensor::{is_grad_enabled, Tensor};

/// How rotary positions are assigned to cached tokens at read time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionPolicy {
    /// Contiguous ordinals over `[sink ‖ visible window ‖ query]`, so the
    /// first query token sits at the number of visible cached tokens.
    #[default]
    Compact,
    /// Generation-time token index. Grows without bound; kept for comparison.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheGeometry {
    /// Key/value width (model dim).
    pub dim: usize,
    pub tokens_per_frame: usize,
    /// Sink capacity S in tokens.
    pub sink_tokens: usize,
    /// Window capacity W in tokens.
    pub window_tokens: usize,
}

impl CacheGeometry {
    pub fn validate(&self) -> Result<()> {
        let tpf = self.tokens_per_frame;
        if self.dim == 0 || tpf == 0 {
            return Err(Error::Config("cache dim and tokens_per_frame must be positive".into()));
        }
        if !self.sink_tokens.is_multiple_of(tpf) || !self.window_tokens.is_multiple_of(tpf) {
            return Err(Error::Config(format!(
                "sink ({}) and window ({}) must be whole frames of {tpf} tokens",
                self.sink_tokens, self.window_tokens
            )));
        }
        Ok(())
    }

    pub fn window_frames(&self) -> usize {
        self.window_tokens / self.tokens_per_frame
    }
}

#[derive(Debug, Clone)]
struct FrameKv {
    keys: Tensor,
    values: Tensor,
    /// Absolute token index of the first token of this frame.
    start: u64,
}

/// Rotated visible keys with their values, valid until the next mutation.
#[derive(Debug, Clone)]
struct RotatedView {
    policy: PositionPolicy,
    rope: RotaryEmbedding,
    keys: Tensor,
    values: Tensor,
}

#[derive(Debug, Clone)]
pub struct KVCache {
    geom: CacheGeometry,
    sink_keys: Vec<Tensor>,
    sink_values: Vec<Tensor>,
    sink_len: usize,
    sealed: bool,
    window: VecDeque<FrameKv>,
    visible_frames: usize,
    total_appended: u64,
    rotated: OnceLock<RotatedView>,
}

/// Raw values of one layer cache, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSnapshot {
    pub sink_keys: Vec<f64>,
    pub sink_values: Vec<f64>,
    pub window_keys: Vec<f64>,
    pub window_values: Vec<f64>,
    pub window_starts: Vec<u64>,
    pub sealed: bool,
    pub visible_frames: usize,
    pub total_appended: u64,
}

impl KVCache {
    pub fn new(geom: CacheGeometry) -> Result<Self> {
        geom.validate()?;
        Ok(Self {
            geom,
            sink_keys: Vec::new(),
            sink_values: Vec::new(),
            sink_len: 0,
            sealed: geom.sink_tokens == 0,
            window: VecDeque::with_capacity(geom.window_frames() + 1),
            visible_frames: geom.window_frames(),
            total_appended: 0,
            rotated: OnceLock::new(),
        })
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geom
    }

    pub fn sink_len(&self) -> usize {
        self.sink_len
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn total_appended(&self) -> u64 {
        self.total_appended
    }

    pub fn window_len(&self) -> usize {
        self.window.len() * self.geom.tokens_per_frame
    }

    /// Tokens held in memory: sink plus the whole window buffer.
    pub fn stored_tokens(&self) -> usize {
        self.sink_len + self.window_len()
    }

    /// Number of window frames currently exposed to attention.
    pub fn visible_frames(&self) -> usize {
        self.visible_frames.min(self.window.len())
    }

    /// Tokens attention reads: sink plus the visible tail of the window.
    pub fn live_tokens(&self) -> usize {
        self.sink_len + self.visible_frames() * self.geom.tokens_per_frame
    }

    /// Restricts attention to the most recent `frames` window frames without
    /// evicting anything.
    pub fn set_visible_frames(&mut self, frames: usize) -> Result<()> {
        if frames > self.geom.window_frames() {
            return Err(Error::Config(format!(
                "visible window of {frames} frames exceeds capacity {}",
                self.geom.window_frames()
            )));
        }
        self.visible_frames = frames;
        self.rotated = OnceLock::new();
        Ok(())
    }

    /// Bytes held by cached key/value buffers.
    pub fn allocated_bytes(&self) -> usize {
        let tensors: usize = self
            .sink_keys
            .iter()
            .chain(&self.sink_values)
            .map(Tensor::numel)
            .chain(self.window.iter().map(|f| f.keys.numel() + f.values.numel()))
            .sum();
        tensors * std::mem::size_of::<f64>() + self.window.capacity() * std::mem::size_of::<FrameKv>()
    }

    fn check_kv(&self, keys: &Tensor, values: &Tensor) -> Result<usize> {
        if keys.rank() != 2 || keys.shape()[1] != self.geom.dim || keys.shape() != values.shape() {
            return Err(Error::Dimension {
                op: "cache_append",
                lhs: keys.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        Ok(keys.shape()[0])
    }

    /// Appends `keys`/`values` (`[n × dim]`) to the sink or the window.
    ///
    /// Sink appends are only legal until the sink holds S tokens, at which
    /// point it seals. Window appends must be whole frames and are only
    /// legal once the sink is sealed; frames beyond capacity W are evicted
    /// oldest first.
    pub fn append(&mut self, keys: &Tensor, values: &Tensor, is_sink: bool) -> Result<()> {
        let n = self.check_kv(keys, values)?;
        self.rotated = OnceLock::new();
        if is_sink {
            if self.sealed {
                return Err(Error::State("sink append after the sink was sealed".into()));
            }
            if self.sink_len + n > self.geom.sink_tokens {
                return Err(Error::State(format!(
                    "sink append of {n} tokens overflows sink ({} of {})",
                    self.sink_len, self.geom.sink_tokens
                )));
            }
            self.sink_keys.push(keys.clone());
            self.sink_values.push(values.clone());
            self.sink_len += n;
            self.sealed = self.sink_len == self.geom.sink_tokens;
        } else {
            if !self.sealed {
                return Err(Error::State("window append before the sink frame is complete".into()));
            }
            let tpf = self.geom.tokens_per_frame;
            if n % tpf != 0 {
                return Err(Error::State(format!(
                    "window append of {n} tokens is not a whole number of {tpf}-token frames"
                )));
            }
            for f in 0..n / tpf {
                self.window.push_back(FrameKv {
                    keys: keys.slice_rows(f * tpf, tpf)?,
                    values: values.slice_rows(f * tpf, tpf)?,
                    start: self.total_appended + (f * tpf) as u64,
                });
                if self.window.len() > self.geom.window_frames() {
                    self.window.pop_front();
                }
            }
        }
        self.total_appended += n as u64;
        Ok(())
    }

    /// Routes whole frames: fills the sink first, the remainder goes to the
    /// window.
    pub fn append_frames(&mut self, keys: &Tensor, values: &Tensor) -> Result<()> {
        let n = self.check_kv(keys, values)?;
        let to_sink = if self.sealed {
            0
        } else {
            (self.geom.sink_tokens - self.sink_len).min(n)
        };
        if to_sink > 0 {
            self.append(&keys.slice_rows(0, to_sink)?, &values.slice_rows(0, to_sink)?, true)?;
        }
        if n > to_sink {
            let rest = n - to_sink;
            self.append(
                &keys.slice_rows(to_sink, rest)?,
                &values.slice_rows(to_sink, rest)?,
                false,
            )?;
        }
        Ok(())
    }

    fn visible_window(&self) -> impl Iterator<Item = &FrameKv> {
        let skip = self.window.len() - self.visible_frames();
        self.window.iter().skip(skip)
    }

    /// Visible keys and values, `[sink ‖ visible window]` in cache order, or
    /// `None` when nothing is visible.
    pub fn visible_kv(&self) -> Result<Option<(Tensor, Tensor)>> {
        let keys: Vec<Tensor> = self
            .sink_keys
            .iter()
            .cloned()
            .chain(self.visible_window().map(|f| f.keys.clone()))
            .collect();
        if keys.is_empty() {
            return Ok(None);
        }
        let values: Vec<Tensor> = self
            .sink_values
            .iter()
            .cloned()
            .chain(self.visible_window().map(|f| f.values.clone()))
            .collect();
        Ok(Some((Tensor::concat(&keys, 0)?, Tensor::concat(&values, 0)?)))
    }

    /// Visible keys rotated at their read-time positions under `policy`, and
    /// the matching values. With gradients off the result is kept until the
    /// cache next changes, so repeated reads within a chunk rotate once.
    pub fn rotated_visible(&self, policy: PositionPolicy, rope: &RotaryEmbedding) -> Result<Option<(Tensor, Tensor)>> {
        let memo = !is_grad_enabled();
        if memo {
            if let Some(m) = self.rotated.get().filter(|m| m.policy == policy && m.rope == *rope) {
                return Ok(Some((m.keys.clone(), m.values.clone())));
            }
        }
        let Some((k, v)) = self.visible_kv()? else {
            return Ok(None);
        };
        let (pos, _) = self.positions(policy, 0);
        let k = rope.rotate(&k, &pos)?;
        if memo {
            let _ = self.rotated.set(RotatedView {
                policy,
                rope: rope.clone(),
                keys: k.clone(),
                values: v.clone(),
            });
        }
        Ok(Some((k, v)))
    }

    /// Positions of the visible cached tokens followed by `n_query` query
    /// positions.
    pub fn positions(&self, policy: PositionPolicy, n_query: usize) -> (Vec<usize>, Vec<usize>) {
        match policy {
            PositionPolicy::Compact => {
                let live = self.live_tokens();
                ((0..live).collect(), (live..live + n_query).collect())
            }
            PositionPolicy::Absolute => {
                let tpf = self.geom.tokens_per_frame;
                let mut past: Vec<usize> = (0..self.sink_len).collect();
                for f in self.visible_window() {
                    past.extend((0..tpf).map(|i| f.start as usize + i));
                }
                let q0 = self.total_appended as usize;
                (past, (q0..q0 + n_query).collect())
            }
        }
    }

    /// Replaces every stored tensor by a detached copy (values unchanged).
    pub fn detach_all(&mut self) {
        self.rotated = OnceLock::new();
        for t in self.sink_keys.iter_mut().chain(self.sink_values.iter_mut()) {
            *t = t.detach();
        }
        for f in self.window.iter_mut() {
            f.keys = f.keys.detach();
            f.values = f.values.detach();
        }
    }

    pub fn snapshot(&self) -> LayerSnapshot {
        let flat = |ts: &mut dyn Iterator<Item = &Tensor>| ts.flat_map(|t| t.data().to_vec()).collect::<Vec<f64>>();
        LayerSnapshot {
            sink_keys: flat(&mut self.sink_keys.iter()),
            sink_values: flat(&mut self.sink_values.iter()),
            window_keys: flat(&mut self.window.iter().map(|f| &f.keys)),
            window_values: flat(&mut self.window.iter().map(|f| &f.values)),
            window_starts: self.window.iter().map(|f| f.start).collect(),
            sealed: self.sealed,
            visible_frames: self.visible_frames,
            total_appended: self.total_appended,
        }
    }

    pub fn restore(geom: CacheGeometry, snap: &LayerSnapshot) -> Result<Self> {
        let mut cache = KVCache::new(geom)?;
        let (dim, tpf) = (geom.dim, geom.tokens_per_frame);
        let sink_len = snap.sink_keys.len() / dim;
        if snap.sink_keys.len() != sink_len * dim
            || snap.sink_values.len() != snap.sink_keys.len()
            || sink_len > geom.sink_tokens
        {
            return Err(Error::Format("sink buffers inconsistent with geometry".into()));
        }
        let frames = snap.window_starts.len();
        let frame_len = tpf * dim;
        if snap.window_keys.len() != frames * frame_len
            || snap.window_values.len() != frames * frame_len
            || frames > geom.window_frames()
        {
            return Err(Error::Format("window buffers inconsistent with geometry".into()));
        }
        if sink_len > 0 {
            cache.sink_keys.push(Tensor::new(snap.sink_keys.clone(), &[sink_len, dim])?);
            cache.sink_values.push(Tensor::new(snap.sink_values.clone(), &[sink_len, dim])?);
        }
        cache.sink_len = sink_len;
        cache.sealed = snap.sealed;
        for (f, &start) in snap.window_starts.iter().enumerate() {
            let range = f * frame_len..(f + 1) * frame_len;
            cache.window.push_back(FrameKv {
                keys: Tensor::new(snap.window_keys[range.clone()].to_vec(), &[tpf, dim])?,
                values: Tensor::new(snap.window_values[range].to_vec(), &[tpf, dim])?,
                start,
            });
        }
        cache.set_visible_frames(snap.visible_frames)?;
        cache.total_appended = snap.total_appended;
        Ok(cache)
    }
}

/// Free-function form of [`KVCache::append`].
pub fn cache_append(cache: &mut KVCache, keys: &Tensor, values: &Tensor, is_sink: bool) -> Result<()> {
    cache.append(keys, values, is_sink)
}
