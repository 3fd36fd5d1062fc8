//! Little-endian binary formats.
//!
//! | magic  | contents                                   |
//! |--------|--------------------------------------------|
//! | `EWKV` | per-layer KV caches                         |
//! | `EWNT` | generator parameters                        |
//! | `EWFU` | fusion parameters                           |
//! | `EWRS` | full rollout state (embeds an `EWKV` blob)  |
//! | `EWSN` | config hash + `EWRS` blob                   |
//! | `EWLS` | config hash + latent records                |
//!
//! Every file starts with the 4-byte magic and a `u32` version. Net files
//! then carry the 32-byte model-config hash. A latent stream is a sequence of
//! records `[chunk u64, c h w 1 as u32×4, f64 payload]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::{CacheGeometry, KVCache, LayerSnapshot, PositionPolicy};
use crate::error::{Error, Result};
use crate::fusion::{FusedEmbedding, Provenance};
use crate::generator::{GenSession, LatentDims, VideoLatent};
use crate::model::{ModelConfig, Nets};
use crate::streamer::{PhaseMode, RolloutState, ScheduleConfig, SchedulePhase, StreamRecord, StreamSink};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;
pub const MAGIC_CACHE: [u8; 4] = *b"EWKV";
pub const MAGIC_GENERATOR: [u8; 4] = *b"EWNT";
pub const MAGIC_FUSION: [u8; 4] = *b"EWFU";
pub const MAGIC_STATE: [u8; 4] = *b"EWRS";
pub const MAGIC_SNAPSHOT: [u8; 4] = *b"EWSN";
pub const MAGIC_STREAM: [u8; 4] = *b"EWLS";
/// Magic, version and hash.
pub const STREAM_HEADER_BYTES: u64 = 40;

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u128(&mut self, v: u128) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        for x in v {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }
    /// Length-prefixed (`u64`) f64 buffer.
    fn buf(&mut self, v: &[f64]) -> Result<()> {
        self.u64(v.len() as u64)?;
        self.f64s(v)
    }
    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        self.bytes(&magic)?;
        self.u32(VERSION as usize)
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::Format("buffer too large".into()))?];
        self.0.read_exact(&mut raw)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn buf(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| Error::Format(format!("buffer length {n}")))?;
        self.f64s(n)
    }
    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.array()?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(&magic)
            )));
        }
        let v = self.u32()?;
        if v != VERSION as usize {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

/// `EWKV`: header, S, W, layer count, dim, tokens per frame, then per layer
/// the counters and the sink/window buffers in declaration order.
pub fn write_caches<W: Write>(w: W, caches: &[KVCache]) -> Result<()> {
    let mut o = Out(w);
    o.header(MAGIC_CACHE)?;
    let geom = caches
        .first()
        .map(|c| *c.geometry())
        .ok_or_else(|| Error::Format("no caches to write".into()))?;
    if caches.iter().any(|c| *c.geometry() != geom) {
        return Err(Error::Format("caches with differing geometry".into()));
    }
    o.u64(geom.sink_tokens as u64)?;
    o.u64(geom.window_tokens as u64)?;
    o.u32(caches.len())?;
    o.u32(geom.dim)?;
    o.u32(geom.tokens_per_frame)?;
    for c in caches {
        let s = c.snapshot();
        o.u8(s.sealed as u8)?;
        o.u32(s.visible_frames)?;
        o.u64(s.total_appended)?;
        o.u32(s.window_starts.len())?;
        for &st in &s.window_starts {
            o.u64(st)?;
        }
        o.buf(&s.sink_keys)?;
        o.buf(&s.sink_values)?;
        o.buf(&s.window_keys)?;
        o.buf(&s.window_values)?;
    }
    Ok(())
}

pub fn read_caches<R: Read>(r: R) -> Result<Vec<KVCache>> {
    let mut i = In(r);
    i.header(MAGIC_CACHE)?;
    let sink_tokens = i.u64()? as usize;
    let window_tokens = i.u64()? as usize;
    let layers = i.u32()?;
    let geom = CacheGeometry {
        sink_tokens,
        window_tokens,
        dim: i.u32()?,
        tokens_per_frame: i.u32()?,
    };
    (0..layers)
        .map(|_| {
            let sealed = i.u8()? != 0;
            let visible_frames = i.u32()?;
            let total_appended = i.u64()?;
            let frames = i.u32()?;
            let window_starts = (0..frames).map(|_| i.u64()).collect::<Result<Vec<_>>>()?;
            let snap = LayerSnapshot {
                sink_keys: i.buf()?,
                sink_values: i.buf()?,
                window_keys: i.buf()?,
                window_values: i.buf()?,
                window_starts,
                sealed,
                visible_frames,
                total_appended,
            };
            KVCache::restore(geom, &snap)
        })
        .collect()
}

/// Named parameter as read from a net file.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_params<W: Write>(w: W, magic: [u8; 4], model_hash: &[u8; 32], params: &[(String, &Tensor)]) -> Result<()> {
    let mut o = Out(w);
    o.header(magic)?;
    o.bytes(model_hash)?;
    o.u32(params.len())?;
    for (name, t) in params {
        o.u32(name.len())?;
        o.bytes(name.as_bytes())?;
        o.u32(t.rank())?;
        for &d in t.shape() {
            o.u64(d as u64)?;
        }
        o.f64s(t.data())?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: R, magic: [u8; 4]) -> Result<([u8; 32], Vec<StoredParam>)> {
    let mut i = In(r);
    i.header(magic)?;
    let hash: [u8; 32] = i.array()?;
    let n = i.u32()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = i.u32()?;
        let mut name = vec![0u8; len];
        i.0.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = i.u32()?;
        let shape = (0..rank).map(|_| i.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = i.f64s(shape.iter().product())?;
        out.push(StoredParam { name, shape, data });
    }
    Ok((hash, out))
}

/// Copies stored values into `params` (same order, names and shapes).
pub fn load_params(stored: &[StoredParam], names: &[String], params: Vec<&mut Tensor>) -> Result<()> {
    if stored.len() != params.len() || names.len() != params.len() {
        return Err(Error::Format(format!(
            "file holds {} parameters, net has {}",
            stored.len(),
            params.len()
        )));
    }
    for ((s, name), p) in stored.iter().zip(names).zip(params) {
        if &s.name != name || s.shape != p.shape() {
            return Err(Error::Format(format!(
                "parameter {} {:?} does not match {name} {:?}",
                s.name,
                s.shape,
                p.shape()
            )));
        }
        *p = Tensor::param(s.data.clone(), &s.shape)?;
    }
    Ok(())
}

/// Writes both trainable nets.
pub fn save_nets(nets: &Nets, generator: &Path, fusion: &Path, model_hash: &[u8; 32]) -> Result<()> {
    let mut g = BufWriter::new(File::create(generator)?);
    write_params(&mut g, MAGIC_GENERATOR, model_hash, &nets.generator.params())?;
    g.flush()?;
    let fp: Vec<(String, &Tensor)> = nets.fusion.params().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let mut f = BufWriter::new(File::create(fusion)?);
    write_params(&mut f, MAGIC_FUSION, model_hash, &fp)?;
    f.flush()?;
    Ok(())
}

/// Builds nets for `config` and fills them from the files, refusing files
/// written for a different model.
pub fn load_nets(config: ModelConfig, generator: &Path, fusion: &Path, model_hash: &[u8; 32]) -> Result<Nets> {
    let mut nets = Nets::new(config, 0)?;
    let (gh, gs) = read_params(BufReader::new(File::open(generator)?), MAGIC_GENERATOR)?;
    let (fh, fs) = read_params(BufReader::new(File::open(fusion)?), MAGIC_FUSION)?;
    if gh != *model_hash || fh != *model_hash {
        return Err(Error::Format("net files were written for a different model config".into()));
    }
    let names: Vec<String> = nets.generator.params().into_iter().map(|(n, _)| n).collect();
    load_params(&gs, &names, nets.generator.params_mut())?;
    let names: Vec<String> = nets.fusion.params().into_iter().map(|(n, _)| n.to_string()).collect();
    load_params(&fs, &names, nets.fusion.params_mut().into_iter().map(|(_, t)| t).collect())?;
    Ok(nets)
}

fn write_latent<W: Write>(o: &mut Out<W>, v: &VideoLatent) -> Result<()> {
    o.u32(v.len())?;
    o.f64s(v.frames().data())
}

fn read_latent<R: Read>(i: &mut In<R>, dims: LatentDims) -> Result<VideoLatent> {
    let d = i.u32()?;
    if d == 0 {
        return Ok(VideoLatent::empty(dims));
    }
    VideoLatent::new(Tensor::new(i.f64s(d * dims.frame_len())?, &[d, dims.frame_len()])?, dims)
}

fn phase_tag(p: Option<SchedulePhase>) -> u8 {
    match p.map(|p| p.mode) {
        None => 0,
        Some(PhaseMode::LongContext) => 1,
        Some(PhaseMode::ShortContext) => 2,
    }
}

/// `EWRS`: RNG, counters, schedule, pending/recent latents, drift anchor,
/// conditioning in force, then the caches as an `EWKV` blob.
pub fn write_state<W: Write>(w: W, state: &RolloutState) -> Result<()> {
    let mut o = Out(w);
    o.header(MAGIC_STATE)?;
    let rng = &state.session.rng;
    o.bytes(&rng.get_seed())?;
    o.u64(rng.get_stream())?;
    o.u128(rng.get_word_pos())?;
    o.u64(state.session.chunks_generated)?;
    let s = state.schedule;
    for v in [s.long_context, s.long_generate, s.short_context, s.short_generate, s.feature_latents] {
        o.u32(v)?;
    }
    o.u8(match state.positions {
        PositionPolicy::Compact => 0,
        PositionPolicy::Absolute => 1,
    })?;
    o.u64(state.phases_started)?;
    o.u8(phase_tag(state.phase))?;
    o.u32(state.chunks_left_in_phase)?;
    o.u64(state.latents_emitted)?;
    let dims = state.pending.dims();
    for v in [dims.c, dims.h, dims.w] {
        o.u32(v)?;
    }
    write_latent(&mut o, &state.pending)?;
    write_latent(&mut o, &state.recent)?;
    match &state.chunk0_features {
        None => o.u8(0)?,
        Some(f) => {
            o.u8(1)?;
            o.buf(f)?;
        }
    }
    o.u8(match state.fused.provenance {
        Provenance::TextOnly => 0,
        Provenance::Fused => 1,
    })?;
    let t = &state.fused.tokens;
    o.u32(t.shape()[0])?;
    o.u32(t.shape()[1])?;
    o.f64s(t.data())?;
    write_caches(&mut o.0, &state.session.caches)
}

pub fn read_state<R: Read>(r: R) -> Result<RolloutState> {
    let mut i = In(r);
    i.header(MAGIC_STATE)?;
    let mut rng = ChaCha8Rng::from_seed(i.array()?);
    rng.set_stream(i.u64()?);
    rng.set_word_pos(i.u128()?);
    let chunks_generated = i.u64()?;
    let schedule = ScheduleConfig {
        long_context: i.u32()?,
        long_generate: i.u32()?,
        short_context: i.u32()?,
        short_generate: i.u32()?,
        feature_latents: i.u32()?,
    };
    let positions = match i.u8()? {
        0 => PositionPolicy::Compact,
        1 => PositionPolicy::Absolute,
        t => return Err(Error::Format(format!("unknown position policy tag {t}"))),
    };
    let phases_started = i.u64()?;
    let phase = match i.u8()? {
        0 => None,
        1 => Some(schedule.long()),
        2 => Some(schedule.short()),
        t => return Err(Error::Format(format!("unknown phase tag {t}"))),
    };
    let chunks_left_in_phase = i.u32()?;
    let latents_emitted = i.u64()?;
    let dims = LatentDims {
        c: i.u32()?,
        h: i.u32()?,
        w: i.u32()?,
    };
    let pending = read_latent(&mut i, dims)?;
    let recent = read_latent(&mut i, dims)?;
    let chunk0_features = match i.u8()? {
        0 => None,
        _ => Some(i.buf()?),
    };
    let provenance = match i.u8()? {
        0 => Provenance::TextOnly,
        _ => Provenance::Fused,
    };
    let (rows, cols) = (i.u32()?, i.u32()?);
    let tokens = Tensor::new(i.f64s(rows * cols)?, &[rows, cols])?;
    let caches = read_caches(&mut i.0)?;
    Ok(RolloutState {
        session: GenSession {
            caches,
            rng,
            chunks_generated,
        },
        schedule,
        positions,
        phases_started,
        phase,
        chunks_left_in_phase,
        latents_emitted,
        pending,
        recent,
        chunk0_features,
        fused: FusedEmbedding { tokens, provenance },
    })
}

pub fn write_record<W: Write>(w: W, rec: &StreamRecord) -> Result<()> {
    let mut o = Out(w);
    o.u64(rec.chunk)?;
    for v in [rec.dims.c, rec.dims.h, rec.dims.w, 1] {
        o.u32(v)?;
    }
    o.f64s(&rec.data)
}

/// Size of one stream record on disk.
pub fn record_bytes(dims: LatentDims) -> u64 {
    8 + 16 + 8 * dims.frame_len() as u64
}

pub fn write_stream_header<W: Write>(w: W, config_hash: &[u8; 32]) -> Result<()> {
    let mut o = Out(w);
    o.header(MAGIC_STREAM)?;
    o.bytes(config_hash)
}

/// Reads a stream file written with [`write_stream_header`].
pub fn read_stream_file<R: Read>(r: R) -> Result<([u8; 32], Vec<StreamRecord>)> {
    let mut i = In(r);
    i.header(MAGIC_STREAM)?;
    let hash = i.array()?;
    Ok((hash, read_stream(i.0)?))
}

/// Rollout state stamped with the hash of the config that produced it.
pub fn save_snapshot(path: &Path, state: &RolloutState, config_hash: &[u8; 32]) -> Result<()> {
    // Write-then-rename so an interrupted save never clobbers the last good one.
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp)?);
    let mut o = Out(&mut w);
    o.header(MAGIC_SNAPSHOT)?;
    o.bytes(config_hash)?;
    write_state(&mut w, state)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<([u8; 32], RolloutState)> {
    let mut i = In(BufReader::new(File::open(path)?));
    i.header(MAGIC_SNAPSHOT)?;
    let hash = i.array()?;
    Ok((hash, read_state(i.0)?))
}

/// Reads every record; latent indices are assigned by position.
pub fn read_stream<R: Read>(r: R) -> Result<Vec<StreamRecord>> {
    let mut i = In(r);
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 8];
        match i.0.read(&mut first)? {
            0 => break,
            8 => {}
            n => i.0.read_exact(&mut first[n..])?,
        }
        let chunk = u64::from_le_bytes(first);
        let (c, h, w, d) = (i.u32()?, i.u32()?, i.u32()?, i.u32()?);
        if d != 1 {
            return Err(Error::Format(format!("record holds {d} latents, expected 1")));
        }
        let dims = LatentDims { c, h, w };
        out.push(StreamRecord {
            chunk,
            latent: out.len() as u64,
            dims,
            data: i.f64s(dims.frame_len())?,
        });
    }
    Ok(out)
}

/// Writes records to any byte sink.
pub struct StreamFileSink<W: Write> {
    out: W,
    pub written: u64,
}

impl<W: Write> StreamFileSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, written: 0 }
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl<W: Write> StreamSink for StreamFileSink<W> {
    fn emit(&mut self, record: StreamRecord) -> Result<()> {
        write_record(&mut self.out, &record)?;
        self.written += 1;
        Ok(())
    }
}
