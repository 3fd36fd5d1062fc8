use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use ew_core::config::RunConfig;
use ew_core::format::{self, StreamFileSink};
use ew_core::model::Nets;
use ew_core::streamer::{stream, RolloutState, StreamRecord, StreamSink, StreamTarget};
use ew_core::trainer::{drift_experiment, TrainConfig, Trainer};
use ew_core::verify;

#[derive(Parser)]
#[command(name = "ew", version, about = "Unbounded latent video streaming: train, roll out, verify, benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the generator and fusion nets; writes JSONL step reports and net files.
    Train {
        config: PathBuf,
        /// Also run the detach-vs-baseline drift experiment.
        #[arg(long)]
        drift: bool,
    },
    /// Stream latents from trained nets.
    Rollout {
        config: PathBuf,
        /// Total latents to have emitted, counting any resumed progress.
        #[arg(long, required_unless_present = "infinite", conflicts_with = "infinite")]
        latents: Option<u64>,
        /// Run until interrupted.
        #[arg(long)]
        infinite: bool,
        /// Snapshot the rollout state every K chunks (0: only at the end).
        #[arg(long, default_value_t = 0)]
        snapshot_every: u64,
        /// Continue from the last snapshot and append to the stream file.
        #[arg(long)]
        resume: bool,
    },
    /// Run a property suite.
    Verify {
        #[arg(value_name = "SUITE", help = format!("one of: {}", verify::SUITES.join(", ")))]
        suite: String,
    },
    /// Per-chunk latency and cache footprint as CSV.
    Bench {
        config: PathBuf,
        #[arg(long, default_value_t = 256)]
        chunks: u64,
    },
    Config {
        #[command(subcommand)]
        action: ConfigCmd,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print every key with its default value.
    Dump,
}

#[derive(Debug)]
struct MissingNets(PathBuf);

impl fmt::Display for MissingNets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "trained nets not found: {} (run `ew train` first)", self.0.display())
    }
}

impl std::error::Error for MissingNets {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<MissingNets>() {
            return 3;
        }
        if let Some(ew_core::Error::Config(_)) = cause.downcast_ref::<ew_core::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { config, drift } => train(&config, drift)?,
        Cmd::Rollout {
            config,
            latents,
            infinite,
            snapshot_every,
            resume,
        } => {
            let target = match (latents, infinite) {
                (Some(n), false) => StreamTarget::Latents(n),
                _ => StreamTarget::Infinite,
            };
            rollout(&config, target, snapshot_every, resume)?
        }
        Cmd::Verify { suite } => return verify_suite(&suite),
        Cmd::Bench { config, chunks } => bench(&config, chunks)?,
        Cmd::Config { action: ConfigCmd::Dump } => print!("{}", RunConfig::dump_defaults()),
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    fs::create_dir_all(&cfg.paths.out_dir)
        .with_context(|| format!("creating output directory {}", cfg.paths.out_dir.display()))?;
    Ok(cfg)
}

/// JSON object of `value` with the config hash added.
fn stamped<T: Serialize>(hash: &str, value: &T) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(m) => {
            m.insert("config_hash".into(), hash.into());
        }
        None => bail!("expected a JSON object"),
    }
    Ok(v)
}

fn train(path: &Path, drift: bool) -> Result<()> {
    let cfg = load_config(path)?;
    let hash = cfg.hash_hex();
    let tc = cfg.train_config();
    let mut trainer = Trainer::new(tc, cfg.model)?;
    trainer.nets.generator.set_position_policy(cfg.positions);

    let log_path = cfg.paths.train_log();
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let result = trainer.run(|r| {
        let line = serde_json::to_string(&stamped(&hash, r).map_err(|e| ew_core::Error::Format(e.to_string()))?)
            .map_err(|e| ew_core::Error::Format(e.to_string()))?;
        writeln!(log, "{line}")?;
        Ok(())
    });
    log.flush()?;
    let reports = result.context("training aborted")?;
    format::save_nets(&trainer.nets, &cfg.paths.generator(), &cfg.paths.fusion(), &cfg.model_hash())?;
    if let Some(last) = reports.last() {
        println!(
            "trained {} steps: total {:.6}, gen {:.6}, l3d {:.6}; nets in {}",
            reports.len(),
            last.total,
            last.gen_loss,
            last.l3d,
            cfg.paths.out_dir.display()
        );
    }

    if drift {
        let flipped = TrainConfig {
            detach_conditioning: !tc.detach_conditioning,
            ..tc
        };
        let rep = drift_experiment((&tc, &flipped), &cfg.model, &cfg.drift)?;
        let mut out = BufWriter::new(File::create(cfg.paths.drift_log())?);
        for k in 0..rep.reference_variance.len() {
            let row = serde_json::json!({
                "config_hash": hash,
                "chunk": k,
                "reference_variance": rep.reference_variance[k],
                "detached": rep.detached.divergence[k],
                "baseline": rep.baseline.divergence[k],
            });
            writeln!(out, "{row}")?;
        }
        out.flush()?;
        let last = rep.reference_variance.len().saturating_sub(1);
        println!(
            "drift at chunk {last}: detached {:.4}, baseline {:.4}, reference {:.4}",
            rep.detached.divergence[last], rep.baseline.divergence[last], rep.reference_variance[last]
        );
    }
    Ok(())
}

fn load_trained(cfg: &RunConfig) -> Result<Nets> {
    for p in [cfg.paths.generator(), cfg.paths.fusion()] {
        if !p.exists() {
            return Err(MissingNets(p).into());
        }
    }
    let mut nets = format::load_nets(cfg.model, &cfg.paths.generator(), &cfg.paths.fusion(), &cfg.model_hash())?;
    nets.generator.set_position_policy(cfg.positions);
    Ok(nets)
}

/// Appends records to the stream file and snapshots every `every` chunks.
struct SnapshotSink {
    file: StreamFileSink<BufWriter<File>>,
    every: u64,
    path: PathBuf,
    hash: [u8; 32],
}

impl StreamSink for SnapshotSink {
    fn emit(&mut self, record: StreamRecord) -> ew_core::Result<()> {
        self.file.emit(record)
    }

    fn chunk_done(&mut self, state: &RolloutState) -> ew_core::Result<()> {
        if self.every > 0 && state.session.chunks_generated.is_multiple_of(self.every) {
            // Records on disk must never lag the snapshot.
            self.file.flush()?;
            format::save_snapshot(&self.path, state, &self.hash)?;
        }
        Ok(())
    }
}

/// Opens the stream file for appending at the position matching `state`,
/// dropping records written after the last snapshot.
fn reopen_stream(path: &Path, cfg: &RunConfig, state: &RolloutState) -> Result<File> {
    let mut f = OpenOptions::new()
        .read(true)
        .write(true)
        .open(path)
        .with_context(|| format!("opening stream file {}", path.display()))?;
    let mut head = [0u8; format::STREAM_HEADER_BYTES as usize];
    BufReader::new(&mut f)
        .read_exact(&mut head)
        .with_context(|| format!("reading header of {}", path.display()))?;
    let (hash, _) = format::read_stream_file(&head[..])?;
    if hash != cfg.hash() {
        bail!(ew_core::Error::Config(format!("{} was written under a different config", path.display())));
    }
    let len = format::STREAM_HEADER_BYTES + state.latents_emitted * format::record_bytes(cfg.model.generator.latent);
    if f.metadata()?.len() < len {
        bail!("{} is shorter than the snapshot implies", path.display());
    }
    f.set_len(len)?;
    f.seek(SeekFrom::End(0))?;
    Ok(f)
}

fn rollout(path: &Path, target: StreamTarget, snapshot_every: u64, resume: bool) -> Result<()> {
    let cfg = load_config(path)?;
    let nets = load_trained(&cfg)?;
    let ctx = nets.fusion_context();
    let hash = cfg.hash();
    let stream_path = cfg.paths.stream();

    let (mut state, file) = if resume {
        let (h, state) = format::load_snapshot(&cfg.paths.state())
            .with_context(|| format!("loading snapshot {}", cfg.paths.state().display()))?;
        if h != hash {
            bail!(ew_core::Error::Config("snapshot was written under a different config".into()));
        }
        let f = reopen_stream(&stream_path, &cfg, &state)?;
        (state, f)
    } else {
        let state = RolloutState::new(&nets.generator, &ctx, cfg.schedule, cfg.seed)?;
        let mut f = File::create(&stream_path).with_context(|| format!("creating {}", stream_path.display()))?;
        format::write_stream_header(&mut f, &hash)?;
        (state, f)
    };

    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing SIGINT handler")?;

    let mut sink = SnapshotSink {
        file: StreamFileSink::new(BufWriter::new(file)),
        every: snapshot_every,
        path: cfg.paths.state(),
        hash,
    };
    let report = stream(&nets.generator, &ctx, &mut state, target, &stop, &mut sink)?;
    sink.file.flush()?;
    format::save_snapshot(&cfg.paths.state(), &state, &hash)?;

    let report_path = cfg.paths.stream_report();
    fs::write(&report_path, serde_json::to_string_pretty(&stamped(&cfg.hash_hex(), &report)?)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "{} {} latents ({} frames) to {}; max live tokens {}",
        if report.stopped { "stopped after" } else { "emitted" },
        report.latents_emitted,
        report.frames_emitted,
        stream_path.display(),
        report.max_live_tokens
    );
    Ok(())
}

fn verify_suite(suite: &str) -> Result<ExitCode> {
    let checks = verify::run_suite(suite)?;
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        if c.detail.is_empty() {
            println!("{tag} {}", c.name);
        } else {
            println!("{tag} {} ({})", c.name, c.detail);
        }
        failed += usize::from(!c.passed);
    }
    println!("{suite}: {}/{} passed", checks.len() - failed, checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// Discards records; bench measures generation only.
struct NullSink;

impl StreamSink for NullSink {
    fn emit(&mut self, _record: StreamRecord) -> ew_core::Result<()> {
        Ok(())
    }
}

fn bench(path: &Path, chunks: u64) -> Result<()> {
    let cfg = load_config(path)?;
    let nets = match load_trained(&cfg) {
        Ok(n) => n,
        Err(e) if e.is::<MissingNets>() => {
            eprintln!("{e}; benchmarking randomly initialized nets");
            let mut n = Nets::new(cfg.model, cfg.seed)?;
            n.generator.set_position_policy(cfg.positions);
            n
        }
        Err(e) => return Err(e),
    };
    let ctx = nets.fusion_context();
    let mut state = RolloutState::new(&nets.generator, &ctx, cfg.schedule, cfg.seed)?;
    let target = StreamTarget::Latents(chunks * ew_core::generator::CHUNK_LATENTS as u64);
    let report = stream(&nets.generator, &ctx, &mut state, target, &AtomicBool::new(false), &mut NullSink)?;

    let out_path = cfg.paths.bench();
    let mut out = BufWriter::new(File::create(&out_path).with_context(|| format!("creating {}", out_path.display()))?);
    writeln!(out, "# config_hash={}", cfg.hash_hex())?;
    writeln!(out, "chunk,phase,wall_ms,cache_bytes,live_tokens,stored_tokens,drift")?;
    for c in &report.chunks {
        writeln!(
            out,
            "{},{:?},{:.4},{},{},{},{:.6}",
            c.chunk, c.phase, c.wall_ms, c.cache_bytes, c.live_tokens, c.stored_tokens, c.drift
        )?;
    }
    if let Some(s) = report.summary() {
        writeln!(out, "# summary: median_ms,p95_ms,tail_p95_over_head_median,cache_bytes_cv,max_live_tokens")?;
        writeln!(
            out,
            "summary,{:.4},{:.4},{:.4},{:.6},{}",
            s.median_ms, s.p95_ms, s.tail_ratio, s.cache_bytes_cv, s.max_live_tokens
        )?;
        println!(
            "{} chunks: median {:.3} ms, p95 {:.3} ms, tail/head {:.3}, cache cv {:.2e}",
            s.chunks, s.median_ms, s.p95_ms, s.tail_ratio, s.cache_bytes_cv
        );
    }
    out.flush()?;
    Ok(())
}
