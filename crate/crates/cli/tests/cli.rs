use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;
use std::time::Duration;

use ew_core::config::RunConfig;
use ew_core::format;

fn ew() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ew"));
    c.env_remove("EW_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    ew().args(args).output().expect("spawn ew")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small model and a short run, written into `dir`.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let out = dir.join("out");
    let text = format!(
        r#"seed = 3
{extra}
[train]
steps = 4

[model.generator]
latent = {{ c = 2, h = 4, w = 4 }}
patch = 2
model_dim = 16
n_heads = 2
mlp_hidden = 16
denoise_steps = 2
cond_dim = 4

[model.fusion]
feature_channels = 3
text_tokens = 2

[paths]
out_dir = "{}"
"#,
        out.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn load(cfg: &Path) -> RunConfig {
    RunConfig::from_toml(&fs::read_to_string(cfg).unwrap()).unwrap()
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir, "");
    let o = run(&["train", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    cfg
}

#[test]
fn config_dump_round_trips() {
    let o = run(&["config", "dump"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}

#[test]
fn missing_config_is_usage_error_naming_path() {
    let o = run(&["train", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "bogus = 1");
    assert_eq!(code(&run(&["train", p(&cfg)])), 2);
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&run(&["rollout", "x.toml"])), 2);
    assert_eq!(code(&run(&["rollout", "x.toml", "--latents", "3", "--infinite"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn verify_suites_and_unknown_suite() {
    let o = run(&["verify", "schedule"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().any(|l| l.starts_with("PASS")));
    assert!(!out.contains("FAIL"));
    assert_eq!(code(&run(&["verify", "cache"])), 0);
    let o = run(&["verify", "bogus"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn train_is_deterministic_and_stamped() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (trained(a.path()), trained(b.path()));
    let cfg = load(&ca);
    for f in ["generator.ewnt", "fusion.ewfu"] {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }
    let log = fs::read_to_string(cfg.paths.train_log()).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    // Both configs differ only in out_dir, so compare against each own hash.
    assert_eq!(lines[0]["config_hash"], cfg.hash_hex());
    assert_ne!(load(&cb).hash_hex(), cfg.hash_hex());
    assert_eq!(lines[3]["step"], 3);
    assert_eq!(lines[0]["lambda_3d"], 0.1);
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = ew().env("EW_SEED", "11").args(["train", p(&cfg)]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut want = load(&cfg);
    want.seed = 11;
    let first = fs::read_to_string(want.paths.train_log()).unwrap();
    let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(v["config_hash"], want.hash_hex());

    let o = ew().env("EW_SEED", "abc").args(["train", p(&cfg)]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_training_aborts_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("steps = 4", "steps = 4\nlr = 1e300");
    fs::write(&cfg, text).unwrap();
    let o = run(&["train", p(&cfg)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn rollout_without_nets_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = run(&["rollout", p(&cfg), "--latents", "3"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("generator.ewnt"));
}

#[test]
fn rollout_writes_exact_record_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let o = run(&["rollout", p(&cfg), "--latents", "42"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rc = load(&cfg);
    let (hash, recs) = format::read_stream_file(File::open(rc.paths.stream()).unwrap()).unwrap();
    assert_eq!(hash, rc.hash());
    assert_eq!(recs.len(), 42);
    assert!(recs.iter().enumerate().all(|(i, r)| r.latent == i as u64 && r.chunk == i as u64 / 3));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(rc.paths.stream_report()).unwrap()).unwrap();
    assert_eq!(report["latents_emitted"], 42);
    assert_eq!(report["frames_emitted"], 165);
    assert_eq!(report["config_hash"], rc.hash_hex());
}

#[test]
fn resumed_rollout_equals_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let rc = load(&cfg);
    assert_eq!(code(&run(&["rollout", p(&cfg), "--latents", "50"])), 0);
    let whole = fs::read(rc.paths.stream()).unwrap();

    assert_eq!(code(&run(&["rollout", p(&cfg), "--latents", "22", "--snapshot-every", "2"])), 0);
    let o = run(&["rollout", p(&cfg), "--latents", "50", "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(rc.paths.stream()).unwrap(), whole);
}

#[test]
fn resume_discards_records_past_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let rc = load(&cfg);
    assert_eq!(code(&run(&["rollout", p(&cfg), "--latents", "30"])), 0);
    let whole = fs::read(rc.paths.stream()).unwrap();

    // A snapshot at 12 latents followed by a crash after 21 were written.
    assert_eq!(code(&run(&["rollout", p(&cfg), "--latents", "12"])), 0);
    let snap = fs::read(rc.paths.state()).unwrap();
    assert_eq!(code(&run(&["rollout", p(&cfg), "--latents", "21"])), 0);
    fs::write(rc.paths.state(), snap).unwrap();

    assert_eq!(code(&run(&["rollout", p(&cfg), "--latents", "30", "--resume"])), 0);
    assert_eq!(fs::read(rc.paths.stream()).unwrap(), whole);
}

#[test]
fn sigint_halts_at_chunk_boundary_with_valid_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let rc = load(&cfg);
    let child = ew()
        .args(["rollout", p(&cfg), "--infinite", "--snapshot-every", "7"])
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_secs(2));
    // SAFETY: signalling a child we spawned and have not yet reaped.
    let rc_kill = unsafe { libc::kill(child.id() as libc::pid_t, libc::SIGINT) };
    assert_eq!(rc_kill, 0);
    let o = child.wait_with_output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let (hash, state) = format::load_snapshot(&rc.paths.state()).unwrap();
    assert_eq!(hash, rc.hash());
    let (_, recs) = format::read_stream_file(File::open(rc.paths.stream()).unwrap()).unwrap();
    assert!(!recs.is_empty());
    assert_eq!(recs.len() as u64, state.latents_emitted);
    assert_eq!(state.latents_generated(), state.latents_emitted);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(rc.paths.stream_report()).unwrap()).unwrap();
    assert_eq!(report["stopped"], true);

    // The snapshot resumes.
    let target = (state.latents_emitted + 6).to_string();
    assert_eq!(code(&run(&["rollout", p(&cfg), "--latents", &target, "--resume"])), 0);
}

#[test]
fn bench_writes_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = run(&["bench", p(&cfg), "--chunks", "256"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rc = load(&cfg);
    let csv = fs::read_to_string(rc.paths.bench()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), format!("# config_hash={}", rc.hash_hex()));
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(rows[0].starts_with("chunk,"));
    assert_eq!(rows.len(), 1 + 256 + 1);
    let summary: Vec<&str> = rows[257].split(',').collect();
    assert_eq!(summary[0], "summary");
    let cv: f64 = summary[4].parse().unwrap();
    assert!(cv < 0.01);
}
