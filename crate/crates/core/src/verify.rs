//! Property suites run by `ew verify`.

use std::sync::atomic::AtomicBool;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attend, AttentionConfig, QueryBlock};
use crate::cache::{CacheGeometry, KVCache};
use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_optional, Extractor3D, Feature3D, FusionConfig, FusionNet, Provenance, TextEmbedding};
use crate::generator::{denoise_chunk, CacheCommit, GenSession, GeneratorConfig, GeneratorNet, LatentChunk, LatentDims};
use crate::gradcheck::{self, GradCheckReport};
use crate::losses::{
    dmd_generator_grad, dmd_loss, fit_toy_1d, loss_3d, DiffusionSchedule, GaussianScore, ScorePair, Toy1dConfig,
};
use crate::model::{FusionSetup, ModelConfig, Nets};
use crate::optim::Adam;
use crate::rope::{RotaryEmbedding, DEFAULT_BASE};
use crate::streamer::{frames_for_latents, next_phase, RolloutState, ScheduleConfig};
use crate::tensor::{no_grad, Tensor};

pub const SUITES: [&str; 6] = ["grads", "cache", "rope", "schedule", "dmd", "fusion"];

pub const OP_TOL: f64 = 1e-5;
pub const NET_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn grad(name: &str, rep: Result<GradCheckReport>, tol: f64) -> Self {
        match rep {
            Ok(r) => Self::new(name, r.passes(tol), format!("max rel err {:.2e} over {}", r.max_rel_err, r.checked)),
            Err(e) => Self::new(name, false, e.to_string()),
        }
    }
}

pub fn run_suite(name: &str) -> Result<Vec<Check>> {
    match name {
        "grads" => grads(),
        "cache" => cache(),
        "rope" => rope(),
        "schedule" => schedule(),
        "dmd" => dmd(),
        "fusion" => fusion(),
        other => Err(Error::Config(format!(
            "unknown suite {other:?}; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

fn randv(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    (Tensor::randn(shape, rng).to_vec(), shape.to_vec())
}

fn gc(inputs: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&[Tensor]) -> Result<Tensor>) -> Result<GradCheckReport> {
    gradcheck::check(inputs, f, gradcheck::DEFAULT_STEP, None)
}

fn grads() -> Result<Vec<Check>> {
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let r = &mut r;
    let mut out = vec![
        Check::grad("matmul 5x4·4x3", gc(&[randv(r, &[5, 4]), randv(r, &[4, 3])], |p| p[0].matmul(&p[1])), OP_TOL),
        Check::grad("softmax 3x4", gc(&[randv(r, &[3, 4])], |p| p[0].softmax(1)?.mul(&p[0])), OP_TOL),
        Check::grad(
            "cosine length 16",
            gc(&[randv(r, &[16]), randv(r, &[16])], |p| p[0].cosine_similarity(&p[1])),
            OP_TOL,
        ),
        Check::grad("add", gc(&[randv(r, &[3, 3]), randv(r, &[3, 3])], |p| p[0].add(&p[1])?.mul(&p[0])), OP_TOL),
        Check::grad("scale", gc(&[randv(r, &[4])], |p| p[0].scale(-2.5).mul(&p[0])), OP_TOL),
        Check::grad("mul", gc(&[randv(r, &[2, 5]), randv(r, &[2, 5])], |p| p[0].mul(&p[1])), OP_TOL),
        Check::grad("sum/mean", gc(&[randv(r, &[3, 4])], |p| p[0].mul(&p[0])?.mean().add(&p[0].sum())), OP_TOL),
        Check::grad("silu", gc(&[randv(r, &[6])], |p| Ok(p[0].silu())), OP_TOL),
        Check::grad(
            "layer norm",
            gc(&[randv(r, &[3, 6]), randv(r, &[6]), randv(r, &[6])], |p| {
                p[0].layer_norm(&p[1], &p[2])?.mul(&p[0])
            }),
            OP_TOL,
        ),
        Check::grad(
            "conv 1x1",
            gc(&[randv(r, &[2, 3, 4, 4]), randv(r, &[5, 3, 1, 1]), randv(r, &[5])], |p| p[0].conv2d(&p[1], &p[2])),
            OP_TOL,
        ),
        Check::grad(
            "conv 3x3",
            gc(&[randv(r, &[1, 2, 5, 4]), randv(r, &[3, 2, 3, 3]), randv(r, &[3])], |p| {
                let y = p[0].conv2d(&p[1], &p[2])?;
                y.mul(&y)
            }),
            OP_TOL,
        ),
        Check::grad(
            "multi-head attention",
            gc(&[randv(r, &[3, 8]), randv(r, &[5, 8]), randv(r, &[5, 8])], |p| {
                let y = p[0].multi_head_attention(&p[1], &p[2], 2, None)?.0;
                y.mul(&y)
            }),
            OP_TOL,
        ),
        Check::grad(
            "concat tokens",
            gc(&[randv(r, &[2, 3]), randv(r, &[4, 3])], |p| {
                let c = Tensor::concat(&[p[0].clone(), p[1].clone()], 0)?;
                c.mul(&c)
            }),
            OP_TOL,
        ),
    ];
    let a = randv(r, &[4, 2, 2, 3]);
    let b = randv(r, &[4, 2, 2, 3]);
    let feat = |t: &Tensor| Feature3D {
        data: t.clone(),
        version: "verify",
    };
    out.push(Check::grad(
        "loss_3d 4x2x2x3",
        gc(&[a, b], |p| loss_3d(&feat(&p[0]), &feat(&p[1]))),
        OP_TOL,
    ));
    out.push(dmd_path_check(r));
    out.push(generator_check()?);
    Ok(out)
}

/// Surrogate gradient against central differences of `⟨sg(g), x(θ)⟩/N`.
fn dmd_path_check(r: &mut ChaCha8Rng) -> Check {
    let z = Tensor::randn(&[2, 6], r);
    let g = Tensor::randn(&[3, 6], r);
    let w0 = Tensor::randn(&[3, 2], r).to_vec();
    let x_of = |w: &Tensor| w.matmul(&z).map(|x| x.silu());
    let result = (|| -> Result<f64> {
        let w = Tensor::param(w0.clone(), &[3, 2])?;
        dmd_loss(&x_of(&w)?, &g)?.backward();
        let analytic = w.grad_or_zeros();
        let f = |v: &[f64]| -> Result<f64> {
            no_grad(|| Ok(x_of(&Tensor::new(v.to_vec(), &[3, 2])?)?.mul(&g)?.sum().item() / 18.0))
        };
        let h = gradcheck::DEFAULT_STEP;
        let mut worst = 0.0f64;
        for i in 0..w0.len() {
            let (mut up, mut dn) = (w0.clone(), w0.clone());
            up[i] += h;
            dn[i] -= h;
            let numeric = (f(&up)? - f(&dn)?) / (2.0 * h);
            worst = worst.max(gradcheck::relative_error(analytic[i], numeric));
        }
        Ok(worst)
    })();
    match result {
        Ok(e) => Check::new("dmd path", e < OP_TOL, format!("max rel err {e:.2e}")),
        Err(e) => Check::new("dmd path", false, e.to_string()),
    }
}

fn generator_check() -> Result<Check> {
    let cfg = GeneratorConfig {
        latent: LatentDims { c: 2, h: 4, w: 4 },
        patch: 2,
        model_dim: 32,
        n_layers: 2,
        mlp_hidden: 16,
        denoise_steps: 2,
        cond_dim: 4,
        window_frames: 5,
        truncate_grad: false,
        ..GeneratorConfig::default()
    };
    let net = GeneratorNet::new(cfg, 3)?;
    let cond = crate::fusion::FusedEmbedding::text_only(&TextEmbedding::synthetic(1, 3, 4)?);
    let mut warm = GenSession::new(&net, 6)?;
    crate::generator::rollout(&net, 1, &cond, &mut warm, crate::generator::RolloutMode::Inference)?;
    let noise = LatentChunk::noise(cfg.latent, &mut ChaCha8Rng::seed_from_u64(8));
    let inputs: Vec<(Vec<f64>, Vec<usize>)> = net.params().iter().map(|(_, t)| (t.to_vec(), t.shape().to_vec())).collect();
    let rep = gradcheck::check(
        &inputs,
        |p| {
            let mut n = net.clone();
            for (dst, src) in n.params_mut().into_iter().zip(p) {
                *dst = src.clone();
            }
            let mut caches = warm.caches.clone();
            let mut r = ChaCha8Rng::seed_from_u64(1);
            Ok(denoise_chunk(&n, &noise, &mut caches, &cond, 2, &mut r, CacheCommit::Skip)?.frames().clone())
        },
        gradcheck::DEFAULT_STEP,
        Some(4),
    );
    Ok(Check::grad("generator 2-layer dim-32 end to end", rep, NET_TOL))
}

/// Plain-loop attention of `q` rows over the given keys with explicit
/// positions and a visibility predicate.
fn reference_attention(
    q: &[f64],
    q_pos: &[usize],
    k: &[f64],
    v: &[f64],
    k_pos: &[usize],
    visible: impl Fn(usize, usize) -> bool,
    n_heads: usize,
    head_dim: usize,
) -> Vec<f64> {
    let dim = n_heads * head_dim;
    let rot = |x: &[f64], p: usize| -> Vec<f64> {
        let mut y = x.to_vec();
        for h in 0..n_heads {
            for j in 0..head_dim / 2 {
                let th = DEFAULT_BASE.powf(-2.0 * j as f64 / head_dim as f64) * p as f64;
                let (a, b) = (x[h * head_dim + 2 * j], x[h * head_dim + 2 * j + 1]);
                y[h * head_dim + 2 * j] = a * th.cos() - b * th.sin();
                y[h * head_dim + 2 * j + 1] = a * th.sin() + b * th.cos();
            }
        }
        y
    };
    let nq = q_pos.len();
    let nk = k_pos.len();
    let qr: Vec<Vec<f64>> = (0..nq).map(|i| rot(&q[i * dim..(i + 1) * dim], q_pos[i])).collect();
    let kr: Vec<Vec<f64>> = (0..nk).map(|j| rot(&k[j * dim..(j + 1) * dim], k_pos[j])).collect();
    let mut out = vec![0.0; nq * dim];
    for i in 0..nq {
        for h in 0..n_heads {
            let hs = h * head_dim..(h + 1) * head_dim;
            let logits: Vec<Option<f64>> = (0..nk)
                .map(|j| {
                    visible(i, j).then(|| {
                        qr[i][hs.clone()].iter().zip(&kr[j][hs.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (head_dim as f64).sqrt()
                    })
                })
                .collect();
            let m = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - m).exp())).collect();
            let z: f64 = w.iter().sum();
            for j in 0..nk {
                for c in hs.clone() {
                    out[i * dim + c] += w[j] / z * v[j * dim + c];
                }
            }
        }
    }
    out
}

/// One random chunked-vs-full comparison within capacity. Returns the max
/// absolute difference.
pub fn cache_equivalence_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n_heads = [1, 2, 4][rng.random_range(0..3)];
    let head_dim = [2, 4, 8][rng.random_range(0..3)];
    let tpf = rng.random_range(1..=3);
    let frames = rng.random_range(2..=8);
    let dim = n_heads * head_dim;
    let cfg = AttentionConfig::new(n_heads, dim, tpf, tpf, (frames - 1) * tpf, DEFAULT_BASE)?;
    let rope = cfg.rope()?;
    let n = frames * tpf;
    let q = Tensor::randn(&[n, dim], rng);
    let k = Tensor::randn(&[n, dim], rng);
    let v = Tensor::randn(&[n, dim], rng);
    let pos: Vec<usize> = (0..n).collect();
    let full = reference_attention(
        q.data(),
        &pos,
        k.data(),
        v.data(),
        &pos,
        |i, j| j / tpf <= i / tpf,
        n_heads,
        head_dim,
    );
    let mut cache = KVCache::new(CacheGeometry {
        dim,
        tokens_per_frame: tpf,
        sink_tokens: cfg.sink_tokens,
        window_tokens: cfg.window_tokens,
    })?;
    let mut worst = 0.0f64;
    let mut f = 0;
    while f < frames {
        let len = rng.random_range(1..=3).min(frames - f);
        let (s, t) = (f * tpf, len * tpf);
        let block = QueryBlock {
            q: q.slice_rows(s, t)?,
            own: Some((k.slice_rows(s, t)?, v.slice_rows(s, t)?)),
        };
        let got = attend(&block, &cache, &cfg, &rope)?;
        for (a, b) in got.data().iter().zip(&full[s * dim..(s + t) * dim]) {
            worst = worst.max((a - b).abs());
        }
        cache.append_frames(&k.slice_rows(s, t)?, &v.slice_rows(s, t)?)?;
        f += len;
    }
    Ok(worst)
}

/// Attention after eviction against a reference over the live tokens only,
/// with compact positions.
pub fn eviction_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n_heads, head_dim, tpf) = (2, 4, 2);
    let dim = n_heads * head_dim;
    let window_frames = rng.random_range(1..=3);
    let cfg = AttentionConfig::new(n_heads, dim, tpf, tpf, window_frames * tpf, DEFAULT_BASE)?;
    let rope = cfg.rope()?;
    let history = 1 + window_frames + rng.random_range(1..=4);
    let mut cache = KVCache::new(CacheGeometry {
        dim,
        tokens_per_frame: tpf,
        sink_tokens: tpf,
        window_tokens: window_frames * tpf,
    })?;
    let hk = Tensor::randn(&[history * tpf, dim], rng);
    let hv = Tensor::randn(&[history * tpf, dim], rng);
    cache.append_frames(&hk, &hv)?;
    let q = Tensor::randn(&[tpf, dim], rng);
    let got = attend(&QueryBlock { q: q.clone(), own: None }, &cache, &cfg, &rope)?;

    let mut live = (0..tpf).collect::<Vec<_>>();
    live.extend((history - window_frames) * tpf..history * tpf);
    let pick = |t: &Tensor| live.iter().flat_map(|&i| t.data()[i * dim..(i + 1) * dim].to_vec()).collect::<Vec<_>>();
    let k_pos: Vec<usize> = (0..live.len()).collect();
    let q_pos: Vec<usize> = (live.len()..live.len() + tpf).collect();
    let want = reference_attention(q.data(), &q_pos, &pick(&hk), &pick(&hv), &k_pos, |_, _| true, n_heads, head_dim);
    Ok(got.data().iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}

fn cache() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        worst = worst.max(cache_equivalence_trial(&mut rng)?);
    }
    let mut evict = 0.0f64;
    for _ in 0..50 {
        evict = evict.max(eviction_trial(&mut rng)?);
    }

    let geom = CacheGeometry {
        dim: 4,
        tokens_per_frame: 2,
        sink_tokens: 2,
        window_tokens: 6,
    };
    let mut c = KVCache::new(geom)?;
    let mut bounded = true;
    let mut sink_kept = true;
    let kv = Tensor::randn(&[2, 4], &mut rng);
    let mut bytes = Vec::new();
    for _ in 0..1000 {
        c.append_frames(&kv, &kv)?;
        bounded &= c.live_tokens() <= geom.sink_tokens + geom.window_tokens;
        sink_kept &= c.sink_len() == geom.sink_tokens;
        bytes.push(c.allocated_bytes());
    }
    let steady = bytes[10..].iter().all(|&b| b == bytes[10]);
    Ok(vec![
        Check::new("chunked attention equals full recomputation (100 configs)", worst < 1e-9, format!("max abs diff {worst:.2e}")),
        Check::new("post-eviction output depends only on live tokens", evict < 1e-9, format!("max abs diff {evict:.2e}")),
        Check::new("live tokens bounded by sink + window over 1000 appends", bounded, ""),
        Check::new("sink frame never evicted", sink_kept, ""),
        Check::new("cache footprint constant after warm-up", steady, format!("{} bytes", bytes[10])),
    ])
}

fn rope() -> Result<Vec<Check>> {
    let rope = RotaryEmbedding::new(8, DEFAULT_BASE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let mut rel = 0.0f64;
    let mut norm = 0.0f64;
    let mut ident = true;
    for _ in 0..50 {
        let q = Tensor::randn(&[1, 8], &mut rng);
        let k = Tensor::randn(&[1, 8], &mut rng);
        let (m, n) = (rng.random_range(0..500), rng.random_range(0..500));
        let base = dot(&rope.rotate(&q, &[m])?, &rope.rotate(&k, &[n])?);
        for d in [1, 7, 100] {
            rel = rel.max((base - dot(&rope.rotate(&q, &[m + d])?, &rope.rotate(&k, &[n + d])?)).abs());
        }
        let y = rope.rotate(&q, &[m])?;
        norm = norm.max((dot(&y, &y).sqrt() - dot(&q, &q).sqrt()).abs());
        ident &= rope.rotate(&q, &[0])?.to_vec() == q.to_vec();
    }
    Ok(vec![
        Check::new("logits invariant under offsets 1, 7, 100", rel < 1e-9, format!("max diff {rel:.2e}")),
        Check::new("position 0 is the identity", ident, ""),
        Check::new("rotation preserves norm", norm < 1e-12, format!("max diff {norm:.2e}")),
        Check::new("odd head_dim rejected", RotaryEmbedding::new(7, DEFAULT_BASE).is_err(), ""),
    ])
}

fn schedule() -> Result<Vec<Check>> {
    let model = ModelConfig {
        generator: GeneratorConfig {
            latent: LatentDims { c: 1, h: 2, w: 2 },
            patch: 2,
            model_dim: 4,
            n_heads: 1,
            n_layers: 1,
            mlp_hidden: 4,
            cond_dim: 2,
            ..GeneratorConfig::default()
        },
        fusion: FusionSetup {
            feature_channels: 1,
            text_tokens: 1,
            ..FusionSetup::default()
        },
    };
    let nets = Nets::new(model, 0)?;
    let mut state = RolloutState::new(&nets.generator, &nets.fusion_context(), ScheduleConfig::default(), 0)?;
    let phases: Vec<_> = (0..6).map(|_| next_phase(&mut state)).collect();
    let alternates = phases.iter().enumerate().all(|(i, p)| {
        let want = if i % 2 == 0 { (18, 3) } else { (3, 18) };
        (p.context_latents, p.generate_latents) == want
    });
    let law = [(1, 1), (3, 9), (21, 81)]
        .iter()
        .all(|&(d, f)| frames_for_latents(d).ok() == Some(f));
    Ok(vec![
        Check::new("phases alternate long/short with budgets (18,3)/(3,18)", alternates, ""),
        Check::new("decoded frames 4(d-1)+1 for d = 1, 3, 21", law, ""),
        Check::new("zero latents rejected", frames_for_latents(0).is_err(), ""),
        Check::new("long window 17 frames, short window 2 frames", phases[0].window_frames() == 17 && phases[1].window_frames() == 2, ""),
    ])
}

fn dmd() -> Result<Vec<Check>> {
    let s = DiffusionSchedule::linear_vp(8)?;
    let pair = ScorePair::matched(GaussianScore::ar1(4, 0.9));
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for i in 0..s.len() {
        let x = Tensor::randn(&[4, 16], &mut rng);
        let g = dmd_generator_grad(&x, &pair, &s, i, &Tensor::randn(&[4, 16], &mut rng))?;
        worst = worst.max(g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let toy = fit_toy_1d(&Toy1dConfig::default())?;
    Ok(vec![
        Check::new("matched scores give zero gradient", worst <= 1e-12, format!("max |g| {worst:.2e}")),
        Check::new(
            "1-D toy converges to N(3,1)",
            toy.final_kl() < 0.01 && (toy.mean - 3.0).abs() < 0.1 && (toy.var - 1.0).abs() < 0.15,
            format!("KL {:.2e}, mean {:.4}, var {:.4}", toy.final_kl(), toy.mean, toy.var),
        ),
    ])
}

fn fusion() -> Result<Vec<Check>> {
    let dims = LatentDims { c: 2, h: 4, w: 4 };
    let ex = Extractor3D::new(dims, 3)?;
    let cfg = FusionConfig {
        feature_channels: 3,
        feature_frames: 9,
        text_tokens: 4,
        text_dim: 6,
    };
    let mut net = FusionNet::new(cfg, 1)?;
    let text = TextEmbedding::synthetic(2, 4, 6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let latent = crate::generator::VideoLatent::new(Tensor::randn(&[3, dims.frame_len()], &mut rng), dims)?;
    let f = ex.extract(&latent)?;
    let same = ex.extract(&latent)?.data.to_vec() == f.data.to_vec();
    let fresh = fuse(&net, &text, &f)?;
    let identity = fresh.tokens.to_vec() == text.tokens().to_vec();
    let bypass = fuse_optional(&net, &text, None)?;
    let up = Tensor::randn(&[4, 6], &mut rng);
    fresh.tokens.mul(&up)?.sum().backward();
    let mut opt = Adam::new(1e-2);
    let mut params: Vec<&mut Tensor> = net.params_mut().into_iter().map(|(_, t)| t).collect();
    opt.step(&mut params)?;
    let trained = fuse(&net, &text, &f)?;
    Ok(vec![
        Check::new("extractor deterministic", same, ""),
        Check::new("extracted temporal extent is 9 for 3 latents", f.frames() == 9, ""),
        Check::new("fresh fusion is the exact identity", identity && fresh.provenance == Provenance::Fused, ""),
        Check::new(
            "absent feature bypasses fusion",
            bypass.provenance == Provenance::TextOnly && bypass.tokens.to_vec() == text.tokens().to_vec(),
            "",
        ),
        Check::new("one update makes fusion non-identity", trained.tokens.to_vec() != text.tokens().to_vec(), ""),
        Check::new("extractor weights hold no gradient", ex.weights().iter().all(|w| w.grad().is_none()), ""),
    ])
}

/// Used by the schedule suite and tests: a tiny stream to check accounting.
pub fn stream_accounting(latents: u64) -> Result<(usize, usize)> {
    let nets = Nets::new(
        ModelConfig {
            generator: GeneratorConfig {
                latent: LatentDims { c: 1, h: 2, w: 2 },
                patch: 2,
                model_dim: 4,
                n_heads: 1,
                n_layers: 1,
                mlp_hidden: 4,
                cond_dim: 2,
                denoise_steps: 1,
                ..GeneratorConfig::default()
            },
            fusion: FusionSetup {
                feature_channels: 1,
                text_tokens: 1,
                ..FusionSetup::default()
            },
        },
        0,
    )?;
    let ctx = nets.fusion_context();
    let mut state = RolloutState::new(&nets.generator, &ctx, ScheduleConfig::default(), 0)?;
    let mut out = Vec::new();
    let rep = crate::streamer::stream(
        &nets.generator,
        &ctx,
        &mut state,
        crate::streamer::StreamTarget::Latents(latents),
        &AtomicBool::new(false),
        &mut out,
    )?;
    Ok((out.len(), rep.frames_emitted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for s in SUITES {
            for c in run_suite(s).unwrap() {
                assert!(c.passed, "{s}: {} ({})", c.name, c.detail);
            }
        }
    }

    #[test]
    fn unknown_suite_is_config_error() {
        assert!(matches!(run_suite("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn accounting_matches_frame_law() {
        assert_eq!(stream_accounting(42).unwrap(), (42, 165));
    }
}
