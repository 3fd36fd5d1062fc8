//! Training objectives.
//!
//! The generator loss follows distribution matching: both the supervision
//! distribution and the generator's own output distribution are noised by a
//! variance-preserving forward process, and the generator is pushed along the
//! difference of their scores. At desk scale both scores are Gaussian: the
//! real one is analytic, the fake one is refit in closed form to the current
//! generator samples.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Feature3D;
use crate::optim::Adam;
use crate::tensor::{no_grad, Tensor};

/// Grid of noise levels with `α_t² + σ_t² = 1`, `σ_t = t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    t: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// `points` evenly spaced levels `t_i = i/(points−1)` on `[0, 1]`.
    pub fn linear_vp(points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::Config(format!("a schedule needs at least 2 points, got {points}")));
        }
        let t: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
        let alpha = t.iter().map(|&t| (1.0 - t * t).max(0.0).sqrt()).collect();
        let sigma = t.clone();
        Ok(Self { t, alpha, sigma })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn check(&self, index: usize) -> Result<()> {
        if index >= self.t.len() {
            return Err(Error::Schedule {
                index,
                len: self.t.len(),
            });
        }
        Ok(())
    }

    pub fn t(&self, index: usize) -> Result<f64> {
        self.check(index)?;
        Ok(self.t[index])
    }

    pub fn alpha(&self, index: usize) -> Result<f64> {
        self.check(index)?;
        Ok(self.alpha[index])
    }

    pub fn sigma(&self, index: usize) -> Result<f64> {
        self.check(index)?;
        Ok(self.sigma[index])
    }

    /// `x_t = α_t·x0 + σ_t·noise`.
    pub fn forward_diffuse(&self, x0: &Tensor, index: usize, noise: &Tensor) -> Result<Tensor> {
        self.check(index)?;
        x0.scale(self.alpha[index]).add(&noise.scale(self.sigma[index]))
    }
}

pub fn forward_diffuse(schedule: &DiffusionSchedule, x0: &Tensor, t_index: usize, noise: &Tensor) -> Result<Tensor> {
    schedule.forward_diffuse(x0, t_index, noise)
}

/// Gaussian over the rows of `[n × cols]` data, columns being independent
/// draws: `x ~ N(mean·1ᵀ, cov)` column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianScore {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape(format!(
                "covariance {}×{} does not match mean of length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Zero-mean stationary AR(1) with unit marginal variance:
    /// `cov[i][j] = a^|i−j|`.
    pub fn ar1(n: usize, a: f64) -> Self {
        let cov = DMatrix::from_fn(n, n, |i, j| a.powi((i as i32 - j as i32).abs()));
        Self {
            mean: vec![0.0; n],
            cov,
        }
    }

    /// Moment estimate from the columns of `samples`, with `ridge·I` added
    /// to the covariance.
    pub fn fit(samples: &Tensor, ridge: f64) -> Result<Self> {
        if samples.rank() != 2 || samples.shape()[1] < 2 {
            return Err(Error::Shape(format!(
                "score fit needs [n × cols≥2] samples, got {:?}",
                samples.shape()
            )));
        }
        let (n, cols) = (samples.shape()[0], samples.shape()[1]);
        let x = DMatrix::from_row_slice(n, cols, samples.data());
        let mean: Vec<f64> = (0..n).map(|i| x.row(i).mean()).collect();
        let mut centered = x;
        for i in 0..n {
            let m = mean[i];
            centered.row_mut(i).apply(|v| *v -= m);
        }
        let mut cov = &centered * centered.transpose() / cols as f64;
        for i in 0..n {
            cov[(i, i)] += ridge;
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Score of the noised distribution at `x_t`:
    /// `−(α²C + σ²I)⁻¹ (x_t − α·mean)`.
    pub fn score(&self, x_t: &Tensor, alpha: f64, sigma: f64) -> Result<Tensor> {
        let n = self.dim();
        if x_t.rank() != 2 || x_t.shape()[0] != n {
            return Err(Error::Dimension {
                op: "score",
                lhs: x_t.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let cols = x_t.shape()[1];
        let sigma_t = &self.cov * (alpha * alpha) + DMatrix::identity(n, n) * (sigma * sigma);
        let chol = sigma_t
            .cholesky()
            .ok_or_else(|| Error::Domain("noised covariance is not positive definite".into()))?;
        let mut r = DMatrix::from_row_slice(n, cols, x_t.data());
        for i in 0..n {
            let m = alpha * self.mean[i];
            r.row_mut(i).apply(|v| *v -= m);
        }
        let s = -chol.solve(&r);
        let mut out = Vec::with_capacity(n * cols);
        for i in 0..n {
            out.extend(s.row(i).iter());
        }
        Tensor::new(out, &[n, cols])
    }
}

/// Frozen real score plus a fake score that must be refit as the generator
/// moves. `generator_version` counts generator updates; a fake fit older
/// than `max_staleness` versions is refused.
#[derive(Debug, Clone)]
pub struct ScorePair {
    real: GaussianScore,
    fake: Option<GaussianScore>,
    fitted_version: Option<u64>,
    generator_version: u64,
    pub max_staleness: u64,
    pub ridge: f64,
}

impl ScorePair {
    pub fn new(real: GaussianScore, max_staleness: u64, ridge: f64) -> Self {
        Self {
            real,
            fake: None,
            fitted_version: None,
            generator_version: 0,
            max_staleness,
            ridge,
        }
    }

    /// Both scores are the same function.
    pub fn matched(real: GaussianScore) -> Self {
        let mut p = Self::new(real.clone(), 0, 0.0);
        p.fake = Some(real);
        p.fitted_version = Some(0);
        p
    }

    pub fn real(&self) -> &GaussianScore {
        &self.real
    }

    pub fn fake(&self) -> Option<&GaussianScore> {
        self.fake.as_ref()
    }

    pub fn generator_version(&self) -> u64 {
        self.generator_version
    }

    pub fn fitted_version(&self) -> Option<u64> {
        self.fitted_version
    }

    pub fn fit_fake(&mut self, samples: &Tensor) -> Result<()> {
        let fake = GaussianScore::fit(samples, self.ridge)?;
        if fake.dim() != self.real.dim() {
            return Err(Error::Shape(format!(
                "fake score fitted on {} rows, real score has {}",
                fake.dim(),
                self.real.dim()
            )));
        }
        self.fake = Some(fake);
        self.fitted_version = Some(self.generator_version);
        Ok(())
    }

    pub fn generator_stepped(&mut self) {
        self.generator_version += 1;
    }

    fn fresh_fake(&self) -> Result<&GaussianScore> {
        match (self.fitted_version, &self.fake) {
            (Some(v), Some(f)) if self.generator_version - v <= self.max_staleness => Ok(f),
            _ => Err(Error::Staleness {
                fitted: self.fitted_version,
                current: self.generator_version,
                limit: self.max_staleness,
            }),
        }
    }
}

/// Gradient of the reverse KL with respect to the generator output at one
/// noise level: `α_t·(s_fake(x_t) − s_real(x_t))`, `x_t` the forward-diffused
/// output. The result is a constant tensor.
pub fn dmd_generator_grad(
    gen_out: &Tensor,
    scores: &ScorePair,
    schedule: &DiffusionSchedule,
    t_index: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    let fake = scores.fresh_fake()?;
    let (alpha, sigma) = (schedule.alpha(t_index)?, schedule.sigma(t_index)?);
    no_grad(|| {
        let x_t = schedule.forward_diffuse(&gen_out.detach(), t_index, noise)?;
        let diff = fake.score(&x_t, alpha, sigma)?.sub(&scores.real.score(&x_t, alpha, sigma)?)?;
        Tensor::new(diff.scale(alpha).to_vec(), gen_out.shape())
    })
}

/// Uniformly weighted average of [`dmd_generator_grad`] over the interior
/// noise levels, one fresh noise draw per level.
pub fn dmd_grad_over_schedule<R: Rng + ?Sized>(
    gen_out: &Tensor,
    scores: &ScorePair,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let levels: Vec<usize> = (1..schedule.len().saturating_sub(1)).collect();
    if levels.is_empty() {
        return Err(Error::Config("schedule has no interior noise levels".into()));
    }
    let mut acc = vec![0.0; gen_out.numel()];
    for &i in &levels {
        let noise = Tensor::randn(gen_out.shape(), rng);
        let g = dmd_generator_grad(gen_out, scores, schedule, i, &noise)?;
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += v / levels.len() as f64;
        }
    }
    Tensor::new(acc, gen_out.shape())
}

/// Surrogate whose gradient with respect to `gen_out` is `grad / numel`:
/// `0.5·mean((x − sg(x − grad))²)`.
pub fn dmd_loss(gen_out: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let target = gen_out.detach().sub(grad)?.detach();
    let r = gen_out.sub(&target)?;
    Ok(r.mul(&r)?.mean().scale(0.5))
}

/// `1 − cos(pred, ref)`.
pub fn loss_3d(pred: &Feature3D, reference: &Feature3D) -> Result<Tensor> {
    if pred.data.shape() != reference.data.shape() {
        return Err(Error::Dimension {
            op: "loss_3d",
            lhs: pred.data.shape().to_vec(),
            rhs: reference.data.shape().to_vec(),
        });
    }
    Tensor::scalar(1.0).sub(&pred.data.cosine_similarity(&reference.data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_3d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_3d: 0.1 }
    }
}

impl LossWeights {
    pub fn new(lambda_3d: f64) -> Result<Self> {
        if !(lambda_3d >= 0.0) {
            return Err(Error::Config(format!("lambda_3d must be non-negative, got {lambda_3d}")));
        }
        Ok(Self { lambda_3d })
    }
}

/// `gen + λ_3D·l3d`.
pub fn total_loss(gen_term: &Tensor, l3d: &Tensor, w: &LossWeights) -> Result<Tensor> {
    gen_term.add(&l3d.scale(w.lambda_3d))
}

/// `KL(N(μq, vq) ‖ N(μp, vp))`.
pub fn gaussian_kl_1d(mu_q: f64, var_q: f64, mu_p: f64, var_p: f64) -> f64 {
    0.5 * (var_p / var_q).ln() + (var_q + (mu_q - mu_p).powi(2)) / (2.0 * var_p) - 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toy1dConfig {
    pub target_mean: f64,
    pub target_std: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub schedule_points: usize,
    pub seed: u64,
}

impl Default for Toy1dConfig {
    fn default() -> Self {
        Self {
            target_mean: 3.0,
            target_std: 1.0,
            batch: 1024,
            steps: 600,
            lr: 0.02,
            schedule_points: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Toy1dReport {
    /// Closed-form KL of the generator against the target after each step.
    pub kl: Vec<f64>,
    pub mean: f64,
    pub var: f64,
}

impl Toy1dReport {
    pub fn final_kl(&self) -> f64 {
        self.kl.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fits an affine generator `x = w·z + b`, `z ~ N(0,1)`, starting at
/// `N(0,1)`, to the target Gaussian by distribution matching.
pub fn fit_toy_1d(cfg: &Toy1dConfig) -> Result<Toy1dReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = DiffusionSchedule::linear_vp(cfg.schedule_points)?;
    let real = GaussianScore::new(
        vec![cfg.target_mean],
        DMatrix::from_element(1, 1, cfg.target_std * cfg.target_std),
    )?;
    let mut scores = ScorePair::new(real, 0, 1e-9);
    let mut wb = Tensor::param(vec![1.0, 0.0], &[1, 2])?;
    let mut opt = Adam::new(cfg.lr);
    let target_var = cfg.target_std * cfg.target_std;
    let mut kl = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let z = Tensor::randn(&[1, cfg.batch], &mut rng);
        let ones = Tensor::new(vec![1.0; cfg.batch], &[1, cfg.batch])?;
        let x = wb.matmul(&Tensor::concat(&[z, ones], 0)?)?;
        scores.fit_fake(&x.detach())?;
        let g = dmd_grad_over_schedule(&x, &scores, &schedule, &mut rng)?;
        dmd_loss(&x, &g)?.backward();
        opt.step(&mut [&mut wb])?;
        scores.generator_stepped();
        let (w, b) = (wb.data()[0], wb.data()[1]);
        kl.push(gaussian_kl_1d(b, w * w, cfg.target_mean, target_var));
    }
    let (w, b) = (wb.data()[0], wb.data()[1]);
    Ok(Toy1dReport {
        kl,
        mean: b,
        var: w * w,
    })
}
