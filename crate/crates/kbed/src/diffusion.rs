//! Variance-preserving diffusion machinery: the noise schedule, forward
//! perturbation, Tweedie denoising, posterior guidance, and the reverse-SDE
//! Euler-Maruyama samplers for both the measurement posterior and the pooled
//! posterior used by the design optimizer.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ComplexField, TargetState};
use crate::forward::{dft2, idft2, ForwardOperator, NoiseModel};
use crate::mask::{DesignParameter, MaskBuilder, MaskField, MaskMode};
use crate::prior::ScoreModel;

/// Reverse integration stops here instead of exactly at t = 0; the Tweedie
/// map divides by sqrt(alpha_bar) and the conditional variance vanishes at
/// the origin.
pub const T_FLOOR: f64 = 1e-3;

/// Linear variance-preserving noise schedule on [t0, tf].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t0: f64,
    pub tf: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.02,
            beta_max: 5.0,
            t0: 0.0,
            tf: 2.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t0: f64, tf: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max >= beta_min) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_min <= beta_max, got {beta_min}, {beta_max}"
            )));
        }
        if !(t0 >= 0.0 && tf > t0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 <= t0 < tf, got {t0}, {tf}"
            )));
        }
        Ok(Self {
            beta_min,
            beta_max,
            t0,
            tf,
        })
    }

    /// beta(t) interpolates linearly from beta_min at 0 to beta_max at tf.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t / self.tf
    }

    /// Closed-form `exp(-int_0^t beta)` of the linear schedule.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        if !(self.t0 - 1e-12..=self.tf + 1e-12).contains(&t) {
            return Err(Error::InvalidParameter(format!(
                "time {t} outside schedule range [{}, {}]",
                self.t0, self.tf
            )));
        }
        Ok(self.alpha_bar_unchecked(t))
    }

    fn alpha_bar_unchecked(&self, t: f64) -> f64 {
        (-(self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.tf))).exp()
    }

    /// Uniform reverse-time grid from tf down to `max(t0, T_FLOOR)`,
    /// `steps + 1` points.
    pub fn time_grid(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::InvalidParameter("steps must be >= 1".into()));
        }
        let lo = self.t0.max(T_FLOOR);
        if lo >= self.tf {
            return Err(Error::InvalidParameter(
                "empty schedule range after applying the time floor".into(),
            ));
        }
        Ok((0..=steps)
            .map(|k| self.tf - (self.tf - lo) * k as f64 / steps as f64)
            .collect())
    }
}

/// Exact sample of the diffused marginal at time t:
/// `sqrt(abar) theta0 + sqrt(1 - abar) eps`.
pub fn perturb<R: Rng>(
    theta0: &ArrayView1<f64>,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let abar = schedule.alpha_bar(t)?;
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    Ok(Array1::from_shape_fn(theta0.len(), |i| {
        let eps: f64 = StandardNormal.sample(rng);
        a * theta0[i] + b * eps
    }))
}

/// Denoised prediction from a precomputed score.
pub fn tweedie_from_score(
    theta_t: &ArrayView1<f64>,
    alpha_bar: f64,
    score: &Array1<f64>,
) -> Array1<f64> {
    let sa = alpha_bar.sqrt();
    let w = 1.0 - alpha_bar;
    Array1::from_shape_fn(theta_t.len(), |i| (theta_t[i] + w * score[i]) / sa)
}

/// Tweedie denoising: the conditional mean of the clean state given the
/// noisy one, exact whenever the score is.
pub fn tweedie(
    theta_t: &ArrayView1<f64>,
    t: f64,
    score_model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
) -> Result<Array1<f64>> {
    let abar = schedule.alpha_bar(t)?;
    let score = score_model.score(theta_t, t);
    Ok(tweedie_from_score(theta_t, abar, &score))
}

/// One conditioning term for guided reverse diffusion.
#[derive(Debug, Clone)]
pub(crate) struct GuidanceTarget {
    pub mask: MaskField,
    pub y: ComplexField,
    pub sigma: f64,
    pub weight: f64,
}

/// Weighted sum of measurement-likelihood score approximations, sharing one
/// Tweedie prediction across all targets.
///
/// Without the Hessian this is the plain first-moment approximation: each
/// target contributes `weight / (sigma^2 sqrt(abar)) * A^H (y - A theta0_hat)`.
/// With the Hessian the Jacobian of the Tweedie map enters, and the residual
/// is whitened by the per-frequency variance `mask^2 * cbar + sigma^2`, where
/// `cbar` is the (isotropized) Tweedie covariance; exact for single Gaussian
/// priors with isotropic covariance.
pub(crate) fn guidance_sum(
    theta_t: &ArrayView1<f64>,
    alpha_bar: f64,
    score: &Array1<f64>,
    hessian_diag: Option<&Array1<f64>>,
    targets: &[GuidanceTarget],
    rows: usize,
    cols: usize,
) -> Result<Array1<f64>> {
    let n = rows * cols;
    let theta0 = tweedie_from_score(theta_t, alpha_bar, score);
    let x0 = TargetState::image_of_vector(rows, cols, &theta0.view())?;
    let k0 = dft2(&x0);

    let cbar = hessian_diag.map(|h| {
        let one_m = 1.0 - alpha_bar;
        let mut acc = 0.0;
        for i in 0..2 * n {
            acc += (one_m / alpha_bar) * (1.0 + one_m * h[i]);
        }
        (acc / (2 * n) as f64).max(0.0)
    });

    let mut acc_re = ndarray::Array2::<f64>::zeros((rows, cols));
    let mut acc_im = ndarray::Array2::<f64>::zeros((rows, cols));
    for tgt in targets {
        if (tgt.mask.rows(), tgt.mask.cols()) != (rows, cols) {
            return Err(Error::shape(
                format!("{:?}", (rows, cols)),
                format!("{:?}", (tgt.mask.rows(), tgt.mask.cols())),
            ));
        }
        let s2 = tgt.sigma * tgt.sigma;
        for r in 0..rows {
            for c in 0..cols {
                let w = tgt.mask.weights()[[r, c]];
                if w == 0.0 {
                    continue;
                }
                let (kr, ki) = k0.get(r, c);
                let (yr, yi) = tgt.y.get(r, c);
                let denom = match cbar {
                    Some(cb) => cb * w * w + s2,
                    None => s2,
                };
                let coef = tgt.weight * w / denom;
                acc_re[[r, c]] += coef * (yr - w * kr);
                acc_im[[r, c]] += coef * (yi - w * ki);
            }
        }
    }
    let g_img = idft2(&ComplexField::from_parts(acc_re, acc_im)?);
    let mut out = Array1::zeros(3 * n);
    out.slice_mut(ndarray::s![..2 * n])
        .assign(&g_img.vectorize());

    match hessian_diag {
        None => {
            let scale = 1.0 / alpha_bar.sqrt();
            out.mapv_inplace(|v| v * scale);
        }
        Some(h) => {
            let one_m = 1.0 - alpha_bar;
            let sa = alpha_bar.sqrt();
            for i in 0..2 * n {
                out[i] *= (1.0 + one_m * h[i]) / sa;
            }
        }
    }
    Ok(out)
}

/// Approximation of the measurement-likelihood score at diffusion time t.
#[allow(clippy::too_many_arguments)]
pub fn dps_guidance(
    theta_t: &ArrayView1<f64>,
    t: f64,
    y: &ComplexField,
    op: &ForwardOperator,
    noise: &NoiseModel,
    score_model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    use_hessian: bool,
) -> Result<Array1<f64>> {
    let abar = schedule.alpha_bar(t)?;
    let score = score_model.score(theta_t, t);
    let hess = if use_hessian {
        Some(score_model.hessian_diag(theta_t, t).ok_or_else(|| {
            Error::InvalidParameter("score model provides no Hessian diagonal".into())
        })?)
    } else {
        None
    };
    let targets = [GuidanceTarget {
        mask: op.mask().clone(),
        y: y.clone(),
        sigma: noise.sigma(),
        weight: 1.0,
    }];
    guidance_sum(
        theta_t,
        abar,
        &score,
        hess.as_ref(),
        &targets,
        op.rows(),
        op.cols(),
    )
}

/// One Euler-Maruyama step of the reverse SDE from t to t - dt, given the
/// total (prior + guidance) score at the current state.
pub fn reverse_step<R: Rng>(
    theta_t: &ArrayView1<f64>,
    t: f64,
    dt: f64,
    score: &Array1<f64>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "reverse step needs dt > 0, got {dt}"
        )));
    }
    let beta = schedule.beta(t - dt);
    let noise_scale = (beta * dt).sqrt();
    Ok(Array1::from_shape_fn(theta_t.len(), |i| {
        let eps: f64 = StandardNormal.sample(rng);
        theta_t[i] + (0.5 * beta * theta_t[i] + beta * score[i]) * dt + noise_scale * eps
    }))
}

/// Approximate posterior draws at the end of a reverse pass.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    states: Vec<Array1<f64>>,
    time_index: usize,
    seed: u64,
}

impl ParticleEnsemble {
    /// Particle RNG streams are derived from `seed` by particle index.
    pub fn new(states: Vec<Array1<f64>>, time_index: usize, seed: u64) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::EmptyInput("particle ensemble".into()))?;
        let dim = first.len();
        if states.iter().any(|s| s.len() != dim) {
            return Err(Error::shape(format!("{dim}"), "mixed state lengths"));
        }
        Ok(Self {
            states,
            time_index,
            seed,
        })
    }

    pub fn states(&self) -> &[Array1<f64>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn mean(&self) -> Array1<f64> {
        let mut acc = Array1::zeros(self.dim());
        for s in &self.states {
            acc += s;
        }
        acc / self.states.len() as f64
    }

    /// Per-coordinate sample variance (unbiased).
    pub fn component_variance(&self) -> Array1<f64> {
        let mean = self.mean();
        let mut acc = Array1::<f64>::zeros(self.dim());
        for s in &self.states {
            for (a, (&v, &m)) in acc.iter_mut().zip(s.iter().zip(mean.iter())) {
                *a += (v - m) * (v - m);
            }
        }
        acc / (self.states.len().max(2) - 1) as f64
    }

    /// Ensemble mean interpreted as a joint target.
    pub fn posterior_mean_state(&self, rows: usize, cols: usize) -> Result<TargetState> {
        TargetState::from_vector(rows, cols, &self.mean().view())
    }
}

fn initial_state<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng))
}

/// Shared guided reverse pass: evolves `n` independent particles from
/// N(0, I) at tf down to the time floor, adding the weighted guidance of
/// every target at each step. Deterministic given the seed.
pub(crate) fn run_guided_reverse(
    score_model: &dyn ScoreModel,
    targets: &[GuidanceTarget],
    rows: usize,
    cols: usize,
    schedule: &NoiseSchedule,
    steps: usize,
    n_particles: usize,
    seed: u64,
    use_hessian: bool,
) -> Result<ParticleEnsemble> {
    if n_particles == 0 {
        return Err(Error::EmptyInput("n_particles == 0".into()));
    }
    let grid = schedule.time_grid(steps)?;
    let dim = TargetState::state_len(rows, cols);

    let states = (0..n_particles)
        .into_par_iter()
        .map(|i| -> Result<Array1<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut th = initial_state(dim, &mut rng);
            for k in 0..steps {
                let t = grid[k];
                let abar = schedule.alpha_bar(t)?;
                let score = score_model.score(&th.view(), t);
                let total = if targets.is_empty() {
                    score
                } else {
                    let hess = if use_hessian {
                        Some(score_model.hessian_diag(&th.view(), t).ok_or_else(|| {
                            Error::InvalidParameter(
                                "score model provides no Hessian diagonal".into(),
                            )
                        })?)
                    } else {
                        None
                    };
                    let guid = guidance_sum(
                        &th.view(),
                        abar,
                        &score,
                        hess.as_ref(),
                        targets,
                        rows,
                        cols,
                    )?;
                    score + guid
                };
                th = reverse_step(&th.view(), t, t - grid[k + 1], &total, schedule, &mut rng)?;
            }
            if th.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "particle {i} diverged during the reverse pass"
                )));
            }
            Ok(th)
        })
        .collect::<Result<Vec<_>>>()?;

    ParticleEnsemble::new(states, steps, seed)
}

/// Draws from the posterior given every record measured so far: the reverse
/// SDE with the prior score plus one guidance term per record (hard masks).
/// An empty dataset yields prior draws.
pub fn sample_posterior(
    score_model: &dyn ScoreModel,
    dataset: &crate::field::ExperimentDataset,
    schedule: &NoiseSchedule,
    steps: usize,
    n_particles: usize,
    seed: u64,
    use_hessian: bool,
) -> Result<ParticleEnsemble> {
    let builder = dataset.builder();
    let targets = dataset
        .records()
        .iter()
        .map(|rec| -> Result<GuidanceTarget> {
            Ok(GuidanceTarget {
                mask: builder.build(rec.design(), MaskMode::Hard)?,
                y: rec.measurement().clone(),
                sigma: rec.noise_sigma(),
                weight: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    run_guided_reverse(
        score_model,
        &targets,
        builder.rows(),
        builder.cols(),
        schedule,
        steps,
        n_particles,
        seed,
        use_hessian,
    )
}

/// Simplex weights over pooled measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledWeights {
    nu: Vec<f64>,
}

impl PooledWeights {
    pub fn new(nu: Vec<f64>) -> Result<Self> {
        if nu.is_empty() {
            return Err(Error::EmptyInput("pooled weights".into()));
        }
        if nu.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "pooled weights must be non-negative".into(),
            ));
        }
        let sum: f64 = nu.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "pooled weights must sum to 1, got {sum}"
            )));
        }
        Ok(Self { nu })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("pooled weights".into()));
        }
        Ok(Self {
            nu: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.nu
    }
}

/// Draws from the pooled posterior: the reverse SDE whose conditioning is the
/// nu-weighted sum of per-measurement guidance terms through the soft mask of
/// one shared candidate design.
#[allow(clippy::too_many_arguments)]
pub fn sample_pooled_posterior(
    score_model: &dyn ScoreModel,
    ys: &[ComplexField],
    builder: &MaskBuilder,
    xi: &DesignParameter,
    nu: &PooledWeights,
    schedule: &NoiseSchedule,
    steps: usize,
    m_particles: usize,
    seed: u64,
    noise: &NoiseModel,
    use_hessian: bool,
) -> Result<ParticleEnsemble> {
    if ys.is_empty() {
        return Err(Error::EmptyInput("pooled measurements".into()));
    }
    if ys.len() != nu.len() {
        return Err(Error::InvalidParameter(format!(
            "{} measurements but {} pooled weights",
            ys.len(),
            nu.len()
        )));
    }
    let mask = builder.build(xi, MaskMode::Soft)?;
    let targets: Vec<GuidanceTarget> = ys
        .iter()
        .zip(nu.as_slice())
        .map(|(y, &w)| GuidanceTarget {
            mask: mask.clone(),
            y: y.clone(),
            sigma: noise.sigma(),
            weight: w,
        })
        .collect();
    run_guided_reverse(
        score_model,
        &targets,
        builder.rows(),
        builder.cols(),
        schedule,
        steps,
        m_particles,
        seed,
        use_hessian,
    )
}
