//! Prior scores over joint states.
//!
//! Three sources share one interface: analytic Gaussian mixtures whose
//! diffused scores are exact (the oracle used throughout testing), a small
//! trainable denoiser fitted by denoising score matching, and synthetic
//! phantom generation to build desk-scale joint (image, segmentation) data.

mod denoiser;
mod phantom;

pub use denoiser::{train_denoiser, train_denoiser_states, DenoiserScoreModel, LambdaWeighting, TrainingConfig};
pub use phantom::{
    benchmark_base_spec, benchmark_member, default_phantom_spec, generate_phantom,
    phantom_family, vary_spec, Anomaly, Ellipse, PhantomSpec,
};

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

/// Prior score `d/dtheta log p_t(theta)` at any diffusion time, plus an
/// optional Hessian diagonal for the exact-guidance path.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, theta_t: &ArrayView1<f64>, t: f64) -> Array1<f64>;

    fn hessian_diag(&self, theta_t: &ArrayView1<f64>, t: f64) -> Option<Array1<f64>> {
        let _ = (theta_t, t);
        None
    }
}

/// Gaussian mixture with diagonal covariances; its diffused marginals stay
/// mixtures of diagonal Gaussians, so scores and Hessian diagonals are exact.
#[derive(Debug, Clone)]
pub struct GaussianMixturePrior {
    weights: Vec<f64>,
    means: Vec<Array1<f64>>,
    vars: Vec<Array1<f64>>,
    /// Per component: Some(v) when the covariance is isotropic.
    uniform_var: Vec<Option<f64>>,
    schedule: NoiseSchedule,
}

impl GaussianMixturePrior {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Array1<f64>>,
        vars: Vec<Array1<f64>>,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        if weights.is_empty() || means.len() != weights.len() || vars.len() != weights.len() {
            return Err(Error::InvalidParameter(
                "mixture needs matching, non-empty weights/means/covariances".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "mixture weights must be a probability vector".into(),
            ));
        }
        let dim = means[0].len();
        for (m, v) in means.iter().zip(vars.iter()) {
            if m.len() != dim || v.len() != dim {
                return Err(Error::shape(format!("{dim}"), "mixture component"));
            }
            if v.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::InvalidParameter(
                    "mixture covariances must be positive".into(),
                ));
            }
        }
        let uniform_var = vars
            .iter()
            .map(|v| {
                let first = v[0];
                v.iter().all(|&x| x == first).then_some(first)
            })
            .collect();
        Ok(Self {
            weights,
            means,
            vars,
            uniform_var,
            schedule,
        })
    }

    /// Standard normal prior.
    pub fn standard(dim: usize, schedule: NoiseSchedule) -> Result<Self> {
        Self::new(
            vec![1.0],
            vec![Array1::zeros(dim)],
            vec![Array1::ones(dim)],
            schedule,
        )
    }

    /// Single Gaussian with isotropic covariance.
    pub fn isotropic(mean: Array1<f64>, var: f64, schedule: NoiseSchedule) -> Result<Self> {
        let dim = mean.len();
        Self::new(
            vec![1.0],
            vec![mean],
            vec![Array1::from_elem(dim, var)],
            schedule,
        )
    }

    /// Equal-weight mixture of isotropic components centred on the given states.
    pub fn from_components(
        means: Vec<Array1<f64>>,
        var: f64,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(Error::EmptyInput("mixture components".into()));
        }
        let dim = means[0].len();
        Self::new(
            vec![1.0 / k as f64; k],
            means,
            vec![Array1::from_elem(dim, var); k],
            schedule,
        )
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn component_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component_means(&self) -> &[Array1<f64>] {
        &self.means
    }

    pub fn component_vars(&self) -> &[Array1<f64>] {
        &self.vars
    }

    /// Mixture mean at t = 0.
    pub fn mean0(&self) -> Array1<f64> {
        let dim = self.means[0].len();
        let mut out = Array1::zeros(dim);
        for (w, m) in self.weights.iter().zip(self.means.iter()) {
            out = out + m * *w;
        }
        out
    }

    /// Per-coordinate marginal variance at t = 0 (within plus between).
    pub fn var0(&self) -> Array1<f64> {
        let dim = self.means[0].len();
        let mean = self.mean0();
        let mut out = Array1::zeros(dim);
        for ((w, m), v) in self.weights.iter().zip(self.means.iter()).zip(self.vars.iter()) {
            for i in 0..dim {
                out[i] += w * (v[i] + (m[i] - mean[i]) * (m[i] - mean[i]));
            }
        }
        out
    }

    /// Draw from the clean prior.
    pub fn sample0<R: Rng>(&self, rng: &mut R) -> Array1<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u <= acc {
                idx = i;
                break;
            }
        }
        let m = &self.means[idx];
        let v = &self.vars[idx];
        Array1::from_shape_fn(m.len(), |i| {
            let e: f64 = StandardNormal.sample(rng);
            m[i] + v[i].sqrt() * e
        })
    }

    /// Per-component log densities of the diffused mixture. Isotropic
    /// components take a constant-variance fast path (one log instead of one
    /// per coordinate), which is what makes large image mixtures practical.
    fn component_log_terms(&self, theta_t: &ArrayView1<f64>, abar: f64) -> Vec<f64> {
        let dim = theta_t.len();
        let sa = abar.sqrt();
        let tau = 2.0 * std::f64::consts::PI;
        self.weights
            .iter()
            .zip(self.means.iter())
            .zip(self.vars.iter())
            .zip(self.uniform_var.iter())
            .map(|(((w, m), v), uv)| {
                let mut logp = if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
                match uv {
                    Some(var0) => {
                        let vt = abar * var0 + (1.0 - abar);
                        let mut quad = 0.0;
                        for i in 0..dim {
                            let d = theta_t[i] - sa * m[i];
                            quad += d * d;
                        }
                        logp += -0.5 * (quad / vt + dim as f64 * (tau * vt).ln());
                    }
                    None => {
                        for i in 0..dim {
                            let vt = abar * v[i] + (1.0 - abar);
                            let d = theta_t[i] - sa * m[i];
                            logp += -0.5 * (d * d / vt + (tau * vt).ln());
                        }
                    }
                }
                logp
            })
            .collect()
    }

    /// Exact log density of the diffused mixture; the finite-difference
    /// oracle behind the score tests.
    pub fn log_density_t(&self, theta_t: &ArrayView1<f64>, t: f64) -> Result<f64> {
        let abar = self.schedule.alpha_bar(t)?;
        Ok(logsumexp(&self.component_log_terms(theta_t, abar)))
    }

    fn score_at(&self, theta_t: &ArrayView1<f64>, abar: f64) -> Array1<f64> {
        let dim = theta_t.len();
        let sa = abar.sqrt();
        let log_terms = self.component_log_terms(theta_t, abar);
        let lse = logsumexp(&log_terms);
        let mut out = Array1::zeros(dim);
        for ((lt, m), v) in log_terms.iter().zip(self.means.iter()).zip(self.vars.iter()) {
            let gamma = (lt - lse).exp();
            if gamma == 0.0 {
                continue;
            }
            for i in 0..dim {
                let vt = abar * v[i] + (1.0 - abar);
                out[i] -= gamma * (theta_t[i] - sa * m[i]) / vt;
            }
        }
        out
    }

    fn hessian_diag_at(&self, theta_t: &ArrayView1<f64>, abar: f64) -> Array1<f64> {
        let dim = theta_t.len();
        let sa = abar.sqrt();
        let log_terms = self.component_log_terms(theta_t, abar);
        let lse = logsumexp(&log_terms);
        let mut score = Array1::<f64>::zeros(dim);
        let mut out = Array1::zeros(dim);
        for ((lt, m), v) in log_terms.iter().zip(self.means.iter()).zip(self.vars.iter()) {
            let gamma = (lt - lse).exp();
            if gamma == 0.0 {
                continue;
            }
            for i in 0..dim {
                let vt = abar * v[i] + (1.0 - abar);
                let dv = (theta_t[i] - sa * m[i]) / vt;
                score[i] -= gamma * dv;
                out[i] += gamma * (-1.0 / vt + dv * dv);
            }
        }
        for i in 0..dim {
            out[i] -= score[i] * score[i];
        }
        out
    }
}

impl ScoreModel for GaussianMixturePrior {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn score(&self, theta_t: &ArrayView1<f64>, t: f64) -> Array1<f64> {
        let abar = self
            .schedule
            .alpha_bar(t)
            .unwrap_or_else(|_| panic!("time {t} outside the prior's schedule"));
        self.score_at(theta_t, abar)
    }

    fn hessian_diag(&self, theta_t: &ArrayView1<f64>, t: f64) -> Option<Array1<f64>> {
        let abar = self.schedule.alpha_bar(t).ok()?;
        Some(self.hessian_diag_at(theta_t, abar))
    }
}

/// Exact score of the diffused mixture under the given schedule.
pub fn gm_score(
    prior: &GaussianMixturePrior,
    theta_t: &ArrayView1<f64>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Array1<f64>> {
    let abar = schedule.alpha_bar(t)?;
    Ok(prior.score_at(theta_t, abar))
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
