//! Information-gain driven design optimization: the closed-form linear
//! Gaussian oracle, the importance-sampling gradient estimator, the joint
//! sampling-optimization loop, and the outer sequential acquisition loop.

mod codiff;
mod estimator;
mod sequential;

pub use codiff::{codiff_optimize, CodiffOutcome};
pub use estimator::{estimate_eig_gradient, EigGradientEstimate, EstimatorDiagnostics};
pub use sequential::{
    run_sequential_bed, BedTrace, DesignStrategy, ExperimentLog, MeasurementSource,
    SequentialOptions, SequentialOutcome,
};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{dft2, NoiseModel};
use crate::mask::{DesignParameter, MaskBuilder, MaskMode, TrajectoryPattern};
use crate::prior::GaussianMixturePrior;

/// Knobs of the joint sampling-optimization loop and the outer experiment
/// loop. `inner_steps` doubles as the number of reverse-diffusion steps: the
/// ensembles finish exactly one reverse pass per call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub outer_experiments: usize,
    pub inner_steps: usize,
    pub particles: usize,
    pub contrastive_particles: usize,
    pub step_size: f64,
    pub momentum: Option<f64>,
    pub adaptive: bool,
    pub budget_fraction: f64,
    pub ssim_stop: Option<f64>,
    /// Whiten the measurement guidance with the score model's Hessian
    /// diagonal (exact for analytic Gaussian priors; required for stability
    /// at small measurement noise). Needs a score model with a Hessian.
    pub use_hessian: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            outer_experiments: 20,
            inner_steps: 200,
            particles: 64,
            contrastive_particles: 64,
            step_size: 0.05,
            momentum: None,
            adaptive: true,
            budget_fraction: 0.25,
            ssim_stop: None,
            use_hessian: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_experiments == 0
            || self.inner_steps == 0
            || self.particles == 0
            || self.contrastive_particles == 0
        {
            return Err(Error::InvalidParameter(
                "experiments, inner_steps and particle counts must be >= 1".into(),
            ));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidParameter("bad step size".into()));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::InvalidParameter(
                "budget_fraction must lie in (0, 1]".into(),
            ));
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::InvalidParameter("momentum must be in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Skip threshold on the effective sample size, as a fraction of M.
pub const ESS_SKIP_RATIO: f64 = 0.1;

/// Per-design optimizer state: momentum buffer plus Adam moments.
#[derive(Debug, Clone)]
pub struct DesignOptimizerState {
    momentum_buf: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step: usize,
}

impl DesignOptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            momentum_buf: vec![0.0; dim],
            adam_m: vec![0.0; dim],
            adam_v: vec![0.0; dim],
            step: 0,
        }
    }
}

/// One ascent step on the design. Adaptive mode uses Adam-style moments,
/// otherwise plain gradient ascent with optional momentum. Radial angles are
/// re-wrapped modulo pi afterwards.
pub fn design_step(
    xi: &DesignParameter,
    gradient: &[f64],
    state: &mut DesignOptimizerState,
    config: &OptimizerConfig,
) -> Result<DesignParameter> {
    if gradient.len() != xi.dim() || state.momentum_buf.len() != xi.dim() {
        return Err(Error::shape(
            format!("{}", xi.dim()),
            format!("{}", gradient.len()),
        ));
    }
    let mut values = xi.values().to_vec();
    if config.adaptive {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        state.step += 1;
        let bc1 = 1.0 - B1.powi(state.step as i32);
        let bc2 = 1.0 - B2.powi(state.step as i32);
        for i in 0..values.len() {
            state.adam_m[i] = B1 * state.adam_m[i] + (1.0 - B1) * gradient[i];
            state.adam_v[i] = B2 * state.adam_v[i] + (1.0 - B2) * gradient[i] * gradient[i];
            let mhat = state.adam_m[i] / bc1;
            let vhat = state.adam_v[i] / bc2;
            values[i] += config.step_size * mhat / (vhat.sqrt() + EPS);
        }
    } else if let Some(mom) = config.momentum {
        for i in 0..values.len() {
            state.momentum_buf[i] = mom * state.momentum_buf[i] + gradient[i];
            values[i] += config.step_size * state.momentum_buf[i];
        }
    } else {
        for i in 0..values.len() {
            values[i] += config.step_size * gradient[i];
        }
    }
    Ok(xi.with_values(values)?.wrapped())
}

/// Closed-form expected information gain per real coordinate of a linear
/// Gaussian model `y_i = m_i x_i + sigma eps`: `sum_i log(1 + m_i^2 s_i^2 /
/// sigma^2) / 2`.
pub fn eig_gaussian_oracle_coords(
    prior_var: &[f64],
    mask_weights: &[f64],
    sigma: f64,
) -> Result<f64> {
    if prior_var.len() != mask_weights.len() {
        return Err(Error::shape(
            format!("{}", prior_var.len()),
            format!("{}", mask_weights.len()),
        ));
    }
    if prior_var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter(
            "prior variances must be positive".into(),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter("sigma must be positive".into()));
    }
    Ok(prior_var
        .iter()
        .zip(mask_weights.iter())
        .map(|(&s2, &m)| 0.5 * (1.0 + m * m * s2 / (sigma * sigma)).ln())
        .sum())
}

/// Oracle EIG of a design: the mask is built from `xi` and applied to both
/// the real and imaginary component of every frequency. `prior_var` holds
/// the per-component k-space prior variances (real block then imaginary
/// block), valid exactly when the prior covariance is diagonal in k-space.
pub fn eig_gaussian_oracle(
    prior_var: &Array1<f64>,
    xi: &DesignParameter,
    noise: &NoiseModel,
    builder: &MaskBuilder,
    mode: MaskMode,
) -> Result<f64> {
    let n = builder.rows() * builder.cols();
    if prior_var.len() != 2 * n {
        return Err(Error::shape(
            format!("{}", 2 * n),
            format!("{}", prior_var.len()),
        ));
    }
    let mask = builder.build(xi, mode)?;
    let w = mask.weights();
    let weights: Vec<f64> = w.iter().chain(w.iter()).cloned().collect();
    let vars: Vec<f64> = prior_var.iter().cloned().collect();
    eig_gaussian_oracle_coords(&vars, &weights, noise.sigma())
}

/// Diagonal k-space marginal variance of a Gaussian mixture prior over joint
/// states (image part only, real block then imaginary block). The
/// within-component part assumes (or isotropizes) per-component covariance
/// across image coordinates; the between-component part is exact.
pub fn kspace_marginal_variance(
    prior: &GaussianMixturePrior,
    rows: usize,
    cols: usize,
) -> Result<Array1<f64>> {
    use crate::field::TargetState;
    use crate::prior::ScoreModel;
    let n = rows * cols;
    if prior.dim() < 2 * n {
        return Err(Error::shape(
            format!(">= {}", 2 * n),
            format!("{}", prior.dim()),
        ));
    }
    // within-component variance, isotropized over the image block
    let mut within = 0.0;
    for (w, v) in prior
        .component_weights()
        .iter()
        .zip(prior.component_vars().iter())
    {
        let avg: f64 = v.slice(ndarray::s![..2 * n]).mean().unwrap();
        within += w * avg;
    }
    // between-component spread, exact in k-space
    let k_means: Vec<Array1<f64>> = prior
        .component_means()
        .iter()
        .map(|m| -> Result<Array1<f64>> {
            let img = TargetState::image_of_vector(rows, cols, &m.view())?;
            Ok(dft2(&img).vectorize())
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = prior.component_weights();
    let mut k_bar = Array1::<f64>::zeros(2 * n);
    for (w, km) in weights.iter().zip(k_means.iter()) {
        k_bar = k_bar + km * *w;
    }
    let mut out = Array1::from_elem(2 * n, within);
    for (w, km) in weights.iter().zip(k_means.iter()) {
        for i in 0..2 * n {
            out[i] += w * (km[i] - k_bar[i]) * (km[i] - k_bar[i]);
        }
    }
    Ok(out)
}

/// Random design initialization per pattern, used once per experiment.
pub fn random_design<R: rand::Rng>(
    pattern: TrajectoryPattern,
    lines: usize,
    rows: usize,
    rng: &mut R,
) -> Result<DesignParameter> {
    match pattern {
        TrajectoryPattern::Radial => Ok(DesignParameter::random_radial(lines, rng)),
        TrajectoryPattern::Cartesian => {
            let coords = (0..lines)
                .map(|_| rng.random::<f64>() * rows as f64)
                .collect();
            Ok(DesignParameter::cartesian(coords))
        }
        TrajectoryPattern::Spiral => {
            let mut triples = Vec::with_capacity(3 * lines);
            for _ in 0..lines {
                triples.push(rng.random::<f64>() * 2.0);
                triples.push(0.3 + rng.random::<f64>() * 1.2);
                triples.push(rng.random::<f64>() * std::f64::consts::TAU);
            }
            DesignParameter::spiral(triples)
        }
    }
}
