//! Joint sampling-optimization: one reverse-diffusion pass during which the
//! design is ascended on the estimated information-gain gradient.
//!
//! Each iteration advances the posterior ensemble one reverse step
//! (conditioned on all previous measurements), Tweedie-denoises it,
//! simulates synthetic measurements through the current soft mask, advances
//! the pooled contrastive ensemble one step conditioned on those synthetic
//! measurements, denoises it too, estimates the gradient, and updates the
//! design. The posterior ensemble left at the end of the pass is the set of
//! draws the outer loop consumes.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::diffusion::{
    guidance_sum, reverse_step, tweedie_from_score, GuidanceTarget, NoiseSchedule,
    ParticleEnsemble, PooledWeights,
};
use crate::error::{Error, Result};
use crate::field::{ComplexField, ExperimentDataset, TargetState};
use crate::forward::{dft2, NoiseModel};
use crate::mask::{DesignParameter, MaskMode};
use crate::prior::ScoreModel;

use super::{design_step, estimate_eig_gradient, DesignOptimizerState, OptimizerConfig,
    ESS_SKIP_RATIO};

/// Result of one joint sampling-optimization pass.
#[derive(Debug, Clone)]
pub struct CodiffOutcome {
    pub design: DesignParameter,
    /// Posterior draws conditioned on the dataset the pass was given.
    pub posterior: ParticleEnsemble,
    /// Iterations whose design update was skipped on low effective sample size.
    pub skipped_steps: usize,
    pub ess_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
}

struct Particle {
    state: Array1<f64>,
    rng: ChaCha8Rng,
}

fn init_particles(n: usize, dim: usize, seed: u64, stream_base: u64) -> Vec<Particle> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + i as u64);
            let state = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
            Particle { state, rng }
        })
        .collect()
}

fn hessian_for(
    score_model: &dyn ScoreModel,
    state: &Array1<f64>,
    t: f64,
    wanted: bool,
) -> Result<Option<Array1<f64>>> {
    if !wanted {
        return Ok(None);
    }
    score_model
        .hessian_diag(&state.view(), t)
        .map(Some)
        .ok_or_else(|| {
            Error::InvalidParameter("score model provides no Hessian diagonal".into())
        })
}

/// Run the joint sampling-optimization loop from a given initial design.
pub fn codiff_optimize(
    score_model: &dyn ScoreModel,
    dataset: &ExperimentDataset,
    xi0: DesignParameter,
    config: &OptimizerConfig,
    schedule: &NoiseSchedule,
    noise: &NoiseModel,
    seed: u64,
) -> Result<CodiffOutcome> {
    config.validate()?;
    let builder = dataset.builder().clone();
    let (rows, cols) = (builder.rows(), builder.cols());
    let dim = TargetState::state_len(rows, cols);
    let n = config.particles;
    let m = config.contrastive_particles;
    let t_steps = config.inner_steps;
    let grid = schedule.time_grid(t_steps)?;

    // guidance terms for the measurements acquired so far (hard masks)
    let data_targets: Vec<GuidanceTarget> = dataset
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

    let mut joint = init_particles(n, dim, seed, 0);
    let mut pooled = init_particles(m, dim, seed, n as u64);
    let nu = PooledWeights::uniform(n)?;
    let mut xi = xi0;
    let mut opt_state = DesignOptimizerState::new(xi.dim());
    let mut skipped = 0usize;
    let mut ess_trace = Vec::with_capacity(t_steps);
    let mut grad_norm_trace = Vec::with_capacity(t_steps);

    for k in 0..t_steps {
        let t = grid[k];
        let t_next = grid[k + 1];
        let dt = t - t_next;
        let abar_t = schedule.alpha_bar(t)?;
        let abar_next = schedule.alpha_bar(t_next)?;
        let soft_mask = builder.build(&xi, MaskMode::Soft)?;

        // posterior side: advance, denoise, simulate a measurement
        let advanced: Vec<(Array1<f64>, ComplexField)> = joint
            .par_iter_mut()
            .map(|p| -> Result<(Array1<f64>, ComplexField)> {
                let score = score_model.score(&p.state.view(), t);
                let total = if data_targets.is_empty() {
                    score
                } else {
                    let hess = hessian_for(score_model, &p.state, t, config.use_hessian)?;
                    let guid = guidance_sum(
                        &p.state.view(),
                        abar_t,
                        &score,
                        hess.as_ref(),
                        &data_targets,
                        rows,
                        cols,
                    )?;
                    score + guid
                };
                p.state = reverse_step(&p.state.view(), t, dt, &total, schedule, &mut p.rng)?;
                let score_next = score_model.score(&p.state.view(), t_next);
                let denoised = tweedie_from_score(&p.state.view(), abar_next, &score_next);
                let x0 = TargetState::image_of_vector(rows, cols, &denoised.view())?;
                let mut y = dft2(&x0).hadamard_real(soft_mask.weights())?;
                for r in 0..rows {
                    for c in 0..cols {
                        let er: f64 = StandardNormal.sample(&mut p.rng);
                        let ei: f64 = StandardNormal.sample(&mut p.rng);
                        let (yr, yi) = y.get(r, c);
                        y.set(r, c, yr + noise.sigma() * er, yi + noise.sigma() * ei);
                    }
                }
                Ok((denoised, y))
            })
            .collect::<Result<Vec<_>>>()?;
        let (denoised_joint, ys): (Vec<Array1<f64>>, Vec<ComplexField>) =
            advanced.into_iter().unzip();

        // pooled side: advance under the synthetic measurements, denoise
        let pooled_targets: Vec<GuidanceTarget> = ys
            .iter()
            .zip(nu.as_slice())
            .map(|(y, &w)| GuidanceTarget {
                mask: soft_mask.clone(),
                y: y.clone(),
                sigma: noise.sigma(),
                weight: w,
            })
            .collect();
        let denoised_pooled: Vec<Array1<f64>> = pooled
            .par_iter_mut()
            .map(|p| -> Result<Array1<f64>> {
                let score = score_model.score(&p.state.view(), t);
                let hess = hessian_for(score_model, &p.state, t, config.use_hessian)?;
                let guid = guidance_sum(
                    &p.state.view(),
                    abar_t,
                    &score,
                    hess.as_ref(),
                    &pooled_targets,
                    rows,
                    cols,
                )?;
                let total = score + guid;
                p.state = reverse_step(&p.state.view(), t, dt, &total, schedule, &mut p.rng)?;
                let score_next = score_model.score(&p.state.view(), t_next);
                Ok(tweedie_from_score(&p.state.view(), abar_next, &score_next))
            })
            .collect::<Result<Vec<_>>>()?;

        let estimate = estimate_eig_gradient(
            &denoised_joint,
            &ys,
            &denoised_pooled,
            &builder,
            &xi,
            &nu,
            noise,
        )
        .map_err(|e| {
            Error::Numerical(format!(
                "design-gradient estimation failed at iteration {k} (t = {t:.4}, \
                 xi = {:?}, recent ess = {:?}): {e}",
                xi.values(),
                ess_trace.iter().rev().take(5).collect::<Vec<_>>()
            ))
        })?;
        let grad_norm = estimate
            .gradient
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        ess_trace.push(estimate.effective_sample_size);
        grad_norm_trace.push(grad_norm);

        if estimate.effective_sample_size < ESS_SKIP_RATIO * m as f64 {
            skipped += 1;
        } else {
            // linear step decay so the design settles as the ensembles sharpen
            let decayed = OptimizerConfig {
                step_size: config.step_size
                    * (1.0 - 0.9 * k as f64 / t_steps as f64),
                ..*config
            };
            xi = design_step(&xi, &estimate.gradient, &mut opt_state, &decayed)?;
        }
    }

    let posterior = ParticleEnsemble::new(
        joint.into_iter().map(|p| p.state).collect(),
        t_steps,
        seed,
    )?;
    Ok(CodiffOutcome {
        design: xi,
        posterior,
        skipped_steps: skipped,
        ess_trace,
        grad_norm_trace,
    })
}
