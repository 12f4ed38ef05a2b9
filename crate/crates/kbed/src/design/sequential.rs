//! Outer sequential acquisition loop: optimize a design against the current
//! posterior, run the experiment with the hard mask, fold the measurement
//! into the dataset, and repeat until the experiment budget or the sampling
//! budget is exhausted.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::{sample_posterior, NoiseSchedule, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::field::{ComplexField, ExperimentDataset, MeasurementRecord, TargetState};
use crate::forward::{sample_measurement, ForwardOperator, NoiseModel};
use crate::mask::{accumulate_masks, MaskBuilder, MaskField, MaskMode, TrajectoryPattern};
use crate::metrics::evaluate;
use crate::prior::ScoreModel;

use super::{codiff_optimize, eig_gaussian_oracle_coords, random_design, OptimizerConfig};

/// Anything that can be measured on demand; the simulator implements it for
/// a fixed ground-truth state.
pub trait MeasurementSource: Sync {
    fn acquire(
        &self,
        op: &ForwardOperator,
        noise: &NoiseModel,
        seed: u64,
    ) -> Result<ComplexField>;
}

impl MeasurementSource for TargetState {
    fn acquire(
        &self,
        op: &ForwardOperator,
        noise: &NoiseModel,
        seed: u64,
    ) -> Result<ComplexField> {
        sample_measurement(op, self, noise, seed)
    }
}

/// Whether the per-experiment design comes from the optimizer or is drawn at
/// random (the comparison baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignStrategy {
    Optimized,
    Random,
}

/// Per-experiment log row.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentLog {
    pub k: usize,
    pub design: Vec<f64>,
    /// Cumulative fraction of sampled k-space after this experiment.
    pub sampled_fraction: f64,
    /// Fraction newly covered by this experiment.
    pub new_coverage: f64,
    /// Oracle information gain of the executed design under the Gaussian
    /// proxy, evaluated against the pre-experiment posterior variances.
    pub eig_proxy: Option<f64>,
    /// Analytic posterior entropy after this experiment (Gaussian proxy,
    /// image coordinates only).
    pub entropy: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub dice: Option<f64>,
    pub wall_ms: f64,
    pub skipped_steps: usize,
}

/// Trace of one sequential run.
#[derive(Debug, Clone, Serialize)]
pub struct BedTrace {
    pub experiments: Vec<ExperimentLog>,
    pub final_fraction: f64,
    pub stopped_early: bool,
}

impl BedTrace {
    pub fn fractions(&self) -> Vec<f64> {
        self.experiments.iter().map(|e| e.sampled_fraction).collect()
    }
}

/// Everything the outer loop needs beyond the optimizer knobs.
pub struct SequentialOptions<'a> {
    /// Ground truth for metric reporting (PSNR/SSIM/Dice per experiment).
    pub truth_metrics: Option<&'a TargetState>,
    /// Per-component k-space prior variances (real block then imaginary
    /// block) enabling the analytic entropy and information-gain proxy.
    pub proxy_prior_var: Option<Array1<f64>>,
    /// Recompute posterior metrics after every experiment (otherwise only
    /// after the last one).
    pub metrics_every: bool,
    /// Reverse steps for the metric/reporting posterior passes; defaults to
    /// the optimizer's `inner_steps`. More steps keep the guided reverse SDE
    /// stable once many records overlap at low noise.
    pub metric_steps: Option<usize>,
    pub strategy: DesignStrategy,
    pub pattern: TrajectoryPattern,
    pub lines_per_experiment: usize,
}

/// Final artifacts of a run.
pub struct SequentialOutcome {
    pub trace: BedTrace,
    pub dataset: ExperimentDataset,
    pub posterior: ParticleEnsemble,
    pub posterior_mean: TargetState,
}

fn experiment_seed(seed: u64, k: usize, salt: u64) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

/// Run the sequential design loop. Stops early once the accumulated hard
/// mask reaches the budget fraction (or the optional SSIM target is met).
#[allow(clippy::too_many_arguments)]
pub fn run_sequential_bed(
    source: &dyn MeasurementSource,
    score_model: &dyn ScoreModel,
    builder: &MaskBuilder,
    config: &OptimizerConfig,
    schedule: &NoiseSchedule,
    noise: &NoiseModel,
    options: &SequentialOptions,
    seed: u64,
) -> Result<SequentialOutcome> {
    config.validate()?;
    if options.lines_per_experiment == 0 {
        return Err(Error::InvalidParameter("lines_per_experiment == 0".into()));
    }
    let (rows, cols) = (builder.rows(), builder.cols());
    let n = rows * cols;
    let mut dataset = ExperimentDataset::new(builder.clone());
    let mut logs: Vec<ExperimentLog> = Vec::new();
    let mut union_mask: Option<MaskField> = None;
    let mut stopped_early = false;
    let mut posterior: Option<ParticleEnsemble> = None;
    // per-pixel count of hard-mask coverage, for the analytic proxy
    let mut coverage_counts = vec![0.0f64; n];
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);

    for k in 1..=config.outer_experiments {
        let start = std::time::Instant::now();
        let xi0 = random_design(
            options.pattern,
            options.lines_per_experiment,
            rows,
            &mut init_rng,
        )?;
        let (design, skipped, codiff_posterior) = match options.strategy {
            DesignStrategy::Optimized => {
                let out = codiff_optimize(
                    score_model,
                    &dataset,
                    xi0,
                    config,
                    schedule,
                    noise,
                    experiment_seed(seed, k, 1),
                )?;
                (out.design, out.skipped_steps, Some(out.posterior))
            }
            DesignStrategy::Random => (xi0, 0, None),
        };
        let _ = codiff_posterior;

        // pre-experiment posterior variances for the information-gain proxy
        let eig_proxy = options.proxy_prior_var.as_ref().map(|pv| {
            let hard = builder.build(&design, MaskMode::Hard)?;
            let vars: Vec<f64> = (0..2 * n)
                .map(|i| {
                    let prior = pv[i];
                    1.0 / (1.0 / prior + coverage_counts[i % n] / (noise.sigma() * noise.sigma()))
                })
                .collect();
            let w = hard.weights();
            let weights: Vec<f64> = w.iter().chain(w.iter()).cloned().collect();
            eig_gaussian_oracle_coords(&vars, &weights, noise.sigma())
        }).transpose()?;

        // run the experiment with the hard mask
        let hard = builder.build(&design, MaskMode::Hard)?;
        let op = ForwardOperator::new(hard.clone());
        let y = source.acquire(&op, noise, experiment_seed(seed, k, 2))?;
        dataset.push(MeasurementRecord::new(
            design.clone(),
            y,
            noise.sigma(),
            builder,
        )?)?;

        let before = union_mask.as_ref().map_or(0.0, |m| m.sampled_fraction());
        let merged = match union_mask.take() {
            None => hard.clone(),
            Some(u) => accumulate_masks(&[u, hard.clone()])?,
        };
        let fraction = merged.sampled_fraction();
        let new_coverage = fraction - before;
        union_mask = Some(merged);
        for (i, &w) in hard.weights().iter().enumerate() {
            coverage_counts[i] += w * w;
        }

        let entropy = options.proxy_prior_var.as_ref().map(|pv| {
            (0..2 * n)
                .map(|i| {
                    let var = 1.0
                        / (1.0 / pv[i]
                            + coverage_counts[i % n] / (noise.sigma() * noise.sigma()));
                    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln()
                })
                .sum::<f64>()
        });

        // posterior metrics (always for the final experiment so the outcome
        // carries a reconstruction)
        let budget_hit = fraction >= config.budget_fraction;
        let last = k == config.outer_experiments || budget_hit;
        let mut psnr_v = None;
        let mut ssim_v = None;
        let mut dice_v = None;
        if options.metrics_every || last {
            let ens = sample_posterior(
                score_model,
                &dataset,
                schedule,
                options.metric_steps.unwrap_or(config.inner_steps),
                config.particles,
                experiment_seed(seed, k, 3),
                config.use_hessian,
            )?;
            if let Some(truth) = options.truth_metrics {
                let mean = ens.posterior_mean_state(rows, cols)?;
                let report = evaluate(truth, &mean, true)?;
                psnr_v = Some(report.psnr);
                ssim_v = Some(report.ssim);
                dice_v = report.dice;
            }
            posterior = Some(ens);
        }

        logs.push(ExperimentLog {
            k,
            design: design.values().to_vec(),
            sampled_fraction: fraction,
            new_coverage,
            eig_proxy,
            entropy,
            psnr: psnr_v,
            ssim: ssim_v,
            dice: dice_v,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            skipped_steps: skipped,
        });

        if budget_hit {
            stopped_early = k < config.outer_experiments;
            break;
        }
        if let (Some(target), Some(s)) = (config.ssim_stop, ssim_v) {
            if s >= target {
                stopped_early = k < config.outer_experiments;
                break;
            }
        }
    }

    let posterior = match posterior {
        Some(p) => p,
        None => sample_posterior(
            score_model,
            &dataset,
            schedule,
            options.metric_steps.unwrap_or(config.inner_steps),
            config.particles,
            experiment_seed(seed, logs.len(), 3),
            config.use_hessian,
        )?,
    };
    let posterior_mean = posterior.posterior_mean_state(rows, cols)?;
    let final_fraction = union_mask.map_or(0.0, |m| m.sampled_fraction());
    Ok(SequentialOutcome {
        trace: BedTrace {
            experiments: logs,
            final_fraction,
            stopped_early,
        },
        dataset,
        posterior,
        posterior_mean,
    })
}
