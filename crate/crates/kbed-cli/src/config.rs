//! Run configuration: one JSON file describing the grid, the acquisition
//! noise, the prior, the trajectory family and the optimizer knobs.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use kbed::design::OptimizerConfig;
use kbed::diffusion::NoiseSchedule;
use kbed::mask::{MaskConfig, TrajectoryPattern};
use kbed::prior::PhantomSpec;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; mandatory so every artifact is reproducible.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub rows: usize,
    pub cols: usize,
    pub noise_sigma: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub prior: PriorSection,
    /// Explicit phantom spec for the ground truth; defaults to a member of
    /// the benchmark family.
    pub phantom: Option<PhantomSpec>,
    /// Which family member acts as the (held-out) ground truth.
    #[serde(default = "default_truth_member")]
    pub truth_member: u64,
    #[serde(default = "default_true")]
    pub metrics_every: bool,
    pub metric_steps: Option<usize>,
    /// Budget fractions for the sweep verb.
    #[serde(default)]
    pub sweep: Vec<f64>,
    /// Seeds for sweep / compare-random; defaults derived from `seed`.
    #[serde(default)]
    pub run_seeds: Vec<u64>,
    #[serde(default)]
    pub training: TrainingSection,
}

fn default_truth_member() -> u64 {
    999
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t0: f64,
    pub tf: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        Self {
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            t0: s.t0,
            tf: s.tf,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub pattern: TrajectoryPattern,
    pub lines_per_experiment: usize,
    pub width: f64,
    pub temperature: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        let c = MaskConfig::default();
        Self {
            pattern: TrajectoryPattern::Radial,
            lines_per_experiment: 1,
            width: c.width,
            temperature: c.temperature,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub experiments: usize,
    pub inner_steps: usize,
    pub particles: usize,
    pub contrastive_particles: usize,
    pub step_size: f64,
    pub momentum: Option<f64>,
    pub adaptive: bool,
    pub budget_fraction: f64,
    pub ssim_stop: Option<f64>,
    pub use_hessian: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            experiments: 30,
            inner_steps: 150,
            particles: 32,
            contrastive_particles: 32,
            step_size: 0.06,
            momentum: None,
            adaptive: true,
            budget_fraction: 0.25,
            ssim_stop: None,
            use_hessian: true,
        }
    }
}

impl OptimizerSection {
    pub fn to_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            outer_experiments: self.experiments,
            inner_steps: self.inner_steps,
            particles: self.particles,
            contrastive_particles: self.contrastive_particles,
            step_size: self.step_size,
            momentum: self.momentum,
            adaptive: self.adaptive,
            budget_fraction: self.budget_fraction,
            ssim_stop: self.ssim_stop,
            use_hessian: self.use_hessian,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorSection {
    /// Gaussian mixture over benchmark-family phantoms with isotropic
    /// per-component variance; scores are exact.
    Analytic {
        components: usize,
        component_var: f64,
    },
    /// Standard normal prior (calibration runs).
    Standard,
    /// A denoiser trained with the train-prior verb.
    Trained { path: PathBuf },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub time_samples: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            samples: 64,
            epochs: 200,
            batch_size: 32,
            time_samples: 4,
            learning_rate: 1e-3,
            hidden_dim: 64,
        }
    }
}

impl RunConfig {
    /// Load and validate; error messages carry the parse location.
    pub fn load(path: &Path) -> Result<Self, String> {
        if !path.exists() {
            return Err(format!("config not found: {}", path.display()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        if self.rows == 0 || self.cols == 0 {
            return Err("rows and cols must be positive".into());
        }
        if !(self.noise_sigma > 0.0) {
            return Err("noise_sigma must be positive".into());
        }
        if let PriorSection::Trained { path } = &self.prior {
            if !path.exists() {
                return Err(format!("score model file not found: {}", path.display()));
            }
        }
        if self.sweep.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err("sweep fractions must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, kbed::Error> {
        NoiseSchedule::new(
            self.schedule.beta_min,
            self.schedule.beta_max,
            self.schedule.t0,
            self.schedule.tf,
        )
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            width: self.mask.width,
            temperature: self.mask.temperature,
        }
    }

    /// Seeds used by sweep and compare-random runs.
    pub fn effective_run_seeds(&self, default_count: usize) -> Vec<u64> {
        if self.run_seeds.is_empty() {
            (0..default_count as u64).map(|i| self.seed + i).collect()
        } else {
            self.run_seeds.clone()
        }
    }
}
