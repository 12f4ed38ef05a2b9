//! Verb implementations: run one experiment schedule, sweep budgets,
//! compare against random designs, train a prior, evaluate metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array1;

use kbed::design::{
    kspace_marginal_variance, run_sequential_bed, DesignStrategy, SequentialOptions,
    SequentialOutcome,
};
use kbed::export::{read_pgm, write_mask_pgm, write_pgm};
use kbed::field::TargetState;
use kbed::forward::NoiseModel;
use kbed::mask::{DesignParameter, MaskBuilder, MaskMode};
use kbed::metrics::{dice, psnr, ssim};
use kbed::prior::{
    benchmark_base_spec, generate_phantom, train_denoiser, vary_spec, DenoiserScoreModel,
    GaussianMixturePrior, ScoreModel, TrainingConfig,
};

use crate::config::{PriorSection, RunConfig};
use crate::CliError;

pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub particles: Option<usize>,
}

struct Setup {
    truth: TargetState,
    score_model: Box<dyn ScoreModel>,
    proxy: Option<Array1<f64>>,
    builder: MaskBuilder,
    noise: NoiseModel,
}

fn build_setup(cfg: &RunConfig) -> Result<Setup, CliError> {
    let schedule = cfg.schedule()?;
    let (rows, cols) = (cfg.rows, cfg.cols);
    let builder = MaskBuilder::new(rows, cols, cfg.mask_config())?;
    let noise = NoiseModel::new(cfg.noise_sigma)?;
    let base = benchmark_base_spec(rows, cols);
    let truth = match &cfg.phantom {
        Some(spec) => generate_phantom(spec, cfg.truth_member)?,
        None => generate_phantom(&vary_spec(&base, cfg.truth_member), cfg.truth_member)?,
    };
    let (score_model, proxy): (Box<dyn ScoreModel>, Option<Array1<f64>>) = match &cfg.prior {
        PriorSection::Analytic {
            components,
            component_var,
        } => {
            let means: Vec<Array1<f64>> = (0..*components as u64)
                .map(|m| Ok(generate_phantom(&vary_spec(&base, m), m)?.to_vector()))
                .collect::<Result<_, kbed::Error>>()?;
            let prior = GaussianMixturePrior::from_components(means, *component_var, schedule)?;
            let proxy = kspace_marginal_variance(&prior, rows, cols)?;
            (Box::new(prior), Some(proxy))
        }
        PriorSection::Standard => {
            let dim = TargetState::state_len(rows, cols);
            let prior = GaussianMixturePrior::standard(dim, schedule)?;
            (Box::new(prior), Some(Array1::ones(2 * rows * cols)))
        }
        PriorSection::Trained { path } => {
            let model = DenoiserScoreModel::load(path)?;
            if model.dim() != TargetState::state_len(rows, cols) {
                return Err(CliError::Config(format!(
                    "score model dimension {} does not match a {}x{} grid",
                    model.dim(),
                    rows,
                    cols
                )));
            }
            (Box::new(model), None)
        }
    };
    Ok(Setup {
        truth,
        score_model,
        proxy,
        builder,
        noise,
    })
}

fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) {
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(steps) = ov.steps {
        cfg.optimizer.inner_steps = steps;
    }
    if let Some(particles) = ov.particles {
        cfg.optimizer.particles = particles;
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn metrics_csv(outcome: &SequentialOutcome) -> String {
    let mut csv = String::from("k,fraction,psnr,ssim,dice\n");
    for e in &outcome.trace.experiments {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let _ = writeln!(
            csv,
            "{},{:.6},{},{},{}",
            e.k,
            e.sampled_fraction,
            fmt(e.psnr),
            fmt(e.ssim),
            fmt(e.dice)
        );
    }
    csv
}

fn run_one(
    cfg: &RunConfig,
    setup: &Setup,
    strategy: DesignStrategy,
    seed: u64,
    budget_fraction: Option<f64>,
    metrics_every: bool,
) -> Result<SequentialOutcome, CliError> {
    let schedule = cfg.schedule()?;
    let mut opt = cfg.optimizer.to_config();
    if let Some(b) = budget_fraction {
        opt.budget_fraction = b;
    }
    opt.validate()?;
    let options = SequentialOptions {
        truth_metrics: Some(&setup.truth),
        proxy_prior_var: setup.proxy.clone(),
        metrics_every,
        metric_steps: cfg.metric_steps,
        strategy,
        pattern: cfg.mask.pattern,
        lines_per_experiment: cfg.mask.lines_per_experiment,
    };
    Ok(run_sequential_bed(
        &setup.truth,
        setup.score_model.as_ref(),
        &setup.builder,
        &opt,
        &schedule,
        &setup.noise,
        &options,
        seed,
    )?)
}

/// `run`: one full acquisition schedule plus all artifacts.
pub fn run_experiment(config_path: &Path, ov: &Overrides) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path).map_err(CliError::Config)?;
    apply_overrides(&mut cfg, ov);
    let setup = build_setup(&cfg)?;
    let out = out_dir(&cfg);
    std::fs::create_dir_all(&out)?;

    let outcome = run_one(
        &cfg,
        &setup,
        DesignStrategy::Optimized,
        cfg.seed,
        None,
        cfg.metrics_every,
    )?;

    std::fs::write(
        out.join("trace.json"),
        serde_json::to_string_pretty(&outcome.trace).map_err(|e| CliError::Other(e.to_string()))?,
    )?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&outcome))?;

    let masks_dir = out.join("masks");
    std::fs::create_dir_all(&masks_dir)?;
    let mut union: Option<kbed::mask::MaskField> = None;
    for (e, record) in outcome
        .trace
        .experiments
        .iter()
        .zip(outcome.dataset.records())
    {
        let mask = setup.builder.build(record.design(), MaskMode::Hard)?;
        write_mask_pgm(&masks_dir.join(format!("mask_k{:02}.pgm", e.k)), &mask)?;
        union = Some(match union.take() {
            None => mask,
            Some(u) => kbed::mask::accumulate_masks(&[u, mask])?,
        });
    }
    if let Some(u) = union {
        write_mask_pgm(&out.join("mask_union.pgm"), &u)?;
    }
    write_pgm(&out.join("truth.pgm"), &setup.truth.image().magnitude())?;
    write_pgm(&out.join("truth_seg.pgm"), setup.truth.seg())?;
    write_pgm(
        &out.join("posterior_mean.pgm"),
        &outcome.posterior_mean.image().magnitude(),
    )?;
    write_pgm(&out.join("posterior_seg.pgm"), outcome.posterior_mean.seg())?;

    let last = outcome.trace.experiments.last();
    println!(
        "run complete: {} experiments, sampled fraction {:.4}, ssim {}, artifacts in {}",
        outcome.trace.experiments.len(),
        outcome.trace.final_fraction,
        last.and_then(|e| e.ssim)
            .map_or("n/a".into(), |s| format!("{s:.4}")),
        out.display()
    );
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// `sweep`: one run per (budget fraction, seed); aggregates medians against
/// the acceleration factor `1 / fraction`.
pub fn sweep_acceleration(config_path: &Path, ov: &Overrides) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path).map_err(CliError::Config)?;
    apply_overrides(&mut cfg, ov);
    if cfg.sweep.is_empty() {
        return Err(CliError::Config("sweep fractions list is empty".into()));
    }
    let setup = build_setup(&cfg)?;
    let out = out_dir(&cfg);
    std::fs::create_dir_all(&out)?;
    let seeds = cfg.effective_run_seeds(3);

    let mut csv = String::from("fraction,acceleration,median_ssim,median_psnr,median_fraction\n");
    for &frac in &cfg.sweep {
        let mut ssims = Vec::new();
        let mut psnrs = Vec::new();
        let mut fracs = Vec::new();
        for &seed in &seeds {
            let sub = out.join(format!("f{:03}", (frac * 1000.0).round() as u32))
                .join(format!("s{seed}"));
            std::fs::create_dir_all(&sub)?;
            let outcome = run_one(
                &cfg,
                &setup,
                DesignStrategy::Optimized,
                seed,
                Some(frac),
                false,
            )?;
            std::fs::write(sub.join("metrics.csv"), metrics_csv(&outcome))?;
            write_pgm(
                &sub.join("posterior_mean.pgm"),
                &outcome.posterior_mean.image().magnitude(),
            )?;
            let last = outcome.trace.experiments.last().unwrap();
            ssims.push(last.ssim.unwrap_or(f64::NAN));
            psnrs.push(last.psnr.unwrap_or(f64::NAN));
            fracs.push(outcome.trace.final_fraction);
        }
        let _ = writeln!(
            csv,
            "{:.4},{:.2},{:.6},{:.6},{:.4}",
            frac,
            1.0 / frac,
            median(&mut ssims),
            median(&mut psnrs),
            median(&mut fracs)
        );
    }
    std::fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    println!("sweep complete: artifacts in {}", out.display());
    Ok(())
}

/// `compare-random`: paired optimized/random runs over shared seeds.
pub fn compare_random(config_path: &Path, ov: &Overrides) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path).map_err(CliError::Config)?;
    apply_overrides(&mut cfg, ov);
    let setup = build_setup(&cfg)?;
    let out = out_dir(&cfg);
    std::fs::create_dir_all(&out)?;
    let seeds = cfg.effective_run_seeds(10);

    let mut csv = String::from(
        "seed,fraction_opt,fraction_rand,ssim_opt,ssim_rand,ssim_delta,psnr_opt,psnr_rand,psnr_delta\n",
    );
    let mut deltas = Vec::new();
    for &seed in &seeds {
        let opt = run_one(&cfg, &setup, DesignStrategy::Optimized, seed, None, false)?;
        let rnd = run_one(&cfg, &setup, DesignStrategy::Random, seed, None, false)?;
        let so = opt.trace.experiments.last().and_then(|e| e.ssim).unwrap_or(f64::NAN);
        let sr = rnd.trace.experiments.last().and_then(|e| e.ssim).unwrap_or(f64::NAN);
        let po = opt.trace.experiments.last().and_then(|e| e.psnr).unwrap_or(f64::NAN);
        let pr = rnd.trace.experiments.last().and_then(|e| e.psnr).unwrap_or(f64::NAN);
        deltas.push(so - sr);
        let _ = writeln!(
            csv,
            "{seed},{:.4},{:.4},{so:.6},{sr:.6},{:.6},{po:.4},{pr:.4},{:.4}",
            opt.trace.final_fraction,
            rnd.trace.final_fraction,
            so - sr,
            po - pr
        );
    }
    std::fs::write(out.join("compare.csv"), &csv)?;
    print!("{csv}");
    println!("median ssim delta (optimized - random): {:.6}", median(&mut deltas));
    Ok(())
}

/// `train-prior`: fit a denoiser on benchmark-family states and save it.
pub fn train_prior(config_path: &Path, ov: &Overrides) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path).map_err(CliError::Config)?;
    apply_overrides(&mut cfg, ov);
    let out = out_dir(&cfg);
    std::fs::create_dir_all(&out)?;
    let base = benchmark_base_spec(cfg.rows, cfg.cols);
    let data: Vec<TargetState> = (0..cfg.training.samples as u64)
        .map(|m| generate_phantom(&vary_spec(&base, m), m))
        .collect::<Result<_, kbed::Error>>()?;
    let sched = cfg.schedule()?;
    let tc = TrainingConfig {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        time_samples: cfg.training.time_samples,
        learning_rate: cfg.training.learning_rate,
        hidden_dim: cfg.training.hidden_dim,
        beta_min: sched.beta_min,
        beta_max: sched.beta_max,
        t0: sched.t0,
        tf: sched.tf,
        ..TrainingConfig::default()
    };
    let model = train_denoiser(&data, &tc, cfg.seed)?;
    let path = out.join("score_model.bin");
    model.save(&path)?;
    let mut loss_csv = String::from("epoch,loss\n");
    for (i, l) in model.loss_history.iter().enumerate() {
        let _ = writeln!(loss_csv, "{i},{l:.8}");
    }
    std::fs::write(out.join("loss.csv"), loss_csv)?;
    println!(
        "trained on {} states for {} epochs; model at {}",
        cfg.training.samples,
        cfg.training.epochs,
        path.display()
    );
    Ok(())
}

/// `eval-metrics`: compare two magnitude images (plus optional segmentations)
/// from PGM files.
pub fn eval_metrics(
    reference: &Path,
    estimate: &Path,
    reference_seg: Option<&Path>,
    estimate_seg: Option<&Path>,
) -> Result<(), CliError> {
    let r = read_pgm(reference)?;
    let e = read_pgm(estimate)?;
    let p = psnr(&r, &e)?;
    let s = ssim(&r, &e)?;
    println!("psnr_db={p:.4}");
    println!("ssim={s:.6}");
    match (reference_seg, estimate_seg) {
        (Some(rs), Some(es)) => {
            let rm = read_pgm(rs)?.mapv(|v| v > 0.5);
            let em = read_pgm(es)?.mapv(|v| v > 0.5);
            println!("dice={:.6}", dice(&rm, &em)?);
        }
        (None, None) => {}
        _ => {
            return Err(CliError::Config(
                "both --reference-seg and --estimate-seg are required for Dice".into(),
            ))
        }
    }
    Ok(())
}

/// Sanity helper shared by tests: a tiny deterministic design.
#[allow(dead_code)]
pub fn debug_design() -> DesignParameter {
    DesignParameter::radial(vec![0.5])
}
