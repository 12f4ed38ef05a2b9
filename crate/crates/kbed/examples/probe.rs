// Temporary diagnostic probe for the sequential loop criteria.
use kbed::design::{
    kspace_marginal_variance, run_sequential_bed, DesignStrategy, OptimizerConfig,
    SequentialOptions,
};
use kbed::diffusion::NoiseSchedule;
use kbed::forward::NoiseModel;
use kbed::mask::{MaskBuilder, MaskConfig, TrajectoryPattern};
use kbed::prior::{default_phantom_spec, generate_phantom, GaussianMixturePrior};
use ndarray::Array1;
use std::time::Instant;

fn lobe_spec(rows: usize, cols: usize, strength: f64) -> kbed::prior::PhantomSpec {
    let mut spec = default_phantom_spec(rows, cols);
    spec.ellipses.push(kbed::prior::Ellipse {
        center: (rows as f64 / 2.0, cols as f64 / 2.0),
        axes: (rows as f64 * 0.38, cols as f64 * 0.06),
        angle: 3.0 * std::f64::consts::PI / 4.0,
        intensity: strength,
    });
    spec
}

fn lobe_phantom_means(rows: usize, cols: usize) -> Vec<Array1<f64>> {
    let mut means = Vec::new();
    for (i, strength) in [-1.2f64, -0.5, 0.2, 0.9, 1.6].iter().enumerate() {
        let spec = lobe_spec(rows, cols, *strength);
        means.push(generate_phantom(&spec, 17 + i as u64).unwrap().to_vector());
    }
    means
}

fn truth_state(rows: usize, cols: usize) -> kbed::field::TargetState {
    generate_phantom(&lobe_spec(rows, cols, 0.7), 99).unwrap()
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "budget".into());
    match which.as_str() {
        "budget" => budget_probe(),
        "sweep" => sweep_probe(),
        _ => panic!("unknown probe"),
    }
}

fn budget_probe() {
    // criterion-7 geometry: 64x64, 15 radial lines per experiment
    let rows = 64;
    let cols = 64;
    let schedule = NoiseSchedule::default();
    let means = lobe_phantom_means(rows, cols);
    let prior = GaussianMixturePrior::from_components(means, 0.05, schedule).unwrap();
    let proxy = kspace_marginal_variance(&prior, rows, cols).unwrap();
    let truth = truth_state(rows, cols);
    let noise = NoiseModel::new(0.4).unwrap();
    for width in [0.5] {
        let builder = MaskBuilder::new(
            rows,
            cols,
            MaskConfig {
                width,
                temperature: 0.5,
            },
        )
        .unwrap();
        for seed in 0..4u64 {
            let config = OptimizerConfig {
                outer_experiments: 20,
                inner_steps: 100,
                particles: 16,
                contrastive_particles: 16,
                step_size: 0.05,
                momentum: None,
                adaptive: true,
                budget_fraction: 0.25,
                ssim_stop: None,
                use_hessian: false,
            };
            let options = SequentialOptions {
                truth_metrics: None,
                proxy_prior_var: Some(proxy.clone()),
                metrics_every: false,
                metric_steps: None,
                strategy: DesignStrategy::Optimized,
                pattern: TrajectoryPattern::Radial,
                lines_per_experiment: 15,
            };
            let t0 = Instant::now();
            let out = run_sequential_bed(
                &truth, &prior, &builder, &config, &schedule, &noise, &options, 11 + seed,
            )
            .unwrap();
            let fr: Vec<String> = out
                .trace
                .experiments
                .iter()
                .map(|e| format!("{:.3}", e.sampled_fraction))
                .collect();
            println!(
                "width {width} seed {seed}: k={} final {:.4} [{}] wall {:.0}s",
                out.trace.experiments.len(),
                out.trace.final_fraction,
                fr.join(" "),
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

fn sweep_probe() {
    // criterion-8/9 geometry: 32x32 phantom mixture, 1 radial line per exp
    let rows = 32;
    let cols = 32;
    let schedule = NoiseSchedule::default();
    let means = lobe_phantom_means(rows, cols);
    let prior = GaussianMixturePrior::from_components(means, 0.15, schedule).unwrap();
    let proxy = kspace_marginal_variance(&prior, rows, cols).unwrap();
    let truth = truth_state(rows, cols);
    let builder = MaskBuilder::new(rows, cols, MaskConfig::default()).unwrap();
    let noise = NoiseModel::new(0.3).unwrap();

    for frac in [0.04, 0.08, 0.15, 0.25] {
        let mut ssims = Vec::new();
        let mut psnrs = Vec::new();
        let mut deltas = Vec::new();
        for seed in 0..3u64 {
            let config = OptimizerConfig {
                outer_experiments: 30,
                inner_steps: 120,
                particles: 32,
                contrastive_particles: 32,
                step_size: 0.06,
                momentum: None,
                adaptive: true,
                budget_fraction: frac,
                ssim_stop: None,
                use_hessian: false,
            };
            let t0 = Instant::now();
            let opt = run_sequential_bed(
                &truth,
                &prior,
                &builder,
                &config,
                &schedule,
                &noise,
                &SequentialOptions {
                    truth_metrics: Some(&truth),
                    proxy_prior_var: Some(proxy.clone()),
                    metrics_every: false,
                    metric_steps: None,
                    strategy: DesignStrategy::Optimized,
                    pattern: TrajectoryPattern::Radial,
                    lines_per_experiment: 1,
                },
                1000 + seed,
            )
            .unwrap();
            let rnd = run_sequential_bed(
                &truth,
                &prior,
                &builder,
                &config,
                &schedule,
                &noise,
                &SequentialOptions {
                    truth_metrics: Some(&truth),
                    proxy_prior_var: Some(proxy.clone()),
                    metrics_every: false,
                    metric_steps: None,
                    strategy: DesignStrategy::Random,
                    pattern: TrajectoryPattern::Radial,
                    lines_per_experiment: 1,
                },
                1000 + seed,
            )
            .unwrap();
            let so = opt.trace.experiments.last().unwrap().ssim.unwrap();
            let sr = rnd.trace.experiments.last().unwrap().ssim.unwrap();
            let po = opt.trace.experiments.last().unwrap().psnr.unwrap();
            ssims.push(so);
            psnrs.push(po);
            deltas.push(so - sr);
            println!(
                "  frac {frac} seed {seed}: opt ssim {so:.4} psnr {po:.2} | rand ssim {sr:.4} | k_opt {} frac_end {:.3} wall {:.1}s",
                opt.trace.experiments.len(),
                opt.trace.final_fraction,
                t0.elapsed().as_secs_f64()
            );
        }
        ssims.sort_by(|a, b| a.partial_cmp(b).unwrap());
        psnrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "frac {frac}: median ssim {:.4} median psnr {:.2} median delta {:.4}",
            ssims[1], psnrs[1], deltas[1]
        );
    }
}
