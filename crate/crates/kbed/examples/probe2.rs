// Probe the optimized sequential run on the geometric phantom family.
use kbed::design::{
    kspace_marginal_variance, run_sequential_bed, DesignStrategy, OptimizerConfig,
    SequentialOptions,
};
use kbed::diffusion::NoiseSchedule;
use kbed::forward::NoiseModel;
use kbed::mask::{MaskBuilder, MaskConfig, TrajectoryPattern};
use kbed::prior::{default_phantom_spec, generate_phantom, GaussianMixturePrior, PhantomSpec};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn family_spec(rows: usize, cols: usize, member: u64) -> PhantomSpec {
    let mut spec = default_phantom_spec(rows, cols);
    spec.ellipses.push(kbed::prior::Ellipse {
        center: (rows as f64 / 2.0, cols as f64 / 2.0),
        axes: (rows as f64 * 0.38, cols as f64 * 0.06),
        angle: 3.0 * std::f64::consts::PI / 4.0,
        intensity: 1.0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0xfa417 ^ member.wrapping_mul(0x9e3779b9));
    let scale = rows.min(cols) as f64;
    for e in spec.ellipses.iter_mut().skip(1) {
        e.intensity *= 0.3 + 1.4 * rng.random::<f64>();
        e.center.0 += (rng.random::<f64>() - 0.5) * 0.24 * scale;
        e.center.1 += (rng.random::<f64>() - 0.5) * 0.24 * scale;
        e.axes.0 *= 0.7 + 0.6 * rng.random::<f64>();
        e.axes.1 *= 0.7 + 0.6 * rng.random::<f64>();
        e.angle += (rng.random::<f64>() - 0.5) * 0.6;
    }
    for a in spec.anomalies.iter_mut() {
        a.center.0 += (rng.random::<f64>() - 0.5) * 0.2 * scale;
        a.center.1 += (rng.random::<f64>() - 0.5) * 0.2 * scale;
    }
    spec
}

fn main() {
    let rows = 32;
    let cols = 32;
    let schedule = NoiseSchedule::default();
    let sigma = 0.1;
    let comp_var = 0.01;
    let means: Vec<Array1<f64>> = (0..16u64)
        .map(|m| generate_phantom(&family_spec(rows, cols, m), m).unwrap().to_vector())
        .collect();
    let prior = GaussianMixturePrior::from_components(means, comp_var, schedule).unwrap();
    let proxy = kspace_marginal_variance(&prior, rows, cols).unwrap();
    let truth = generate_phantom(&family_spec(rows, cols, 999), 999).unwrap();
    let builder = MaskBuilder::new(rows, cols, MaskConfig::default()).unwrap();
    let noise = NoiseModel::new(sigma).unwrap();

    for strategy in [DesignStrategy::Optimized, DesignStrategy::Random] {
        for seed in 0..2u64 {
            let config = OptimizerConfig {
                outer_experiments: 30,
                inner_steps: 150,
                particles: 32,
                contrastive_particles: 32,
                step_size: 0.06,
                momentum: None,
                adaptive: true,
                budget_fraction: 0.25,
                ssim_stop: None,
                use_hessian: true,
            };
            let options = SequentialOptions {
                truth_metrics: Some(&truth),
                proxy_prior_var: Some(proxy.clone()),
                metrics_every: true,
                metric_steps: Some(400),
                strategy,
                pattern: TrajectoryPattern::Radial,
                lines_per_experiment: 1,
            };
            let t0 = Instant::now();
            let out = run_sequential_bed(
                &truth, &prior, &builder, &config, &schedule, &noise, &options, 3000 + seed,
            )
            .unwrap();
            println!(
                "{strategy:?} seed {seed} ({:.0}s): final frac {:.3}",
                t0.elapsed().as_secs_f64(),
                out.trace.final_fraction
            );
            for e in &out.trace.experiments {
                println!(
                    "  k={:2} frac {:.3} ssim {:.4} psnr {:5.2}",
                    e.k,
                    e.sampled_fraction,
                    e.ssim.unwrap(),
                    e.psnr.unwrap()
                );
            }
        }
    }
}
