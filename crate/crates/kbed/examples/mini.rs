// Stability probe: reconstruction quality vs coverage for random records.
use kbed::diffusion::{sample_posterior, NoiseSchedule};
use kbed::field::{ExperimentDataset, MeasurementRecord, TargetState};
use kbed::forward::{sample_measurement, ForwardOperator, NoiseModel};
use kbed::mask::{DesignParameter, MaskBuilder, MaskConfig, MaskMode};
use kbed::metrics::evaluate;
use kbed::prior::{default_phantom_spec, generate_phantom, GaussianMixturePrior, PhantomSpec};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Family member: the default phantom plus an elongated diagonal structure,
/// with the geometry and intensity of every interior structure jittered
/// independently per member.
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
    // keep the outer shell fixed; jitter interior structures independently
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

fn family_state(rows: usize, cols: usize, member: u64) -> TargetState {
    kbed::prior::benchmark_member(rows, cols, member).unwrap()
}

fn main() {
    let rows = 32;
    let cols = 32;
    let schedule = NoiseSchedule::default();
    let comp_var: f64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let sigma: f64 = std::env::args().nth(2).unwrap().parse().unwrap();
    let steps: usize = std::env::args().nth(3).unwrap().parse().unwrap();
    let hess: bool = std::env::args().nth(4).unwrap().parse().unwrap();
    let n_comp: u64 = std::env::args().nth(5).unwrap().parse().unwrap();

    let means: Vec<Array1<f64>> = (0..n_comp)
        .map(|m| family_state(rows, cols, m).to_vector())
        .collect();
    let prior = GaussianMixturePrior::from_components(means, comp_var, schedule).unwrap();
    let truth = family_state(rows, cols, 999);
    let builder = MaskBuilder::new(rows, cols, MaskConfig::default()).unwrap();
    let noise = NoiseModel::new(sigma).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ds = ExperimentDataset::new(builder.clone());
    let mut masks = Vec::new();
    let budgets = [0.04, 0.08, 0.15, 0.25];
    let mut bi = 0;
    for k in 0..60u64 {
        let xi = DesignParameter::radial(vec![rng.random::<f64>() * std::f64::consts::PI]);
        let mask = builder.build(&xi, MaskMode::Hard).unwrap();
        let op = ForwardOperator::new(mask.clone());
        let y = sample_measurement(&op, &truth, &noise, 100 + k).unwrap();
        ds.push(MeasurementRecord::new(xi, y, sigma, &builder).unwrap())
            .unwrap();
        masks.push(mask);
        let frac = kbed::mask::accumulate_masks(&masks)
            .unwrap()
            .sampled_fraction();
        if bi < budgets.len() && frac >= budgets[bi] {
            bi += 1;
            let t0 = Instant::now();
            let ens = sample_posterior(&prior, &ds, &schedule, steps, 32, 5, hess).unwrap();
            let mean = ens.posterior_mean_state(rows, cols).unwrap();
            let rep = evaluate(&truth, &mean, true).unwrap();
            println!(
                "records {:2} frac {frac:.3}: ssim {:.4} psnr {:6.2} dice {:.3} ({:.1}s)",
                ds.step(),
                rep.ssim,
                rep.psnr,
                rep.dice.unwrap(),
                t0.elapsed().as_secs_f64()
            );
        }
        if bi == budgets.len() {
            break;
        }
    }
}
