//! Small trainable score model fitted by denoising score matching.
//!
//! The network predicts the noise draw from the perturbed state and a
//! sinusoidal embedding of the diffusion time; the score is recovered as
//! `-eps_hat / sqrt(1 - alpha_bar)`. Training follows the usual recipe:
//! Adam, cosine learning-rate decay to 1% of the initial rate over 95% of
//! the steps, gradient clipping at global norm 1, and an EMA copy of the
//! parameters that becomes the returned model.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, T_FLOOR};
use crate::error::{Error, Result};
use crate::field::TargetState;
use crate::prior::ScoreModel;

const TIME_FREQS: usize = 8;
const MAGIC: &[u8; 8] = b"KBSM0001";

/// Weighting of the score-matching objective over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaWeighting {
    /// lambda(t) = 1; weights small times heavily.
    Uniform,
    /// lambda(t) = 1 - alpha_bar(t); the epsilon-prediction loss.
    Variance,
}

/// Training hyperparameters. Defaults follow the reference recipe
/// (4000 epochs, batch 32, 32 time samples, Adam at 2e-4, EMA 0.99,
/// beta in [0.02, 5.0] over [0, 2]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Independent (t, eps) draws per data item in each batch.
    pub time_samples: usize,
    pub learning_rate: f64,
    pub ema_rate: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t0: f64,
    pub tf: f64,
    pub lambda_weighting: LambdaWeighting,
    pub hidden_dim: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            batch_size: 32,
            time_samples: 32,
            learning_rate: 2e-4,
            ema_rate: 0.99,
            beta_min: 0.02,
            beta_max: 5.0,
            t0: 0.0,
            tf: 2.0,
            lambda_weighting: LambdaWeighting::Variance,
            hidden_dim: 64,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<NoiseSchedule> {
        if self.epochs == 0 || self.batch_size == 0 || self.time_samples == 0 {
            return Err(Error::InvalidParameter(
                "epochs, batch_size and time_samples must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter("bad learning rate".into()));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::InvalidParameter("ema_rate must be in [0, 1)".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidParameter("hidden_dim must be positive".into()));
        }
        NoiseSchedule::new(self.beta_min, self.beta_max, self.t0, self.tf)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

impl Mlp {
    fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let scale1 = (2.0 / input as f64).sqrt();
        let scale2 = (2.0 / hidden as f64).sqrt();
        let draw = |s: f64, r: &mut R| -> f64 {
            let e: f64 = StandardNormal.sample(r);
            s * e
        };
        Self {
            w1: Array2::from_shape_fn((input, hidden), |_| draw(scale1, rng)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_fn((hidden, hidden), |_| draw(scale2, rng)),
            b2: Array1::zeros(hidden),
            w3: Array2::from_shape_fn((hidden, output), |_| draw(scale2, rng)),
            b3: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
            w3: Array2::zeros(self.w3.dim()),
            b3: Array1::zeros(self.b3.len()),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let a1 = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let a2 = (a1.dot(&self.w2) + &self.b2).mapv(f64::tanh);
        let out = a2.dot(&self.w3) + &self.b3;
        (a1, a2, out)
    }

    /// Gradients of the weighted squared error `sum_b w_b ||out_b - target_b||^2 / B`.
    fn backward(
        &self,
        x: &Array2<f64>,
        a1: &Array2<f64>,
        a2: &Array2<f64>,
        out: &Array2<f64>,
        target: &Array2<f64>,
        row_weights: &Array1<f64>,
    ) -> Mlp {
        let batch = x.nrows() as f64;
        let mut dout = out - target;
        for (mut row, &w) in dout.axis_iter_mut(Axis(0)).zip(row_weights.iter()) {
            row.mapv_inplace(|v| 2.0 * w * v / batch);
        }
        let dw3 = a2.t().dot(&dout);
        let db3 = dout.sum_axis(Axis(0));
        let da2 = dout.dot(&self.w3.t());
        let dz2 = &da2 * &a2.mapv(|v| 1.0 - v * v);
        let dw2 = a1.t().dot(&dz2);
        let db2 = dz2.sum_axis(Axis(0));
        let da1 = dz2.dot(&self.w2.t());
        let dz1 = &da1 * &a1.mapv(|v| 1.0 - v * v);
        let dw1 = x.t().dot(&dz1);
        let db1 = dz1.sum_axis(Axis(0));
        Mlp {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
            w3: dw3,
            b3: db3,
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }
}

fn time_features(t: f64, tf: f64) -> [f64; 2 * TIME_FREQS] {
    let mut out = [0.0; 2 * TIME_FREQS];
    for k in 0..TIME_FREQS {
        let omega = std::f64::consts::PI * (1 << k) as f64 / tf;
        out[2 * k] = (omega * t).sin();
        out[2 * k + 1] = (omega * t).cos();
    }
    out
}

/// Denoiser-backed score model (EMA parameters).
#[derive(Debug, Clone)]
pub struct DenoiserScoreModel {
    mlp: Mlp,
    schedule: NoiseSchedule,
    dim: usize,
    /// Mean training loss per epoch, for diagnostics.
    pub loss_history: Vec<f64>,
}

impl DenoiserScoreModel {
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn eps_hat(&self, theta_t: &ArrayView1<f64>, t: f64) -> Array1<f64> {
        let feats = time_features(t, self.schedule.tf);
        let mut x = Array2::zeros((1, self.dim + 2 * TIME_FREQS));
        for (i, &v) in theta_t.iter().enumerate() {
            x[[0, i]] = v;
        }
        for (i, &v) in feats.iter().enumerate() {
            x[[0, self.dim + i]] = v;
        }
        let (_, _, out) = self.mlp.forward(&x);
        out.row(0).to_owned()
    }

    /// Self-describing binary serialization with a version header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        let hidden = self.mlp.b1.len();
        for v in [self.dim as u64, hidden as u64] {
            f.write_all(&v.to_le_bytes())?;
        }
        for v in [
            self.schedule.beta_min,
            self.schedule.beta_max,
            self.schedule.t0,
            self.schedule.tf,
        ] {
            f.write_all(&v.to_le_bytes())?;
        }
        for p in self.mlp.params() {
            f.write_all(&(p.len() as u64).to_le_bytes())?;
            for &v in p {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::MalformedFile {
            path: path.display().to_string(),
            reason: reason.into(),
        };
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("unrecognized magic"));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |f: &mut std::fs::File| -> Result<u64> {
            f.read_exact(&mut u64buf).map_err(|_| bad("truncated"))?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let dim = read_u64(&mut f)? as usize;
        let hidden = read_u64(&mut f)? as usize;
        let mut fbuf = [0u8; 8];
        let mut read_f64 = |f: &mut std::fs::File| -> Result<f64> {
            f.read_exact(&mut fbuf).map_err(|_| bad("truncated"))?;
            Ok(f64::from_le_bytes(fbuf))
        };
        let beta_min = read_f64(&mut f)?;
        let beta_max = read_f64(&mut f)?;
        let t0 = read_f64(&mut f)?;
        let tf = read_f64(&mut f)?;
        let schedule = NoiseSchedule::new(beta_min, beta_max, t0, tf)?;
        let input = dim + 2 * TIME_FREQS;
        let mut mlp = Mlp {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((hidden, dim)),
            b3: Array1::zeros(dim),
        };
        for p in mlp.params_mut() {
            let mut lenbuf = [0u8; 8];
            let mut fh = &f;
            fh.read_exact(&mut lenbuf).map_err(|_| bad("truncated"))?;
            let len = u64::from_le_bytes(lenbuf) as usize;
            if len != p.len() {
                return Err(bad("parameter shape mismatch"));
            }
            let mut vbuf = [0u8; 8];
            for v in p.iter_mut() {
                fh.read_exact(&mut vbuf).map_err(|_| bad("truncated"))?;
                *v = f64::from_le_bytes(vbuf);
            }
        }
        Ok(Self {
            mlp,
            schedule,
            dim,
            loss_history: Vec::new(),
        })
    }
}

impl ScoreModel for DenoiserScoreModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, theta_t: &ArrayView1<f64>, t: f64) -> Array1<f64> {
        let abar = self
            .schedule
            .alpha_bar(t.clamp(self.schedule.t0, self.schedule.tf))
            .expect("clamped time");
        let floor = 1.0 - self.schedule.alpha_bar(T_FLOOR.max(self.schedule.t0)).unwrap();
        let denom = (1.0 - abar).max(floor).sqrt();
        let eps = self.eps_hat(theta_t, t);
        eps.mapv(|v| -v / denom)
    }
}

struct Adam {
    m: Mlp,
    v: Mlp,
    step: usize,
}

impl Adam {
    fn new(template: &Mlp) -> Self {
        Self {
            m: template.zeros_like(),
            v: template.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Mlp, grads: &Mlp, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let bc1 = 1.0 - B1.powi(self.step as i32);
        let bc2 = 1.0 - B2.powi(self.step as i32);
        let gs = grads.params();
        let mut ms = self.m.params_mut();
        let mut vs = self.v.params_mut();
        let mut ps = params.params_mut();
        for k in 0..gs.len() {
            for i in 0..gs[k].len() {
                let g = gs[k][i];
                ms[k][i] = B1 * ms[k][i] + (1.0 - B1) * g;
                vs[k][i] = B2 * vs[k][i] + (1.0 - B2) * g * g;
                let mhat = ms[k][i] / bc1;
                let vhat = vs[k][i] / bc2;
                ps[k][i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

fn clip_global_norm(grads: &mut Mlp, max_norm: f64) {
    let norm_sq: f64 = grads
        .params()
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in grads.params_mut() {
            for v in p.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Cosine decay to 1% of the initial rate over the first 95% of the steps.
fn lr_at(step: usize, total: usize, lr0: f64) -> f64 {
    let decay_steps = ((total as f64) * 0.95).max(1.0);
    let frac = (step as f64 / decay_steps).min(1.0);
    let floor = 0.01 * lr0;
    floor + 0.5 * (lr0 - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Fit a denoiser to joint targets; see [`train_denoiser_states`].
pub fn train_denoiser(
    data: &[TargetState],
    config: &TrainingConfig,
    seed: u64,
) -> Result<DenoiserScoreModel> {
    let states: Vec<Array1<f64>> = data.iter().map(|s| s.to_vector()).collect();
    train_denoiser_states(&states, config, seed)
}

/// Fit a denoiser to raw state vectors by denoising score matching with
/// t ~ U[t0, tf] and the conditional target
/// `-(theta_t - sqrt(abar) theta_0) / (1 - abar)`. Deterministic given
/// the seed; aborts with a diagnostic if the loss stops being finite.
pub fn train_denoiser_states(
    data: &[Array1<f64>],
    config: &TrainingConfig,
    seed: u64,
) -> Result<DenoiserScoreModel> {
    let schedule = config.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::EmptyInput("training data".into()))?;
    let dim = first.len();
    if data.iter().any(|s| s.len() != dim) {
        return Err(Error::shape(format!("{dim}"), "inconsistent state"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = dim + 2 * TIME_FREQS;
    let mut mlp = Mlp::init(input, config.hidden_dim, dim, &mut rng);
    let mut ema = mlp.clone();
    let mut adam = Adam::new(&mlp);

    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let t_lo = schedule.t0.max(T_FLOOR);
    let rows_per_batch = config.batch_size * config.time_samples;
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        // Fisher-Yates shuffle driven by the run RNG
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let rows = chunk.len() * config.time_samples;
            let mut x = Array2::zeros((rows, input));
            let mut target = Array2::zeros((rows, dim));
            let mut row_weights = Array1::ones(rows);
            let mut row = 0;
            for &idx in chunk {
                for _ in 0..config.time_samples {
                    let t = t_lo + (schedule.tf - t_lo) * rng.random::<f64>();
                    let abar = schedule.alpha_bar(t)?;
                    let sa = abar.sqrt();
                    let sb = (1.0 - abar).sqrt();
                    for i in 0..dim {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        x[[row, i]] = sa * data[idx][i] + sb * eps;
                        // epsilon-prediction target
                        target[[row, i]] = eps;
                    }
                    for (i, &v) in time_features(t, schedule.tf).iter().enumerate() {
                        x[[row, dim + i]] = v;
                    }
                    if config.lambda_weighting == LambdaWeighting::Uniform {
                        // lambda = 1 on the score loss equals 1/(1-abar) on
                        // the epsilon loss
                        row_weights[row] = 1.0 / (1.0 - abar);
                    }
                    row += 1;
                }
            }
            let (a1, a2, out) = mlp.forward(&x);
            let mut loss = 0.0;
            for r in 0..rows {
                let mut sq = 0.0;
                for c in 0..dim {
                    let d = out[[r, c]] - target[[r, c]];
                    sq += d * d;
                }
                loss += row_weights[r] * sq;
            }
            loss /= rows as f64;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss became non-finite at epoch {epoch}, step {step} (lr {})",
                    lr_at(step, total_steps, config.learning_rate)
                )));
            }
            epoch_loss += loss * rows as f64;
            epoch_rows += rows;

            let mut grads = mlp.backward(&x, &a1, &a2, &out, &target, &row_weights);
            clip_global_norm(&mut grads, 1.0);
            let lr = lr_at(step, total_steps, config.learning_rate);
            adam.update(&mut mlp, &grads, lr);
            let r = config.ema_rate;
            for (e, p) in ema.params_mut().into_iter().zip(mlp.params()) {
                for (ev, &pv) in e.iter_mut().zip(p.iter()) {
                    *ev = r * *ev + (1.0 - r) * pv;
                }
            }
            step += 1;
            let _ = rows_per_batch;
        }
        loss_history.push(epoch_loss / epoch_rows as f64);
    }

    Ok(DenoiserScoreModel {
        mlp: ema,
        schedule,
        dim,
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{gm_score, GaussianMixturePrior};
    use crate::testutil;
    use ndarray::array;

    fn small_config(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            epochs,
            batch_size: 64,
            time_samples: 2,
            learning_rate: 2e-3,
            hidden_dim: 48,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut rng = testutil::rng(1);
        let data: Vec<Array1<f64>> = (0..32).map(|_| testutil::random_state(2, &mut rng)).collect();
        let cfg = TrainingConfig {
            learning_rate: 0.0,
            ..small_config(2)
        };
        let trained = train_denoiser_states(&data, &cfg, 3).unwrap();
        // reference: same init, no steps (the EMA recombination costs an ulp)
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let init = Mlp::init(2 + 2 * TIME_FREQS, cfg.hidden_dim, 2, &mut rng2);
        for (a, b) in trained.mlp.params().iter().zip(init.params().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = testutil::rng(2);
        let data: Vec<Array1<f64>> = (0..64).map(|_| testutil::random_state(2, &mut rng)).collect();
        let cfg = small_config(3);
        let a = train_denoiser_states(&data, &cfg, 11).unwrap();
        let b = train_denoiser_states(&data, &cfg, 11).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        for (x, y) in a.mlp.params().iter().zip(b.mlp.params().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn initial_loss_has_epsilon_scale() {
        // with a near-zero network output the variance-weighted objective is
        // E||eps||^2 = dim; Monte-Carlo against that scale
        let mut rng = testutil::rng(4);
        let dim = 3;
        let data: Vec<Array1<f64>> = (0..256).map(|_| testutil::random_state(dim, &mut rng)).collect();
        let cfg = TrainingConfig {
            learning_rate: 0.0,
            ..small_config(1)
        };
        let out = train_denoiser_states(&data, &cfg, 5).unwrap();
        let loss0 = out.loss_history[0];
        assert!(
            loss0 > 0.5 * dim as f64 && loss0 < 2.0 * dim as f64,
            "initial loss {loss0} vs dim {dim}"
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small_config(1);
        assert!(train_denoiser_states(&[], &cfg, 0).is_err());
        let data = vec![array![0.0, 1.0], array![1.0]];
        assert!(train_denoiser_states(&data, &cfg, 0).is_err());
        let cfg_bad = TrainingConfig {
            epochs: 0,
            ..small_config(1)
        };
        assert!(train_denoiser_states(&[array![0.0]], &cfg_bad, 0).is_err());
    }

    #[test]
    fn learns_gaussian_score() {
        // single 2-D Gaussian: compare against the analytic diffused score
        let schedule = NoiseSchedule::default();
        let prior =
            GaussianMixturePrior::isotropic(array![0.5, -0.25], 0.8, schedule).unwrap();
        let mut rng = testutil::rng(6);
        let data: Vec<Array1<f64>> = (0..2000).map(|_| prior.sample0(&mut rng)).collect();
        let cfg = small_config(60);
        let model = train_denoiser_states(&data, &cfg, 7).unwrap();

        let mut err = 0.0;
        let mut count = 0;
        for &t in &[0.3, 0.7, 1.2] {
            let abar = schedule.alpha_bar(t).unwrap();
            for _ in 0..200 {
                let th0 = prior.sample0(&mut rng);
                let mut tht = Array1::zeros(2);
                for i in 0..2 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    tht[i] = abar.sqrt() * th0[i] + (1.0 - abar).sqrt() * e;
                }
                let truth = gm_score(&prior, &tht.view(), t, &schedule).unwrap();
                let est = model.score(&tht.view(), t);
                for i in 0..2 {
                    err += (truth[i] - est[i]).powi(2);
                    count += 1;
                }
            }
        }
        let mse = err / count as f64;
        assert!(mse < 0.05, "score MSE {mse}");
        let first = model.loss_history[0];
        let last = *model.loss_history.last().unwrap();
        assert!(last < first, "loss should decrease: {first} -> {last}");
    }

    #[test]
    fn save_load_roundtrip() {
        let mut rng = testutil::rng(8);
        let data: Vec<Array1<f64>> = (0..64).map(|_| testutil::random_state(3, &mut rng)).collect();
        let model = train_denoiser_states(&data, &small_config(2), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        let loaded = DenoiserScoreModel::load(&path).unwrap();
        let th = testutil::random_state(3, &mut rng);
        let a = model.score(&th.view(), 0.8);
        let b = loaded.score(&th.view(), 0.8);
        for i in 0..3 {
            assert_eq!(a[i], b[i]);
        }
        // malformed file is rejected
        std::fs::write(dir.path().join("junk.bin"), b"NOTAMODEL").unwrap();
        assert!(DenoiserScoreModel::load(&dir.path().join("junk.bin")).is_err());
    }
}
