//! Measurement model: orthonormal 2D DFT, masked subsampling, complex
//! Gaussian noise, log-likelihood, and the gradient of the log-likelihood
//! with respect to the design through the soft mask.
//!
//! The spectrum is centered: the DC bin of [`dft2`] sits at
//! `(rows / 2, cols / 2)`, so masks drawn in centered geometry multiply the
//! transform directly. Scaling is orthonormal (`1 / sqrt(rows * cols)` per
//! direction pair), which makes the adjoint of the full-mask operator equal
//! its inverse and keeps the noise model basis-independent.

use std::cell::RefCell;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::field::{ComplexField, TargetState};
use crate::mask::{DesignParameter, MaskBuilder, MaskField, MaskMode};

/// Stationary complex Gaussian noise: real and imaginary parts are
/// independent N(0, sigma^2) on every sampled frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be positive and finite, got {sigma}"
            )));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_axis(buf: &mut [Complex64], rows: usize, cols: usize, inverse: bool, along_rows: bool) {
    let len = if along_rows { cols } else { rows };
    PLANNER.with(|p| {
        let fft = if inverse {
            p.borrow_mut().plan_fft_inverse(len)
        } else {
            p.borrow_mut().plan_fft_forward(len)
        };
        if along_rows {
            for r in 0..rows {
                fft.process(&mut buf[r * cols..(r + 1) * cols]);
            }
        } else {
            let mut col = vec![Complex64::default(); rows];
            for c in 0..cols {
                for r in 0..rows {
                    col[r] = buf[r * cols + c];
                }
                fft.process(&mut col);
                for r in 0..rows {
                    buf[r * cols + c] = col[r];
                }
            }
        }
    });
}

/// fftshift index map: DC moves to `floor(n / 2)`.
fn shift_index(i: usize, n: usize) -> usize {
    (i + n / 2) % n
}

fn to_buffer(f: &ComplexField) -> Vec<Complex64> {
    let (rows, cols) = (f.rows(), f.cols());
    let mut buf = vec![Complex64::default(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (re, im) = f.get(r, c);
            buf[r * cols + c] = Complex64::new(re, im);
        }
    }
    buf
}

fn from_buffer(buf: &[Complex64], rows: usize, cols: usize) -> ComplexField {
    let re = Array2::from_shape_fn((rows, cols), |(r, c)| buf[r * cols + c].re);
    let im = Array2::from_shape_fn((rows, cols), |(r, c)| buf[r * cols + c].im);
    ComplexField::from_parts(re, im).expect("consistent shapes")
}

/// Orthonormal centered 2D DFT.
pub fn dft2(image: &ComplexField) -> ComplexField {
    let (rows, cols) = (image.rows(), image.cols());
    let mut buf = to_buffer(image);
    fft_axis(&mut buf, rows, cols, false, true);
    fft_axis(&mut buf, rows, cols, false, false);
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    let mut shifted = vec![Complex64::default(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            shifted[shift_index(r, rows) * cols + shift_index(c, cols)] = buf[r * cols + c] * scale;
        }
    }
    from_buffer(&shifted, rows, cols)
}

/// Inverse of [`dft2`].
pub fn idft2(kspace: &ComplexField) -> ComplexField {
    let (rows, cols) = (kspace.rows(), kspace.cols());
    let src = to_buffer(kspace);
    let mut buf = vec![Complex64::default(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            buf[r * cols + c] = src[shift_index(r, rows) * cols + shift_index(c, cols)];
        }
    }
    fft_axis(&mut buf, rows, cols, true, true);
    fft_axis(&mut buf, rows, cols, true, false);
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    for v in &mut buf {
        *v *= scale;
    }
    from_buffer(&buf, rows, cols)
}

/// Masked Fourier measurement operator. The segmentation block of the joint
/// target contributes nothing (its columns are zero).
#[derive(Debug, Clone)]
pub struct ForwardOperator {
    mask: MaskField,
}

impl ForwardOperator {
    pub fn new(mask: MaskField) -> Self {
        Self { mask }
    }

    pub fn mask(&self) -> &MaskField {
        &self.mask
    }

    pub fn rows(&self) -> usize {
        self.mask.rows()
    }

    pub fn cols(&self) -> usize {
        self.mask.cols()
    }

    /// `mask .* dft2(x)` for the image part of a joint state.
    pub fn apply(&self, theta: &TargetState) -> Result<ComplexField> {
        self.apply_image(theta.image())
    }

    pub fn apply_image(&self, x: &ComplexField) -> Result<ComplexField> {
        if (x.rows(), x.cols()) != (self.rows(), self.cols()) {
            return Err(Error::shape(
                format!("{:?}", (self.rows(), self.cols())),
                format!("{:?}", (x.rows(), x.cols())),
            ));
        }
        dft2(x).hadamard_real(self.mask.weights())
    }

    /// Adjoint into the image domain: `idft2(mask .* y)`.
    pub fn adjoint(&self, y: &ComplexField) -> Result<ComplexField> {
        if (y.rows(), y.cols()) != (self.rows(), self.cols()) {
            return Err(Error::shape(
                format!("{:?}", (self.rows(), self.cols())),
                format!("{:?}", (y.rows(), y.cols())),
            ));
        }
        Ok(idft2(&y.hadamard_real(self.mask.weights())?))
    }

    /// Adjoint into the joint state domain; the segmentation block is zero.
    pub fn adjoint_state(&self, y: &ComplexField) -> Result<Array1<f64>> {
        let img = self.adjoint(y)?;
        let n = img.len();
        let mut out = Array1::zeros(3 * n);
        out.slice_mut(ndarray::s![..2 * n]).assign(&img.vectorize());
        Ok(out)
    }
}

/// Noise-free measurement plus i.i.d. complex Gaussian noise on the mask
/// support only; frequencies that were not acquired stay exactly zero.
/// Deterministic given the seed.
pub fn sample_measurement(
    op: &ForwardOperator,
    theta: &TargetState,
    noise: &NoiseModel,
    seed: u64,
) -> Result<ComplexField> {
    let mut y = op.apply(theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = noise.sigma();
    for r in 0..y.rows() {
        for c in 0..y.cols() {
            if op.mask.weights()[[r, c]] > 0.0 {
                let er: f64 = StandardNormal.sample(&mut rng);
                let ei: f64 = StandardNormal.sample(&mut rng);
                let (re, im) = y.get(r, c);
                y.set(r, c, re + sigma * er, im + sigma * ei);
            }
        }
    }
    Ok(y)
}

/// Number of sampled real components (two per supported pixel in hard mode;
/// every component participates when the mask is soft).
fn sampled_real_components(mask: &MaskField) -> usize {
    match mask.mode() {
        MaskMode::Hard => 2 * mask.weights().iter().filter(|&&w| w > 0.0).count(),
        MaskMode::Soft => 2 * mask.rows() * mask.cols(),
    }
}

/// Gaussian log-density of the measurement given the image part of the state.
/// Hard masks project the residual onto their support, so entries of `y`
/// outside the support cannot affect the value.
pub fn log_likelihood(
    op: &ForwardOperator,
    theta: &TargetState,
    y: &ComplexField,
    noise: &NoiseModel,
) -> Result<f64> {
    let k = dft2(theta.image());
    log_likelihood_kspace(op.mask(), &k, y, noise)
}

/// Same likelihood evaluated on a precomputed spectrum.
pub fn log_likelihood_kspace(
    mask: &MaskField,
    k: &ComplexField,
    y: &ComplexField,
    noise: &NoiseModel,
) -> Result<f64> {
    if (y.rows(), y.cols()) != (mask.rows(), mask.cols()) {
        return Err(Error::shape(
            format!("{:?}", (mask.rows(), mask.cols())),
            format!("{:?}", (y.rows(), y.cols())),
        ));
    }
    let sigma = noise.sigma();
    let mut quad = 0.0;
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            let w = mask.weights()[[r, c]];
            let supp = if w > 0.0 { 1.0 } else { 0.0 };
            let (kr, ki) = k.get(r, c);
            let (yr, yi) = y.get(r, c);
            let dr = w * kr - supp * yr;
            let di = w * ki - supp * yi;
            quad += dr * dr + di * di;
        }
    }
    let n_on = sampled_real_components(mask) as f64;
    let constant = -(n_on / 2.0) * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    Ok(-quad / (2.0 * sigma * sigma) + constant)
}

/// Gradient of `log p(y(xi) | theta', xi)` with respect to the design, where
/// the measurement is reparameterized through the soft mask as
/// `y(xi) = m(xi) .* dft2(x) + sigma * eps` with a fixed noise draw.
///
/// This is the per-sample score of the information-gain gradient estimator;
/// it vanishes identically when `theta' == theta` and `eps == 0`.
pub fn grad_design_log_likelihood(
    builder: &MaskBuilder,
    xi: &DesignParameter,
    theta: &TargetState,
    epsilon_draw: &ComplexField,
    theta_prime: &TargetState,
    noise: &NoiseModel,
) -> Result<Vec<f64>> {
    let mask = builder.build(xi, MaskMode::Soft)?;
    let grads = builder.gradient(xi)?;
    let k = dft2(theta.image());
    let k_prime = dft2(theta_prime.image());
    if (epsilon_draw.rows(), epsilon_draw.cols()) != (builder.rows(), builder.cols()) {
        return Err(Error::shape(
            format!("{:?}", (builder.rows(), builder.cols())),
            format!("{:?}", (epsilon_draw.rows(), epsilon_draw.cols())),
        ));
    }
    Ok(grad_design_from_kspace(
        &mask,
        &grads,
        &k,
        epsilon_draw,
        &k_prime,
        noise.sigma(),
    ))
}

/// Kernel shared with the information-gain estimator: gradients computed from
/// precomputed spectra of `theta` and `theta'`.
pub(crate) fn grad_design_from_kspace(
    mask: &MaskField,
    mask_grads: &[Array2<f64>],
    k_theta: &ComplexField,
    eps: &ComplexField,
    k_prime: &ComplexField,
    sigma: f64,
) -> Vec<f64> {
    let (rows, cols) = (mask.rows(), mask.cols());
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut out = vec![0.0; mask_grads.len()];
    for r in 0..rows {
        for c in 0..cols {
            let w = mask.weights()[[r, c]];
            let (kr, ki) = k_theta.get(r, c);
            let (pr, pi) = k_prime.get(r, c);
            let (er, ei) = eps.get(r, c);
            let dre = kr - pr;
            let dim = ki - pi;
            // residual of the reparameterized measurement against the mean
            let rre = w * dre + sigma * er;
            let rim = w * dim + sigma * ei;
            let base = rre * dre + rim * dim;
            for (l, g) in mask_grads.iter().enumerate() {
                out[l] -= inv_s2 * base * g[[r, c]];
            }
        }
    }
    out
}
