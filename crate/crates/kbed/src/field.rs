//! Shared data model: complex fields as stacked real/imaginary planes, joint
//! reconstruction targets, and the measurement records accumulated over a run.
//!
//! All vectorized forms are row-major with the real block first, then the
//! imaginary block. The joint target stacks the image vector first and the
//! segmentation plane last, so a state vector has length `3 * rows * cols`.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::mask::{DesignParameter, MaskBuilder};

/// A 2D complex field stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    rows: usize,
    cols: usize,
    re: Array2<f64>,
    im: Array2<f64>,
}

impl ComplexField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            re: Array2::zeros((rows, cols)),
            im: Array2::zeros((rows, cols)),
        }
    }

    pub fn from_parts(re: Array2<f64>, im: Array2<f64>) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::shape(
                format!("{:?}", re.dim()),
                format!("{:?}", im.dim()),
            ));
        }
        let (rows, cols) = re.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter("zero-sized field".into()));
        }
        Ok(Self { rows, cols, re, im })
    }

    /// Real-valued field with zero imaginary part.
    pub fn from_real(re: Array2<f64>) -> Self {
        let (rows, cols) = re.dim();
        Self {
            rows,
            cols,
            im: Array2::zeros((rows, cols)),
            re,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of complex entries.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn re(&self) -> &Array2<f64> {
        &self.re
    }

    pub fn im(&self) -> &Array2<f64> {
        &self.im
    }

    pub fn get(&self, r: usize, c: usize) -> (f64, f64) {
        (self.re[[r, c]], self.im[[r, c]])
    }

    pub fn set(&mut self, r: usize, c: usize, re: f64, im: f64) {
        self.re[[r, c]] = re;
        self.im[[r, c]] = im;
    }

    /// Row-major flattening, real block first then imaginary block.
    pub fn vectorize(&self) -> Array1<f64> {
        let n = self.len();
        let mut out = Array1::zeros(2 * n);
        for (i, &v) in self.re.iter().enumerate() {
            out[i] = v;
        }
        for (i, &v) in self.im.iter().enumerate() {
            out[n + i] = v;
        }
        out
    }

    /// Inverse of [`ComplexField::vectorize`].
    pub fn matricize(rows: usize, cols: usize, v: &ArrayView1<f64>) -> Result<Self> {
        let n = rows * cols;
        if v.len() != 2 * n {
            return Err(Error::shape(format!("{}", 2 * n), format!("{}", v.len())));
        }
        let re = Array2::from_shape_fn((rows, cols), |(r, c)| v[r * cols + c]);
        let im = Array2::from_shape_fn((rows, cols), |(r, c)| v[n + r * cols + c]);
        Ok(Self { rows, cols, re, im })
    }

    /// Per-pixel magnitude `sqrt(re^2 + im^2)`.
    pub fn magnitude(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for ((o, &a), &b) in out.iter_mut().zip(self.re.iter()).zip(self.im.iter()) {
            *o = a.hypot(b);
        }
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.re.iter().map(|v| v * v).sum::<f64>() + self.im.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            re: &self.re + &other.re,
            im: &self.im + &other.im,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            re: &self.re - &other.re,
            im: &self.im - &other.im,
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            re: &self.re * s,
            im: &self.im * s,
        }
    }

    /// Element-wise complex product on the stacked representation.
    pub fn mul_complex(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        let re = Array2::from_shape_fn((self.rows, self.cols), |idx| {
            self.re[idx] * other.re[idx] - self.im[idx] * other.im[idx]
        });
        let im = Array2::from_shape_fn((self.rows, self.cols), |idx| {
            self.re[idx] * other.im[idx] + self.im[idx] * other.re[idx]
        });
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            re,
            im,
        })
    }

    /// Element-wise product with a real-valued weight plane.
    pub fn hadamard_real(&self, w: &Array2<f64>) -> Result<Self> {
        if w.dim() != (self.rows, self.cols) {
            return Err(Error::shape(
                format!("{:?}", (self.rows, self.cols)),
                format!("{:?}", w.dim()),
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            re: &self.re * w,
            im: &self.im * w,
        })
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape(
                format!("{:?}", (self.rows, self.cols)),
                format!("{:?}", (other.rows, other.cols)),
            ));
        }
        Ok(())
    }
}

/// The joint unknown: complex image plus a real segmentation plane in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TargetState {
    image: ComplexField,
    seg: Array2<f64>,
}

impl TargetState {
    /// Concatenate an image and a segmentation plane of the same spatial shape.
    pub fn concat(image: ComplexField, seg: Array2<f64>) -> Result<Self> {
        if seg.dim() != (image.rows(), image.cols()) {
            return Err(Error::shape(
                format!("{:?}", (image.rows(), image.cols())),
                format!("{:?}", seg.dim()),
            ));
        }
        if seg.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParameter(
                "segmentation values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { image, seg })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            image: ComplexField::zeros(rows, cols),
            seg: Array2::zeros((rows, cols)),
        }
    }

    pub fn rows(&self) -> usize {
        self.image.rows()
    }

    pub fn cols(&self) -> usize {
        self.image.cols()
    }

    pub fn image(&self) -> &ComplexField {
        &self.image
    }

    pub fn seg(&self) -> &Array2<f64> {
        &self.seg
    }

    /// Split back into the image and segmentation parts.
    pub fn split(&self) -> (&ComplexField, &Array2<f64>) {
        (&self.image, &self.seg)
    }

    /// Length of the vectorized state for a given spatial shape.
    pub fn state_len(rows: usize, cols: usize) -> usize {
        3 * rows * cols
    }

    /// Fixed ordering: vectorized image first, segmentation plane last.
    pub fn to_vector(&self) -> Array1<f64> {
        let n = self.image.len();
        let mut out = Array1::zeros(3 * n);
        out.slice_mut(ndarray::s![..2 * n])
            .assign(&self.image.vectorize());
        for (i, &v) in self.seg.iter().enumerate() {
            out[2 * n + i] = v;
        }
        out
    }

    /// Rebuild a state from a raw vector. Diffusion states are unconstrained,
    /// so the segmentation block is clamped into [0, 1] here.
    pub fn from_vector(rows: usize, cols: usize, v: &ArrayView1<f64>) -> Result<Self> {
        let n = rows * cols;
        if v.len() != 3 * n {
            return Err(Error::shape(format!("{}", 3 * n), format!("{}", v.len())));
        }
        let image = ComplexField::matricize(rows, cols, &v.slice(ndarray::s![..2 * n]))?;
        let seg = Array2::from_shape_fn((rows, cols), |(r, c)| {
            v[2 * n + r * cols + c].clamp(0.0, 1.0)
        });
        Ok(Self { image, seg })
    }

    /// Image part of a raw state vector, without building a full state.
    pub fn image_of_vector(rows: usize, cols: usize, v: &ArrayView1<f64>) -> Result<ComplexField> {
        let n = rows * cols;
        if v.len() < 2 * n {
            return Err(Error::shape(format!(">= {}", 2 * n), format!("{}", v.len())));
        }
        ComplexField::matricize(rows, cols, &v.slice(ndarray::s![..2 * n]))
    }

    /// Binary segmentation at a threshold (metrics use 0.5).
    pub fn seg_binary(&self, threshold: f64) -> Array2<bool> {
        self.seg.mapv(|v| v > threshold)
    }
}

/// One experiment: the design that was run, the acquired k-space data and the
/// acquisition noise level.
#[derive(Debug, Clone)]
pub struct MeasurementRecord {
    design: DesignParameter,
    measurement: ComplexField,
    noise_sigma: f64,
}

impl MeasurementRecord {
    /// Builds a record, checking that the measurement vanishes outside the
    /// hard-mask support of its design.
    pub fn new(
        design: DesignParameter,
        measurement: ComplexField,
        noise_sigma: f64,
        builder: &MaskBuilder,
    ) -> Result<Self> {
        if !(noise_sigma > 0.0) || !noise_sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be positive and finite, got {noise_sigma}"
            )));
        }
        if (measurement.rows(), measurement.cols()) != (builder.rows(), builder.cols()) {
            return Err(Error::shape(
                format!("{:?}", (builder.rows(), builder.cols())),
                format!("{:?}", (measurement.rows(), measurement.cols())),
            ));
        }
        let mask = builder.build(&design, crate::mask::MaskMode::Hard)?;
        for r in 0..measurement.rows() {
            for c in 0..measurement.cols() {
                if mask.weights()[[r, c]] == 0.0 {
                    let (re, im) = measurement.get(r, c);
                    if re != 0.0 || im != 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "measurement nonzero outside mask support at ({r}, {c})"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            design,
            measurement,
            noise_sigma,
        })
    }

    pub fn design(&self) -> &DesignParameter {
        &self.design
    }

    pub fn measurement(&self) -> &ComplexField {
        &self.measurement
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
}

/// Ordered sequence of measurement records plus the mask geometry they share.
#[derive(Debug, Clone)]
pub struct ExperimentDataset {
    builder: MaskBuilder,
    records: Vec<MeasurementRecord>,
}

impl ExperimentDataset {
    pub fn new(builder: MaskBuilder) -> Self {
        Self {
            builder,
            records: Vec::new(),
        }
    }

    pub fn builder(&self) -> &MaskBuilder {
        &self.builder
    }

    pub fn records(&self) -> &[MeasurementRecord] {
        &self.records
    }

    /// The experiment counter k; equal to the number of records by construction.
    pub fn step(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: MeasurementRecord) -> Result<()> {
        if (record.measurement.rows(), record.measurement.cols())
            != (self.builder.rows(), self.builder.cols())
        {
            return Err(Error::shape(
                format!("{:?}", (self.builder.rows(), self.builder.cols())),
                format!(
                    "{:?}",
                    (record.measurement.rows(), record.measurement.cols())
                ),
            ));
        }
        self.records.push(record);
        Ok(())
    }

    /// Union of the hard masks of all records.
    pub fn accumulated_mask(&self) -> Result<Option<crate::mask::MaskField>> {
        if self.records.is_empty() {
            return Ok(None);
        }
        let masks = self
            .records
            .iter()
            .map(|r| self.builder.build(r.design(), crate::mask::MaskMode::Hard))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(crate::mask::accumulate_masks(&masks)?))
    }
}
