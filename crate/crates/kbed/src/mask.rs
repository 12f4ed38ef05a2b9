//! Differentiable k-space sampling masks.
//!
//! A continuous design vector defines a trajectory (Cartesian rows, radial
//! lines through the k-space center, or Archimedean spirals). The soft mask
//! relaxes the binary sampling indicator to a sigmoid of the signed distance
//! to the trajectory, with per-line weights combined by a complement product
//! so the result stays in [0, 1] and is differentiable in the design. The
//! hard mask is the temperature-zero limit and is what an acquisition
//! actually measures.
//!
//! Masks live on the centered spectrum: the DC bin sits at
//! `(rows / 2, cols / 2)`, matching [`crate::forward::dft2`].

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trajectory families a design vector can describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryPattern {
    /// Full horizontal lines at continuous row coordinates; one value per line.
    Cartesian,
    /// Full lines through the k-space center; one angle per line, modulo pi.
    Radial,
    /// Archimedean spirals; three values (a, b, phase) per spiral.
    Spiral,
}

/// Continuous design vector for one experiment's subsampling trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignParameter {
    pattern: TrajectoryPattern,
    values: Vec<f64>,
    lines_per_experiment: usize,
}

impl DesignParameter {
    pub fn new(pattern: TrajectoryPattern, values: Vec<f64>, lines: usize) -> Result<Self> {
        let expected = match pattern {
            TrajectoryPattern::Cartesian | TrajectoryPattern::Radial => lines,
            TrajectoryPattern::Spiral => 3 * lines,
        };
        if lines == 0 {
            return Err(Error::InvalidParameter("lines_per_experiment == 0".into()));
        }
        if values.len() != expected {
            return Err(Error::InvalidParameter(format!(
                "{pattern:?} with {lines} lines needs {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite design value".into()));
        }
        Ok(Self {
            pattern,
            values,
            lines_per_experiment: lines,
        })
    }

    pub fn radial(angles: Vec<f64>) -> Self {
        let lines = angles.len();
        Self::new(TrajectoryPattern::Radial, angles, lines).expect("radial design")
    }

    pub fn cartesian(coords: Vec<f64>) -> Self {
        let lines = coords.len();
        Self::new(TrajectoryPattern::Cartesian, coords, lines).expect("cartesian design")
    }

    pub fn spiral(triples: Vec<f64>) -> Result<Self> {
        if triples.len() % 3 != 0 || triples.is_empty() {
            return Err(Error::InvalidParameter(
                "spiral design needs 3 values per spiral".into(),
            ));
        }
        let lines = triples.len() / 3;
        Self::new(TrajectoryPattern::Spiral, triples, lines)
    }

    /// Radial angles drawn i.i.d. from U[0, pi).
    pub fn random_radial<R: Rng>(lines: usize, rng: &mut R) -> Self {
        let angles = (0..lines)
            .map(|_| rng.random::<f64>() * std::f64::consts::PI)
            .collect();
        Self::radial(angles)
    }

    pub fn pattern(&self) -> TrajectoryPattern {
        self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lines_per_experiment(&self) -> usize {
        self.lines_per_experiment
    }

    /// Design dimension d.
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Same trajectory with angles reduced to their canonical range.
    /// Radial angles wrap modulo pi; other patterns are unchanged.
    pub fn wrapped(&self) -> Self {
        let mut out = self.clone();
        if self.pattern == TrajectoryPattern::Radial {
            for v in &mut out.values {
                *v = v.rem_euclid(std::f64::consts::PI);
            }
        }
        out
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.pattern, values, self.lines_per_experiment)
    }
}

/// Soft masks carry sigmoid weights in [0, 1]; hard masks are binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Soft,
    Hard,
}

/// Per-pixel k-space sampling weights derived from a design.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskField {
    rows: usize,
    cols: usize,
    weights: Array2<f64>,
    mode: MaskMode,
}

impl MaskField {
    pub fn new(weights: Array2<f64>, mode: MaskMode) -> Result<Self> {
        let ok = match mode {
            MaskMode::Soft => weights.iter().all(|&w| (0.0..=1.0).contains(&w)),
            MaskMode::Hard => weights.iter().all(|&w| w == 0.0 || w == 1.0),
        };
        if !ok {
            return Err(Error::InvalidParameter(
                "mask weights outside the allowed range for the mode".into(),
            ));
        }
        let (rows, cols) = weights.dim();
        Ok(Self {
            rows,
            cols,
            weights,
            mode,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: Array2::ones((rows, cols)),
            mode: MaskMode::Hard,
        }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: Array2::zeros((rows, cols)),
            mode: MaskMode::Hard,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Indicator of nonzero weight.
    pub fn support(&self) -> Array2<bool> {
        self.weights.mapv(|w| w > 0.0)
    }

    /// Hard mode: fraction of sampled pixels. Soft mode: mean weight.
    pub fn sampled_fraction(&self) -> f64 {
        let n = (self.rows * self.cols) as f64;
        match self.mode {
            MaskMode::Hard => self.weights.iter().filter(|&&w| w == 1.0).count() as f64 / n,
            MaskMode::Soft => self.weights.sum() / n,
        }
    }
}

/// Width/temperature of the sigmoid distance relaxation, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub width: f64,
    pub temperature: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            width: 0.5,
            temperature: 0.5,
        }
    }
}

impl MaskConfig {
    fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mask width must be positive, got {}",
                self.width
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mask temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Mask geometry shared across a run: grid shape plus relaxation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBuilder {
    rows: usize,
    cols: usize,
    config: MaskConfig,
}

impl MaskBuilder {
    pub fn new(rows: usize, cols: usize, config: MaskConfig) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter("zero-sized mask grid".into()));
        }
        config.validate()?;
        Ok(Self { rows, cols, config })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn config(&self) -> MaskConfig {
        self.config
    }

    pub fn build(&self, xi: &DesignParameter, mode: MaskMode) -> Result<MaskField> {
        let c = &self.config;
        match xi.pattern() {
            TrajectoryPattern::Radial => {
                radial_mask(xi, self.rows, self.cols, c.width, c.temperature, mode)
            }
            TrajectoryPattern::Cartesian => {
                cartesian_mask(xi, self.rows, self.cols, c.width, c.temperature, mode)
            }
            TrajectoryPattern::Spiral => {
                spiral_mask(xi, self.rows, self.cols, c.width, c.temperature, mode)
            }
        }
    }

    /// Gradient of every soft-mask pixel weight with respect to each design
    /// component: one plane per component.
    pub fn gradient(&self, xi: &DesignParameter) -> Result<Vec<Array2<f64>>> {
        mask_gradient(
            xi,
            self.rows,
            self.cols,
            self.config.width,
            self.config.temperature,
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// DC bin position of the centered spectrum.
fn center(rows: usize, cols: usize) -> (f64, f64) {
    ((rows / 2) as f64, (cols / 2) as f64)
}

/// Perpendicular distance from every pixel to a full line through the center
/// at the given angle.
fn radial_distances(rows: usize, cols: usize, angle: f64) -> Array2<f64> {
    let (rc, cc) = center(rows, cols);
    let (sin, cos) = angle.sin_cos();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let u = c as f64 - cc;
        let v = r as f64 - rc;
        (u * sin - v * cos).abs()
    })
}

/// Signed derivative of the radial distance with respect to the angle.
fn radial_distance_grad(rows: usize, cols: usize, angle: f64) -> Array2<f64> {
    let (rc, cc) = center(rows, cols);
    let (sin, cos) = angle.sin_cos();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let u = c as f64 - cc;
        let v = r as f64 - rc;
        let p = u * sin - v * cos;
        p.signum() * (u * cos + v * sin)
    })
}

fn cartesian_distances(rows: usize, cols: usize, coord: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(r, _)| (r as f64 - coord).abs())
}

fn cartesian_distance_grad(rows: usize, cols: usize, coord: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(r, _)| -(r as f64 - coord).signum())
}

/// Discretized spiral point with its curve parameter.
struct SpiralPoint {
    x: f64,
    y: f64,
    s: f64,
}

/// Sample an Archimedean spiral `k(s) = (a + b s)(cos(2 pi s + phase),
/// sin(2 pi s + phase))` at sub-pixel arc-length steps until its radius
/// leaves the grid (one full turn when the radius does not grow). The curve
/// is extended a few pixels past the far corner so the nearest curve point
/// of any in-grid pixel is interior; envelope differentiation at the moving
/// endpoint would otherwise be wrong.
fn spiral_points(rows: usize, cols: usize, a: f64, b: f64, phase: f64) -> Vec<SpiralPoint> {
    let (rc, cc) = center(rows, cols);
    let r_max = {
        let dr = rc.max(rows as f64 - 1.0 - rc);
        let dc = cc.max(cols as f64 - 1.0 - cc);
        dr.hypot(dc) + 5.0
    };
    let s_max = if b > 1e-12 {
        ((r_max - a) / b).max(0.0)
    } else {
        1.0
    };
    let step_len = 0.25;
    let mut pts = Vec::new();
    let mut s = 0.0;
    loop {
        let radius = a + b * s;
        let psi = 2.0 * std::f64::consts::PI * s + phase;
        pts.push(SpiralPoint {
            x: radius * psi.cos(),
            y: radius * psi.sin(),
            s,
        });
        if s >= s_max {
            break;
        }
        let speed = (b * b + radius * radius * 4.0 * std::f64::consts::PI.powi(2)).sqrt();
        let ds = (step_len / speed.max(1e-9)).min(0.05);
        s = (s + ds).min(s_max);
        if pts.len() > 2_000_000 {
            break;
        }
    }
    pts
}

fn spiral_eval(a: f64, b: f64, phase: f64, s: f64) -> ((f64, f64), (f64, f64)) {
    let radius = a + b * s;
    let psi = 2.0 * std::f64::consts::PI * s + phase;
    let (sin, cos) = psi.sin_cos();
    let point = (radius * cos, radius * sin);
    let tangent = (
        b * cos - radius * 2.0 * std::f64::consts::PI * sin,
        b * sin + radius * 2.0 * std::f64::consts::PI * cos,
    );
    (point, tangent)
}

/// Minimum distance from every pixel to the spiral, plus the curve parameter
/// of the nearest point. The coarse polyline minimum is refined by a couple
/// of Gauss-Newton steps so the distance field is smooth in the spiral
/// parameters (the raw polyline sampling noise would dominate gradients).
fn spiral_distances(
    rows: usize,
    cols: usize,
    pts: &[SpiralPoint],
    a: f64,
    b: f64,
    phase: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (rc, cc) = center(rows, cols);
    let s_end = pts.last().map_or(0.0, |p| p.s);
    let mut dist = Array2::from_elem((rows, cols), f64::INFINITY);
    let mut arg = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let px = c as f64 - cc;
            let py = r as f64 - rc;
            let mut best = f64::INFINITY;
            let mut best_s = 0.0;
            for p in pts.iter() {
                let d2 = (px - p.x) * (px - p.x) + (py - p.y) * (py - p.y);
                if d2 < best {
                    best = d2;
                    best_s = p.s;
                }
            }
            let mut s = best_s;
            for _ in 0..6 {
                let ((kx, ky), (tx, ty)) = spiral_eval(a, b, phase, s);
                let tau = 2.0 * std::f64::consts::PI;
                let psi = tau * s + phase;
                let (sinp, cosp) = psi.sin_cos();
                let radius = a + b * s;
                // second derivative of the curve
                let hx = -2.0 * b * tau * sinp - radius * tau * tau * cosp;
                let hy = 2.0 * b * tau * cosp - radius * tau * tau * sinp;
                let ex = px - kx;
                let ey = py - ky;
                let g = ex * tx + ey * ty;
                let gp = ex * hx + ey * hy - (tx * tx + ty * ty);
                if gp.abs() < 1e-18 {
                    break;
                }
                let next = (s - g / gp).clamp(0.0, s_end);
                if (next - s).abs() < 1e-14 {
                    s = next;
                    break;
                }
                s = next;
            }
            let ((kx, ky), _) = spiral_eval(a, b, phase, s);
            dist[[r, c]] = (px - kx).hypot(py - ky);
            arg[[r, c]] = s;
        }
    }
    (dist, arg)
}

fn combine(
    distances: &[Array2<f64>],
    rows: usize,
    cols: usize,
    width: f64,
    temperature: f64,
    mode: MaskMode,
) -> MaskField {
    let mut weights = Array2::zeros((rows, cols));
    match mode {
        MaskMode::Hard => {
            for d in distances {
                for (w, &dd) in weights.iter_mut().zip(d.iter()) {
                    if dd <= width {
                        *w = 1.0;
                    }
                }
            }
        }
        MaskMode::Soft => {
            let mut complement = Array2::<f64>::ones((rows, cols));
            for d in distances {
                for (q, &dd) in complement.iter_mut().zip(d.iter()) {
                    *q *= 1.0 - sigmoid((width - dd) / temperature);
                }
            }
            for (w, &q) in weights.iter_mut().zip(complement.iter()) {
                *w = 1.0 - q;
            }
        }
    }
    MaskField {
        rows,
        cols,
        weights,
        mode,
    }
}

fn check_pattern(xi: &DesignParameter, want: TrajectoryPattern) -> Result<()> {
    if xi.pattern() != want {
        return Err(Error::InvalidParameter(format!(
            "expected a {want:?} design, got {:?}",
            xi.pattern()
        )));
    }
    Ok(())
}

fn check_relaxation(width: f64, temperature: f64) -> Result<()> {
    MaskConfig { width, temperature }.validate()
}

/// Mask of full lines through the k-space center at the design's angles.
pub fn radial_mask(
    xi: &DesignParameter,
    rows: usize,
    cols: usize,
    width: f64,
    temperature: f64,
    mode: MaskMode,
) -> Result<MaskField> {
    check_pattern(xi, TrajectoryPattern::Radial)?;
    check_relaxation(width, temperature)?;
    let distances: Vec<_> = xi
        .values()
        .iter()
        .map(|&a| radial_distances(rows, cols, a))
        .collect();
    Ok(combine(&distances, rows, cols, width, temperature, mode))
}

/// Mask of full horizontal lines at the design's continuous row coordinates.
pub fn cartesian_mask(
    xi: &DesignParameter,
    rows: usize,
    cols: usize,
    width: f64,
    temperature: f64,
    mode: MaskMode,
) -> Result<MaskField> {
    check_pattern(xi, TrajectoryPattern::Cartesian)?;
    check_relaxation(width, temperature)?;
    let distances: Vec<_> = xi
        .values()
        .iter()
        .map(|&coord| cartesian_distances(rows, cols, coord))
        .collect();
    Ok(combine(&distances, rows, cols, width, temperature, mode))
}

/// Tube of the given width around each Archimedean spiral `(a, b, phase)`.
pub fn spiral_mask(
    xi: &DesignParameter,
    rows: usize,
    cols: usize,
    width: f64,
    temperature: f64,
    mode: MaskMode,
) -> Result<MaskField> {
    check_pattern(xi, TrajectoryPattern::Spiral)?;
    check_relaxation(width, temperature)?;
    let mut distances = Vec::new();
    for triple in xi.values().chunks(3) {
        let (a, b, phase) = (triple[0], triple[1], triple[2]);
        if b < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "negative spiral radius growth b = {b}"
            )));
        }
        let pts = spiral_points(rows, cols, a, b, phase);
        let (dist, _) = spiral_distances(rows, cols, &pts, a, b, phase);
        distances.push(dist);
    }
    Ok(combine(&distances, rows, cols, width, temperature, mode))
}

/// Pointwise union `1 - prod(1 - w_i)`; hard only if every input is hard.
pub fn accumulate_masks(masks: &[MaskField]) -> Result<MaskField> {
    let first = masks
        .first()
        .ok_or_else(|| Error::EmptyInput("accumulate_masks".into()))?;
    let (rows, cols) = (first.rows, first.cols);
    let mut complement = Array2::<f64>::ones((rows, cols));
    let mut all_hard = true;
    for m in masks {
        if (m.rows, m.cols) != (rows, cols) {
            return Err(Error::shape(
                format!("{:?}", (rows, cols)),
                format!("{:?}", (m.rows, m.cols)),
            ));
        }
        all_hard &= m.mode == MaskMode::Hard;
        for (q, &w) in complement.iter_mut().zip(m.weights.iter()) {
            *q *= 1.0 - w;
        }
    }
    let weights = complement.mapv(|q| 1.0 - q);
    Ok(MaskField {
        rows,
        cols,
        weights,
        mode: if all_hard {
            MaskMode::Hard
        } else {
            MaskMode::Soft
        },
    })
}

/// Analytic gradient of the soft mask: for each design component, the plane
/// of `d weight / d xi_l`. Uses leave-one-out complement products so lines
/// sitting on top of each other stay numerically stable.
fn mask_gradient(
    xi: &DesignParameter,
    rows: usize,
    cols: usize,
    width: f64,
    temperature: f64,
) -> Result<Vec<Array2<f64>>> {
    check_relaxation(width, temperature)?;
    // Per primitive (line or spiral): sigmoid weight plane plus, per design
    // component of that primitive, the distance derivative plane.
    let (dists, dist_grads): (Vec<Array2<f64>>, Vec<Vec<Array2<f64>>>) = match xi.pattern() {
        TrajectoryPattern::Radial => xi
            .values()
            .iter()
            .map(|&a| {
                (
                    radial_distances(rows, cols, a),
                    vec![radial_distance_grad(rows, cols, a)],
                )
            })
            .unzip(),
        TrajectoryPattern::Cartesian => xi
            .values()
            .iter()
            .map(|&coord| {
                (
                    cartesian_distances(rows, cols, coord),
                    vec![cartesian_distance_grad(rows, cols, coord)],
                )
            })
            .unzip(),
        TrajectoryPattern::Spiral => {
            let mut ds = Vec::new();
            let mut gs = Vec::new();
            for triple in xi.values().chunks(3) {
                let (a, b, phase) = (triple[0], triple[1], triple[2]);
                if b < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "negative spiral radius growth b = {b}"
                    )));
                }
                let pts = spiral_points(rows, cols, a, b, phase);
                let (dist, arg) = spiral_distances(rows, cols, &pts, a, b, phase);
                // Envelope differentiation at the nearest curve point:
                // d dist / d param = -(p - k(s*)) . dk/dparam / dist.
                let (rc, cc) = center(rows, cols);
                let mut ga = Array2::zeros((rows, cols));
                let mut gb = Array2::zeros((rows, cols));
                let mut gp = Array2::zeros((rows, cols));
                for r in 0..rows {
                    for c in 0..cols {
                        let s = arg[[r, c]];
                        let ((kx, ky), _) = spiral_eval(a, b, phase, s);
                        let d = dist[[r, c]];
                        if d < 1e-9 {
                            continue;
                        }
                        let ex = (c as f64 - cc - kx) / d;
                        let ey = (r as f64 - rc - ky) / d;
                        let psi = 2.0 * std::f64::consts::PI * s + phase;
                        let (sin, cos) = psi.sin_cos();
                        let radius = a + b * s;
                        ga[[r, c]] = -(ex * cos + ey * sin);
                        gb[[r, c]] = -(ex * cos + ey * sin) * s;
                        gp[[r, c]] = -(ex * (-radius * sin) + ey * (radius * cos));
                    }
                }
                ds.push(dist);
                gs.push(vec![ga, gb, gp]);
            }
            (ds, gs)
        }
    };

    let n_prim = dists.len();
    let mut sig = Vec::with_capacity(n_prim);
    for d in &dists {
        sig.push(d.mapv(|dd| sigmoid((width - dd) / temperature)));
    }

    // Leave-one-out products of (1 - s) per pixel, via prefix/suffix scans.
    let npx = rows * cols;
    let mut prefix = vec![1.0; npx];
    let mut grads: Vec<Array2<f64>> = Vec::with_capacity(xi.dim());
    let mut loo = vec![vec![0.0; npx]; n_prim];
    let mut suffix = vec![1.0; npx];
    for l in (0..n_prim).rev() {
        for (px, q) in sig[l].iter().enumerate() {
            loo[l][px] = suffix[px];
            suffix[px] *= 1.0 - q;
        }
    }
    for l in 0..n_prim {
        for (px, q) in sig[l].iter().enumerate() {
            loo[l][px] *= prefix[px];
            prefix[px] *= 1.0 - q;
        }
    }

    for (l, per_prim) in dist_grads.iter().enumerate() {
        for dgrad in per_prim {
            let mut g = Array2::zeros((rows, cols));
            for (px, gv) in g.iter_mut().enumerate() {
                let s = sig[l].as_slice().unwrap()[px];
                let dd = dgrad.as_slice().unwrap()[px];
                // d weight / d xi = loo * s (1 - s) * (-1/T) * d dist / d xi
                *gv = loo[l][px] * s * (1.0 - s) * (-dd / temperature);
            }
            grads.push(g);
        }
    }
    Ok(grads)
}
