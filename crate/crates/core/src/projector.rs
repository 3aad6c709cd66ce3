//! Parallel-beam projection operators and the SIRT update kernel.
//!
//! The system matrix `A` is never stored. Each ray is traced at unit steps
//! along its direction, and every sample distributes a bilinear weight over
//! its four neighbouring pixels. Forward and back projection walk exactly the
//! same samples, so `back_project` is the transpose of `forward_project` up
//! to rounding.
//!
//! Coordinates are in pixel units centred on the image: pixel `(i, j)` sits at
//! `(x, y) = (j − c, i − c)` with `c = (N − 1)/2`. A ray at angle `θ` and
//! detector offset `s` is `p(t) = s·(cos θ, sin θ) + t·(−sin θ, cos θ)`.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::geometry::{SinogramWindow, Tomogram};

/// Lower clamp on photon counts before taking the logarithm.
pub const MIN_COUNTS: f64 = 1.0;

const SCALE_GUARD: f64 = 1e-12;

/// Inverts Beer's law: `−ln(max(I − dark, 1) / (flat − dark))`.
pub fn beer_normalize(intensity: f64, flat: f64, dark: f64) -> Result<f64> {
    if !(flat > dark) || dark < 0.0 {
        return Err(Error::invalid(format!(
            "flat field ({flat}) must exceed dark field ({dark}) and dark must be non-negative"
        )));
    }
    let transmitted = (intensity - dark).max(MIN_COUNTS);
    Ok(-(transmitted / (flat - dark)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SirtConfig {
    pub iterations: usize,
    /// Relaxation factor, must lie in (0, 2).
    pub relaxation: f64,
    pub apply_support: bool,
    pub nonneg_clamp: bool,
}

impl Default for SirtConfig {
    fn default() -> Self {
        SirtConfig {
            iterations: 10,
            relaxation: 1.0,
            apply_support: true,
            nonneg_clamp: true,
        }
    }
}

impl SirtConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        SirtConfig {
            iterations,
            ..SirtConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::invalid(format!(
                "relaxation {} outside (0, 2)",
                self.relaxation
            )));
        }
        Ok(())
    }
}

/// Diagonal SIRT normalisers for one ordered angle set.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorScales {
    /// Reciprocal row sums of `A`, indexed `angle · columns + column`.
    pub row_scale: Vec<f64>,
    /// Reciprocal column sums of `A`, row-major over the image.
    pub col_scale: Vec<f64>,
    pub angle_set_key: u64,
}

/// The discretised parallel-beam operator for `N × N` images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projector {
    n: usize,
    columns: usize,
    pixel_size: f64,
}

impl Projector {
    pub fn new(n: usize, columns: usize, pixel_size: f64) -> Result<Self> {
        if n == 0 || columns == 0 {
            return Err(Error::invalid("image size and detector columns must be positive"));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::invalid("pixel_size must be positive"));
        }
        Ok(Projector {
            n,
            columns,
            pixel_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.n
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    /// Visits every `(pixel index, weight)` pair of one ray.
    #[inline]
    fn trace_ray<F: FnMut(usize, f64)>(&self, cos: f64, sin: f64, column: usize, mut visit: F) {
        let n = self.n;
        let c = (n as f64 - 1.0) / 2.0;
        let spacing = n as f64 / self.columns as f64;
        let s = (column as f64 + 0.5) * spacing - n as f64 / 2.0;
        let (ox, oy) = (s * cos, s * sin);
        let (dx, dy) = (-sin, cos);

        // Bilinear weights vanish once |x| or |y| reaches c + 1.
        let bound = c + 1.0;
        let mut t_lo = f64::NEG_INFINITY;
        let mut t_hi = f64::INFINITY;
        for (o, d) in [(ox, dx), (oy, dy)] {
            if d.abs() < 1e-12 {
                if o.abs() >= bound {
                    return;
                }
            } else {
                let a = (-bound - o) / d;
                let b = (bound - o) / d;
                t_lo = t_lo.max(a.min(b));
                t_hi = t_hi.min(a.max(b));
            }
        }
        if t_lo > t_hi {
            return;
        }

        let last = n as isize - 1;
        for m in (t_lo.ceil() as i64)..=(t_hi.floor() as i64) {
            let t = m as f64;
            let fx = ox + t * dx + c;
            let fy = oy + t * dy + c;
            let j0 = fx.floor();
            let i0 = fy.floor();
            let wx = fx - j0;
            let wy = fy - i0;
            let (j0, i0) = (j0 as isize, i0 as isize);
            let corners = [
                (i0, j0, (1.0 - wy) * (1.0 - wx)),
                (i0, j0 + 1, (1.0 - wy) * wx),
                (i0 + 1, j0, wy * (1.0 - wx)),
                (i0 + 1, j0 + 1, wy * wx),
            ];
            for (i, j, w) in corners {
                if w > 0.0 && (0..=last).contains(&i) && (0..=last).contains(&j) {
                    visit(i as usize * n + j as usize, w * self.pixel_size);
                }
            }
        }
    }

    fn check_image(&self, image: &ArrayView2<'_, f64>) -> Result<()> {
        if image.dim() != (self.n, self.n) {
            return Err(Error::invalid(format!(
                "image is {:?}, projector expects {n}x{n}",
                image.dim(),
                n = self.n
            )));
        }
        Ok(())
    }

    /// Line integrals of `image` for every angle and detector column.
    pub fn forward_project(&self, image: &Array2<f64>, angles: &[f64]) -> Result<Array2<f64>> {
        if angles.is_empty() {
            return Err(Error::invalid("forward projection needs at least one angle"));
        }
        self.check_image(&image.view())?;
        let pixels = image.as_standard_layout();
        let pixels = pixels.as_slice().expect("standard layout");
        let mut sino = Array2::zeros((angles.len(), self.columns));
        for (a, mut row) in angles.iter().zip(sino.rows_mut()) {
            let (sin, cos) = a.sin_cos();
            for (k, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                self.trace_ray(cos, sin, k, |idx, w| acc += pixels[idx] * w);
                *out = acc;
            }
        }
        Ok(sino)
    }

    /// The exact adjoint of [`Projector::forward_project`].
    pub fn back_project(&self, sinogram: &Array2<f64>, angles: &[f64]) -> Result<Array2<f64>> {
        if sinogram.dim() != (angles.len(), self.columns) {
            return Err(Error::invalid(format!(
                "sinogram is {:?}, expected ({}, {})",
                sinogram.dim(),
                angles.len(),
                self.columns
            )));
        }
        let mut image = vec![0.0; self.n * self.n];
        for (a, row) in angles.iter().zip(sinogram.rows()) {
            let (sin, cos) = a.sin_cos();
            for (k, &value) in row.iter().enumerate() {
                if value != 0.0 {
                    self.trace_ray(cos, sin, k, |idx, w| image[idx] += value * w);
                }
            }
        }
        Ok(Array2::from_shape_vec((self.n, self.n), image).expect("n*n buffer"))
    }

    /// Key identifying an ordered angle list for this operator.
    pub fn angle_set_key(&self, angles: &[f64]) -> u64 {
        let mut h = DefaultHasher::new();
        self.n.hash(&mut h);
        self.columns.hash(&mut h);
        self.pixel_size.to_bits().hash(&mut h);
        for a in angles {
            a.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Row and column normalisers from `A·1` and `Aᵀ·1`, zero-guarded.
    pub fn compute_scales(&self, angles: &[f64]) -> Result<OperatorScales> {
        let ones = Array2::from_elem((self.n, self.n), 1.0);
        let row_sums = self.forward_project(&ones, angles)?;
        let col_sums = self.back_project(&Array2::from_elem((angles.len(), self.columns), 1.0), angles)?;
        let recip = |v: &f64| if *v < SCALE_GUARD { 0.0 } else { 1.0 / v };
        Ok(OperatorScales {
            row_scale: row_sums.iter().map(recip).collect(),
            col_scale: col_sums.iter().map(recip).collect(),
            angle_set_key: self.angle_set_key(angles),
        })
    }

    /// Accumulates `Aᵀ(R ⊙ (y − A x))` over a subset of window rows into `out`.
    ///
    /// `rows[k]` is measured at `angles[k]` and normalised by
    /// `row_scale[k·columns ..]`.
    pub fn sirt_correction(
        &self,
        x: &[f64],
        angles: &[f64],
        rows: &[&[f32]],
        row_scale: &[f64],
        out: &mut [f64],
    ) {
        debug_assert_eq!(angles.len(), rows.len());
        debug_assert_eq!(row_scale.len(), angles.len() * self.columns);
        for (a, (&angle, row)) in angles.iter().zip(rows).enumerate() {
            let (sin, cos) = angle.sin_cos();
            for (k, &measured) in row.iter().enumerate() {
                let scale = row_scale[a * self.columns + k];
                if scale == 0.0 {
                    continue;
                }
                let mut estimate = 0.0;
                self.trace_ray(cos, sin, k, |idx, w| estimate += x[idx] * w);
                let residual = scale * (measured as f64 - estimate);
                if residual != 0.0 {
                    self.trace_ray(cos, sin, k, |idx, w| out[idx] += residual * w);
                }
            }
        }
    }

    /// `‖y − A x‖₂` over the window's rows.
    pub fn residual_norm(&self, x: &Array2<f64>, window: &SinogramWindow) -> Result<f64> {
        let angles = window.angles();
        let estimate = self.forward_project(x, &angles)?;
        let mut sum = 0.0;
        for (entry, est) in window.entries().iter().zip(estimate.rows()) {
            for (&y, &e) in entry.row.iter().zip(est.iter()) {
                let d = y as f64 - e;
                sum += d * d;
            }
        }
        Ok(sum.sqrt())
    }
}

/// Applies `x ← x + λ·C ⊙ correction`, then the support and non-negativity
/// constraints.
pub fn apply_correction(
    tomogram: &mut Tomogram,
    correction: &[f64],
    scales: &OperatorScales,
    cfg: &SirtConfig,
) {
    let values = tomogram.values.as_slice_mut().expect("standard layout");
    for ((v, &corr), &c) in values.iter_mut().zip(correction).zip(&scales.col_scale) {
        *v += cfg.relaxation * c * corr;
        if cfg.nonneg_clamp && *v < 0.0 {
            *v = 0.0;
        }
    }
    if cfg.apply_support {
        tomogram.apply_support();
    }
}

fn check_scales(projector: &Projector, window: &SinogramWindow, scales: &OperatorScales) -> Result<()> {
    let expected = projector.angle_set_key(&window.angles());
    if scales.angle_set_key != expected
        || scales.row_scale.len() != window.len() * projector.columns
        || scales.col_scale.len() != projector.n * projector.n
    {
        return Err(Error::invalid("operator scales do not match the window's angle set"));
    }
    Ok(())
}

/// Runs `cfg.iterations` single-threaded SIRT passes over the window.
///
/// The returned tomogram has `update_count` advanced by one unless
/// `cfg.iterations` is zero, in which case it is returned unchanged.
pub fn sirt_update(
    projector: &Projector,
    x: &Tomogram,
    window: &SinogramWindow,
    cfg: &SirtConfig,
    scales: &OperatorScales,
) -> Result<Tomogram> {
    cfg.validate()?;
    check_scales(projector, window, scales)?;
    if window.columns() != projector.columns || x.size() != projector.n {
        return Err(Error::invalid("window or tomogram does not match the projector"));
    }
    let mut out = x.clone();
    if cfg.iterations == 0 {
        return Ok(out);
    }
    let angles = window.angles();
    let rows: Vec<&[f32]> = window.entries().iter().map(|e| e.row.as_slice()).collect();
    let mut correction = vec![0.0; projector.n * projector.n];
    for _ in 0..cfg.iterations {
        correction.iter_mut().for_each(|c| *c = 0.0);
        projector.sirt_correction(
            out.values.as_slice().expect("standard layout"),
            &angles,
            &rows,
            &scales.row_scale,
            &mut correction,
        );
        apply_correction(&mut out, &correction, scales, cfg);
    }
    out.update_count += 1;
    Ok(out)
}

/// Memoises [`OperatorScales`] by ordered angle set. Slices that share a
/// window's angles share one entry.
#[derive(Debug, Default)]
pub struct ScaleCache {
    entries: Mutex<HashMap<u64, (Vec<u64>, Arc<OperatorScales>)>>,
    capacity: usize,
}

impl ScaleCache {
    pub fn new(capacity: usize) -> Self {
        ScaleCache {
            entries: Mutex::new(HashMap::new()),
            capacity: capacity.max(1),
        }
    }

    pub fn get_or_compute(&self, projector: &Projector, angles: &[f64]) -> Result<Arc<OperatorScales>> {
        let key = projector.angle_set_key(angles);
        let bits: Vec<u64> = angles.iter().map(|a| a.to_bits()).collect();
        if let Some((stored, scales)) = self.entries.lock().expect("scale cache poisoned").get(&key) {
            if *stored == bits {
                return Ok(Arc::clone(scales));
            }
        }
        let scales = Arc::new(projector.compute_scales(angles)?);
        let mut entries = self.entries.lock().expect("scale cache poisoned");
        if entries.len() >= self.capacity {
            entries.clear();
        }
        entries.insert(key, (bits, Arc::clone(&scales)));
        Ok(scales)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("scale cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
