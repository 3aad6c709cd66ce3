//! Acquisition geometry, angle schedules and the shared data model.
//!
//! Angles are radians in `f64`; detector payloads are `f32`. Everything in
//! here is plain data or a pure function and can be shared across threads.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Detector and scan configuration for a parallel-beam acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionGeometry {
    pub detector_columns: usize,
    pub detector_rows: usize,
    pub rotations: usize,
    pub projections_per_rotation: usize,
    /// Angular coverage of one rotation, in radians. Defaults to a half turn.
    pub angle_range: f64,
    /// Reconstructed slices are `image_size × image_size`.
    pub image_size: usize,
    pub pixel_size: f64,
}

impl AcquisitionGeometry {
    /// Half-turn geometry with unit pixels and one detector bin per image column.
    pub fn new(
        image_size: usize,
        detector_rows: usize,
        rotations: usize,
        projections_per_rotation: usize,
    ) -> Result<Self> {
        let geometry = AcquisitionGeometry {
            detector_columns: image_size,
            detector_rows,
            rotations,
            projections_per_rotation,
            angle_range: PI,
            image_size,
            pixel_size: 1.0,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.detector_columns == 0
            || self.detector_rows == 0
            || self.rotations == 0
            || self.projections_per_rotation == 0
            || self.image_size == 0
        {
            return Err(Error::invalid("geometry counts must all be positive"));
        }
        check_range(self.angle_range)?;
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return Err(Error::invalid("pixel_size must be positive"));
        }
        Ok(())
    }

    pub fn total_projections(&self) -> usize {
        self.rotations * self.projections_per_rotation
    }

    /// Emission-ordered schedule covering every projection of the scan.
    pub fn schedule(&self, kind: ScheduleKind) -> Result<Vec<ScheduledAngle>> {
        match kind {
            ScheduleKind::Interleaved => {
                interleaved_schedule(self.rotations, self.projections_per_rotation, self.angle_range)
            }
            ScheduleKind::FixedAngle => {
                let total = self.total_projections();
                let angles =
                    fixed_angle_schedule(0.0, self.angle_range / total as f64, total, self.angle_range)?;
                Ok(angles
                    .into_iter()
                    .enumerate()
                    .map(|(k, angle)| ScheduledAngle {
                        rotation_index: k / self.projections_per_rotation,
                        angle,
                    })
                    .collect())
            }
        }
    }
}

fn check_range(range: f64) -> Result<()> {
    if !(range > 0.0 && range <= 2.0 * PI) {
        return Err(Error::invalid(format!("angle range {range} outside (0, 2π]")));
    }
    Ok(())
}

/// Wraps `angle` into `[0, range)`.
fn wrap(angle: f64, range: f64) -> f64 {
    let wrapped = angle.rem_euclid(range);
    if wrapped >= range {
        0.0
    } else {
        wrapped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    FixedAngle,
    Interleaved,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed_angle" | "fixed-angle" => Ok(ScheduleKind::FixedAngle),
            "interleaved" => Ok(ScheduleKind::Interleaved),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::FixedAngle => "fixed",
            ScheduleKind::Interleaved => "interleaved",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledAngle {
    pub rotation_index: usize,
    pub angle: f64,
}

/// Start at `start` and advance by `offset`, wrapping into `[0, range)`.
pub fn fixed_angle_schedule(start: f64, offset: f64, count: usize, range: f64) -> Result<Vec<f64>> {
    if !(offset > 0.0) || !offset.is_finite() {
        return Err(Error::invalid("angle offset must be positive"));
    }
    if count == 0 {
        return Err(Error::invalid("projection count must be at least 1"));
    }
    if !start.is_finite() {
        return Err(Error::invalid("start angle must be finite"));
    }
    check_range(range)?;
    Ok((0..count)
        .map(|k| wrap(start + k as f64 * offset, range))
        .collect())
}

/// Rotation-major interleaved schedule.
///
/// Rotation `r` visits `k·(range/per_rotation) + r·(range/(per_rotation·rotations))`
/// for `k = 0..per_rotation`, so each rotation covers the whole range coarsely and
/// the union of all rotations is the uniform grid of `rotations·per_rotation` angles.
pub fn interleaved_schedule(
    rotations: usize,
    per_rotation: usize,
    range: f64,
) -> Result<Vec<ScheduledAngle>> {
    if rotations == 0 || per_rotation == 0 {
        return Err(Error::invalid("rotations and per_rotation must be positive"));
    }
    check_range(range)?;
    let step = range / (per_rotation * rotations) as f64;
    let mut out = Vec::with_capacity(rotations * per_rotation);
    for r in 0..rotations {
        for k in 0..per_rotation {
            let grid_index = k * rotations + r;
            out.push(ScheduledAngle {
                rotation_index: r,
                angle: wrap(grid_index as f64 * step, range),
            });
        }
    }
    Ok(out)
}

/// Inscribed-circle support: true where `(i−c)² + (j−c)² ≤ (N/2)²`, `c = (N−1)/2`.
pub fn make_support_mask(n: usize) -> Array2<bool> {
    let c = (n as f64 - 1.0) / 2.0;
    let r2 = (n as f64 / 2.0).powi(2);
    Array2::from_shape_fn((n, n), |(i, j)| {
        let di = i as f64 - c;
        let dj = j as f64 - c;
        di * di + dj * dj <= r2
    })
}

/// One measured projection, or a contiguous block of its detector rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionFrame {
    pub seq: u64,
    pub rotation_index: u32,
    pub angle: f64,
    pub row_start: u32,
    /// Nanoseconds since stream start.
    pub timestamp_ns: u64,
    /// `row_count × columns` attenuation values.
    pub payload: Array2<f32>,
}

impl ProjectionFrame {
    pub fn row_count(&self) -> usize {
        self.payload.nrows()
    }

    pub fn columns(&self) -> usize {
        self.payload.ncols()
    }

    pub fn row_end(&self) -> usize {
        self.row_start as usize + self.row_count()
    }

    /// Checks that the frame fits inside a detector with `detector_rows` rows.
    pub fn check_rows(&self, detector_rows: usize) -> Result<()> {
        if self.row_end() > detector_rows {
            return Err(Error::Routing(format!(
                "frame {} rows [{}, {}) exceed detector height {}",
                self.seq,
                self.row_start,
                self.row_end(),
                detector_rows
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEntry {
    pub seq: u64,
    pub angle: f64,
    pub row: Vec<f32>,
}

/// The most recent projection rows for one slice, awaiting reconstruction.
#[derive(Debug, Clone)]
pub struct SinogramWindow {
    pub slice_id: usize,
    capacity: usize,
    columns: usize,
    entries: Vec<WindowEntry>,
}

impl SinogramWindow {
    pub fn new(slice_id: usize, capacity: usize, columns: usize) -> Result<Self> {
        if capacity == 0 || columns == 0 {
            return Err(Error::invalid("window capacity and columns must be positive"));
        }
        Ok(SinogramWindow {
            slice_id,
            capacity,
            columns,
            entries: Vec::with_capacity(capacity),
        })
    }

    /// Builds a window holding exactly the given rows (capacity = row count).
    pub fn from_rows(slice_id: usize, angles: &[f64], rows: &Array2<f64>) -> Result<Self> {
        if angles.len() != rows.nrows() {
            return Err(Error::invalid("angle count does not match sinogram rows"));
        }
        let mut window = SinogramWindow::new(slice_id, angles.len().max(1), rows.ncols())?;
        for (k, (&angle, row)) in angles.iter().zip(rows.rows()).enumerate() {
            window.push(k as u64, angle, row.iter().map(|&v| v as f32).collect())?;
        }
        Ok(window)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn entries(&self) -> &[WindowEntry] {
        &self.entries
    }

    pub fn angles(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.angle).collect()
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.entries.last().map(|e| e.seq)
    }

    pub fn push(&mut self, seq: u64, angle: f64, row: Vec<f32>) -> Result<()> {
        if row.len() != self.columns {
            return Err(Error::invalid(format!(
                "row has {} columns, window expects {}",
                row.len(),
                self.columns
            )));
        }
        if self.is_full() {
            return Err(Error::invalid(format!("window for slice {} is full", self.slice_id)));
        }
        self.entries.push(WindowEntry { seq, angle, row });
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// A reconstructed slice estimate, carried across windows as warm-start state.
#[derive(Debug, Clone, PartialEq)]
pub struct Tomogram {
    pub slice_id: usize,
    pub values: Array2<f64>,
    pub update_count: u64,
    pub support_mask: Arc<Array2<bool>>,
}

impl Tomogram {
    pub fn zeros(slice_id: usize, n: usize) -> Self {
        Tomogram::with_mask(slice_id, Arc::new(make_support_mask(n)))
    }

    pub fn with_mask(slice_id: usize, support_mask: Arc<Array2<bool>>) -> Self {
        Tomogram {
            slice_id,
            values: Array2::zeros(support_mask.raw_dim()),
            update_count: 0,
            support_mask,
        }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// Zeroes every pixel outside the support.
    pub fn apply_support(&mut self) {
        self.values.zip_mut_with(&self.support_mask, |v, &inside| {
            if !inside {
                *v = 0.0;
            }
        });
    }
}
