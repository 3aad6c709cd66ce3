//! Detector stand-in: clean projections, Poisson photon noise and paced emission.

use std::thread;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionGeometry, ProjectionFrame, ScheduledAngle};
use crate::projector::{beer_normalize, Projector};
use crate::transport::FrameSink;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Incident photons per detector bin.
    pub incident_counts: f64,
    pub enabled: bool,
    pub seed: u64,
}

impl NoiseModel {
    pub fn disabled() -> Self {
        NoiseModel {
            incident_counts: 1.0,
            enabled: false,
            seed: 0,
        }
    }

    pub fn poisson(incident_counts: f64, seed: u64) -> Self {
        NoiseModel {
            incident_counts,
            enabled: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.incident_counts > 0.0 && self.incident_counts.is_finite()) {
            return Err(Error::invalid("incident counts must be positive when noise is enabled"));
        }
        Ok(())
    }
}

/// The object being scanned, one 2-D slice per detector row.
#[derive(Debug, Clone)]
pub enum PhantomVolume {
    /// The same slice under every detector row.
    Replicated(Array2<f64>),
    /// One slice per detector row.
    Stacked(Vec<Array2<f64>>),
}

impl PhantomVolume {
    fn distinct_slices(&self) -> &[Array2<f64>] {
        match self {
            PhantomVolume::Replicated(p) => std::slice::from_ref(p),
            PhantomVolume::Stacked(v) => v,
        }
    }

    fn slice_for_row(&self, row: usize) -> usize {
        match self {
            PhantomVolume::Replicated(_) => 0,
            PhantomVolume::Stacked(_) => row,
        }
    }

    /// The phantom slice under detector row `row`.
    pub fn slice(&self, row: usize) -> &Array2<f64> {
        &self.distinct_slices()[self.slice_for_row(row)]
    }
}

/// Noiseless sinograms (`angles × columns`) for each distinct phantom slice.
pub fn clean_sinograms(
    volume: &PhantomVolume,
    projector: &Projector,
    angles: &[f64],
) -> Result<Vec<Array2<f64>>> {
    volume
        .distinct_slices()
        .par_iter()
        .map(|slice| projector.forward_project(slice, angles))
        .collect()
}

fn noisy_value(clean: f64, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> Result<f32> {
    let expected = noise.incident_counts * (-clean).exp();
    let counts = if expected > 0.0 && expected.is_finite() {
        Poisson::new(expected)
            .map_err(|e| Error::invalid(format!("poisson rate {expected}: {e}")))?
            .sample(rng)
    } else {
        0.0
    };
    Ok(beer_normalize(counts, noise.incident_counts, 0.0)? as f32)
}

/// Measures the volume at every scheduled angle.
///
/// Frames carry `seq` in schedule order and cover all detector rows. With noise
/// enabled each bin is drawn independently from a Poisson law; the random
/// stream for a frame depends only on `(noise.seed, seq)`.
pub fn simulate_scan(
    volume: &PhantomVolume,
    geometry: &AcquisitionGeometry,
    noise: &NoiseModel,
    schedule: &[ScheduledAngle],
) -> Result<Vec<ProjectionFrame>> {
    geometry.validate()?;
    noise.validate()?;
    if schedule.is_empty() {
        return Err(Error::invalid("schedule is empty"));
    }
    if let PhantomVolume::Stacked(v) = volume {
        if v.len() != geometry.detector_rows {
            return Err(Error::invalid(format!(
                "stack has {} slices for {} detector rows",
                v.len(),
                geometry.detector_rows
            )));
        }
    }
    if volume
        .distinct_slices()
        .iter()
        .any(|s| s.dim() != (geometry.image_size, geometry.image_size))
    {
        return Err(Error::invalid("phantom size does not match geometry"));
    }
    let projector = Projector::new(geometry.image_size, geometry.detector_columns, geometry.pixel_size)?;
    let angles: Vec<f64> = schedule.iter().map(|s| s.angle).collect();
    let clean = clean_sinograms(volume, &projector, &angles)?;

    let rows = geometry.detector_rows;
    let cols = geometry.detector_columns;
    schedule
        .par_iter()
        .enumerate()
        .map(|(m, sched)| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            rng.set_stream(m as u64);
            let mut payload = Array2::zeros((rows, cols));
            for r in 0..rows {
                let sino = &clean[volume.slice_for_row(r)];
                for k in 0..cols {
                    let p = sino[[m, k]];
                    payload[[r, k]] = if noise.enabled {
                        noisy_value(p, noise, &mut rng)?
                    } else {
                        p as f32
                    };
                }
            }
            Ok(ProjectionFrame {
                seq: m as u64,
                rotation_index: sched.rotation_index as u32,
                angle: sched.angle,
                row_start: 0,
                timestamp_ns: 0,
                payload,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmitRate {
    Unthrottled,
    /// Projections per second.
    PerSecond(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmissionReport {
    pub count: u64,
    pub elapsed: Duration,
}

/// Writes frames to `sink` in order, frame `k` no earlier than `k / rate`
/// seconds after the first. Timestamps are rewritten to emission time.
pub fn stream_emit<S: FrameSink + ?Sized>(
    frames: &[ProjectionFrame],
    rate: EmitRate,
    sink: &mut S,
) -> Result<EmissionReport> {
    if let EmitRate::PerSecond(r) = rate {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("emission rate {r} must be positive")));
        }
    }
    let start = Instant::now();
    let mut last_seq = None;
    let fail = |sink: &S, source, last_seq| Error::Connection {
        endpoint: sink.endpoint(),
        last_seq,
        source,
    };
    for (k, frame) in frames.iter().enumerate() {
        if let EmitRate::PerSecond(r) = rate {
            let due = Duration::from_secs_f64(k as f64 / r);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                thread::sleep(wait);
            }
        }
        let mut stamped = frame.clone();
        stamped.timestamp_ns = start.elapsed().as_nanos() as u64;
        if let Err(e) = sink.send_frame(&stamped) {
            return Err(fail(sink, e, last_seq));
        }
        last_seq = Some(frame.seq);
    }
    if let Err(e) = sink.finish() {
        return Err(fail(sink, e, last_seq));
    }
    Ok(EmissionReport {
        count: frames.len() as u64,
        elapsed: start.elapsed(),
    })
}
