//! Streaming reconstruction runtime.
//!
//! A [`WorkerState`] owns a contiguous block of slices. Every incoming
//! sub-frame contributes one row to each owned slice's window; once a window
//! holds `W` rows it is reconstructed with warm-started SIRT and emptied.
//!
//! Within one reconstruction the window's angles are split across `T` lanes.
//! Each lane computes its partial correction against the same iteration-start
//! estimate; partials are summed in ascending lane order and applied once per
//! iteration, so the result is independent of scheduling.

use std::sync::mpsc::{Receiver, Sender};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::distributor::RowPartition;
use crate::error::{Error, Result};
use crate::geometry::{make_support_mask, ProjectionFrame, SinogramWindow, Tomogram};
use crate::projector::{apply_correction, OperatorScales, Projector, ScaleCache, SirtConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub sirt: SirtConfig,
    /// Rows per window (`W`).
    pub window: usize,
    /// Parallel lanes per reconstruction (`T`).
    pub lanes: usize,
    /// Start each window from the previous estimate rather than zero.
    pub warm_start: bool,
}

impl EngineConfig {
    pub fn new(window: usize, iterations: usize, lanes: usize) -> Self {
        EngineConfig {
            sirt: SirtConfig::with_iterations(iterations),
            window,
            lanes,
            warm_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sirt.validate()?;
        if self.window == 0 || self.lanes == 0 {
            return Err(Error::invalid("window size and lane count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEvent {
    pub slice_id: usize,
    /// 1-based trigger count for this slice.
    pub update_index: u64,
    /// Seq of the last frame included.
    pub trigger_seq: u64,
    pub recon_elapsed: Duration,
    pub projections_consumed: usize,
    /// Set for an end-of-stream flush of an incomplete window.
    pub partial: bool,
    /// Completion time relative to the worker's clock origin.
    pub completed_at: Duration,
}

/// Latest completed tomogram for one slice, readable from any thread.
#[derive(Debug, Clone, Default)]
pub struct SnapshotCell(Arc<RwLock<Option<Arc<Tomogram>>>>);

impl SnapshotCell {
    fn publish(&self, tomogram: Arc<Tomogram>) {
        *self.0.write().expect("snapshot lock poisoned") = Some(tomogram);
    }

    pub fn latest(&self) -> Option<Arc<Tomogram>> {
        self.0.read().expect("snapshot lock poisoned").clone()
    }
}

struct SliceState {
    window: SinogramWindow,
    tomogram: Tomogram,
    triggers: u64,
    snapshot: SnapshotCell,
}

pub struct WorkerState {
    partition: RowPartition,
    projector: Projector,
    cfg: EngineConfig,
    slices: Vec<SliceState>,
    cache: Arc<ScaleCache>,
    clock: Instant,
}

/// Balanced contiguous ranges over `0..len`.
fn lane_ranges(len: usize, lanes: usize) -> Vec<std::ops::Range<usize>> {
    let lanes = lanes.min(len).max(1);
    let base = len / lanes;
    let extra = len % lanes;
    let mut start = 0;
    (0..lanes)
        .map(|l| {
            let end = start + base + usize::from(l < extra);
            let r = start..end;
            start = end;
            r
        })
        .collect()
}

/// Runs `cfg.sirt.iterations` lane-parallel SIRT passes over `window`,
/// starting from `start`.
pub fn lane_parallel_sirt(
    projector: &Projector,
    start: &Tomogram,
    window: &SinogramWindow,
    scales: &OperatorScales,
    cfg: &SirtConfig,
    lanes: usize,
) -> Tomogram {
    let mut x = start.clone();
    let angles = window.angles();
    let rows: Vec<&[f32]> = window.entries().iter().map(|e| e.row.as_slice()).collect();
    let ranges = lane_ranges(angles.len(), lanes);
    let columns = projector.columns();
    let pixels = projector.image_size() * projector.image_size();
    for _ in 0..cfg.iterations {
        let current = x.values.as_slice().expect("standard layout");
        let partials: Vec<Vec<f64>> = ranges
            .par_iter()
            .map(|r| {
                let mut buf = vec![0.0; pixels];
                projector.sirt_correction(
                    current,
                    &angles[r.clone()],
                    &rows[r.clone()],
                    &scales.row_scale[r.start * columns..r.end * columns],
                    &mut buf,
                );
                buf
            })
            .collect();
        let mut partials = partials.into_iter();
        let mut total = partials.next().expect("at least one lane");
        for lane in partials {
            for (t, v) in total.iter_mut().zip(&lane) {
                *t += v;
            }
        }
        apply_correction(&mut x, &total, scales, cfg);
    }
    x
}

impl WorkerState {
    pub fn new(
        partition: RowPartition,
        projector: Projector,
        cfg: EngineConfig,
        cache: Arc<ScaleCache>,
        clock: Instant,
    ) -> Result<Self> {
        cfg.validate()?;
        let mask = Arc::new(make_support_mask(projector.image_size()));
        let slices = (partition.row_start..partition.row_end())
            .map(|slice_id| {
                Ok(SliceState {
                    window: SinogramWindow::new(slice_id, cfg.window, projector.columns())?,
                    tomogram: Tomogram::with_mask(slice_id, Arc::clone(&mask)),
                    triggers: 0,
                    snapshot: SnapshotCell::default(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(WorkerState {
            partition,
            projector,
            cfg,
            slices,
            cache,
            clock,
        })
    }

    pub fn partition(&self) -> RowPartition {
        self.partition
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    fn local(&self, slice_id: usize) -> Result<usize> {
        if !self.partition.contains(slice_id) {
            return Err(Error::Routing(format!(
                "slice {slice_id} is not owned by worker {}",
                self.partition.worker_id
            )));
        }
        Ok(slice_id - self.partition.row_start)
    }

    /// Appends the sub-frame's rows to their windows and reconstructs every
    /// window that became full.
    pub fn push_projection(&mut self, sub_frame: &ProjectionFrame) -> Result<Vec<UpdateEvent>> {
        let start = sub_frame.row_start as usize;
        if start < self.partition.row_start || sub_frame.row_end() > self.partition.row_end() {
            return Err(Error::Routing(format!(
                "frame {} rows [{start}, {}) outside worker {} partition [{}, {})",
                sub_frame.seq,
                sub_frame.row_end(),
                self.partition.worker_id,
                self.partition.row_start,
                self.partition.row_end()
            )));
        }
        if sub_frame.columns() != self.projector.columns() {
            return Err(Error::Routing(format!(
                "frame {} has {} columns, expected {}",
                sub_frame.seq,
                sub_frame.columns(),
                self.projector.columns()
            )));
        }
        let mut full = Vec::new();
        for (r, row) in sub_frame.payload.rows().into_iter().enumerate() {
            let local = start + r - self.partition.row_start;
            let slice = &mut self.slices[local];
            slice.window.push(sub_frame.seq, sub_frame.angle, row.to_vec())?;
            if slice.window.is_full() {
                full.push(local);
            }
        }
        full.into_iter()
            .map(|local| self.trigger(local, false))
            .collect()
    }

    /// Reconstructs every non-empty window, marking the events partial.
    pub fn flush(&mut self) -> Result<Vec<UpdateEvent>> {
        (0..self.slices.len())
            .filter(|&l| !self.slices[l].window.is_empty())
            .collect::<Vec<_>>()
            .into_iter()
            .map(|l| self.trigger(l, true))
            .collect()
    }

    fn trigger(&mut self, local: usize, partial: bool) -> Result<UpdateEvent> {
        let started = Instant::now();
        let slice_id = self.partition.row_start + local;
        let tomogram = self.reconstruct_window(slice_id)?;
        let slice = &mut self.slices[local];
        let consumed = slice.window.len();
        let trigger_seq = slice.window.last_seq().expect("non-empty window");
        slice.window.clear();
        slice.triggers += 1;
        slice.snapshot.publish(Arc::new(tomogram.clone()));
        slice.tomogram = tomogram;
        Ok(UpdateEvent {
            slice_id,
            update_index: slice.triggers,
            trigger_seq,
            recon_elapsed: started.elapsed(),
            projections_consumed: consumed,
            partial,
            completed_at: self.clock.elapsed(),
        })
    }

    /// SIRT over the slice's current window, warm-started from its estimate.
    /// Does not modify the worker's state.
    pub fn reconstruct_window(&self, slice_id: usize) -> Result<Tomogram> {
        let slice = &self.slices[self.local(slice_id)?];
        if slice.window.is_empty() {
            return Err(Error::invalid(format!("window for slice {slice_id} is empty")));
        }
        if self.cfg.sirt.iterations == 0 {
            return Ok(slice.tomogram.clone());
        }
        let start = if self.cfg.warm_start {
            slice.tomogram.clone()
        } else {
            Tomogram {
                values: ndarray::Array2::zeros(slice.tomogram.values.raw_dim()),
                ..slice.tomogram.clone()
            }
        };
        let scales = self.cache.get_or_compute(&self.projector, &slice.window.angles())?;
        let mut out = lane_parallel_sirt(
            &self.projector,
            &start,
            &slice.window,
            &scales,
            &self.cfg.sirt,
            self.cfg.lanes,
        );
        out.update_count += 1;
        Ok(out)
    }

    /// Copy of the most recently completed update.
    pub fn snapshot(&self, slice_id: usize) -> Result<Tomogram> {
        self.snapshot_cell(slice_id)?
            .latest()
            .map(|t| (*t).clone())
            .ok_or(Error::NotReady(slice_id))
    }

    pub fn snapshot_cell(&self, slice_id: usize) -> Result<SnapshotCell> {
        Ok(self.slices[self.local(slice_id)?].snapshot.clone())
    }

    pub fn window_len(&self, slice_id: usize) -> Result<usize> {
        Ok(self.slices[self.local(slice_id)?].window.len())
    }

    /// The live warm-start estimate.
    pub fn tomogram(&self, slice_id: usize) -> Result<&Tomogram> {
        Ok(&self.slices[self.local(slice_id)?].tomogram)
    }
}

/// An update and the tomogram it produced.
#[derive(Debug, Clone)]
pub struct SliceUpdate {
    pub event: UpdateEvent,
    pub tomogram: Arc<Tomogram>,
}

/// Feeds sub-frames from `rx` into `state` until the queue closes, then
/// optionally flushes partial windows. Updates go to `out` in per-slice order.
pub fn run_worker(
    mut state: WorkerState,
    rx: Receiver<ProjectionFrame>,
    out: Sender<SliceUpdate>,
    flush: bool,
) -> Result<WorkerState> {
    let publish = |state: &WorkerState, events: Vec<UpdateEvent>| -> Result<()> {
        for event in events {
            let tomogram = state
                .snapshot_cell(event.slice_id)?
                .latest()
                .expect("published before event");
            out.send(SliceUpdate { event, tomogram })
                .map_err(|_| Error::Pipeline("update queue closed".into()))?;
        }
        Ok(())
    };
    for frame in rx {
        let events = state.push_projection(&frame)?;
        publish(&state, events)?;
    }
    if flush {
        let events = state.flush()?;
        publish(&state, events)?;
    }
    Ok(state)
}
