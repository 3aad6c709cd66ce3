//! Streaming tomography with sliding-window SIRT.
//!
//! Projections arrive one at a time from a (simulated) detector, are split by
//! detector row across workers, and every `W` arrivals each slice is refined
//! with `I` warm-started SIRT iterations. Each update can pass through an
//! enhancement stage before it is scored against an offline reference.
//!
//! The runnable programs under `examples/` walk through each stage:
//!
//! ```bash
//! cargo run --release --example phantom_scan
//! cargo run --release --example sirt_reconstruct
//! cargo run --release --example streaming_pipeline
//! cargo run --release --example two_process_loopback
//! cargo run --release --example denoiser_service
//! cargo run --release --example parameter_grid
//! ```

pub mod acquisition;
pub mod distributor;
pub mod engine;
pub mod enhancer;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod transport;

pub use acquisition::{simulate_scan, stream_emit, EmitRate, NoiseModel, PhantomVolume};
pub use distributor::{decode_frame, encode_frame, partition_rows, route_frame, Distributor, FrameReader, RowPartition};
pub use engine::{EngineConfig, SliceUpdate, UpdateEvent, WorkerState};
pub use enhancer::{enhance, DenoiserBinding, DenoiserMode, DenoiserService, Enhancer};
pub use error::{Error, Result};
pub use geometry::{
    fixed_angle_schedule, interleaved_schedule, make_support_mask, AcquisitionGeometry, ProjectionFrame,
    ScheduleKind, SinogramWindow, Tomogram,
};
pub use metrics::{make_ground_truth, ssim, QualityCollector, QualityRecord, ThroughputRecord};
pub use phantom::{make_phantom, PhantomKind, PhantomSpec};
pub use pipeline::{run_detector, run_grid, run_pipeline, Processor, RunConfig, RunSummary};
pub use projector::{beer_normalize, sirt_update, OperatorScales, Projector, SirtConfig};
