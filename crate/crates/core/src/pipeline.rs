//! End-to-end orchestration: phantom → stream → distributor → workers →
//! enhancer → metrics.
//!
//! A run is described by a flat [`RunConfig`]. It can be executed in one
//! process ([`run_pipeline`]) or split into a detector that emits frames over
//! TCP ([`run_detector`]) and a [`Processor`] that ingests them. Both paths
//! share [`process_stream`], so for the same configuration they produce the
//! same numbers.
//!
//! Artifacts written under `out`:
//!
//! ```text
//! manifest.txt         resolved configuration, one key=value per line
//! quality.csv          one row per slice update
//! quality_mean.csv     slice-averaged curve
//! ground_truth/        reference reconstructions
//! snapshots/           per-update tomograms (raw + header + pgm)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, sync_channel};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use ndarray::Array2;

use crate::acquisition::{clean_sinograms, simulate_scan, stream_emit, EmissionReport, EmitRate, NoiseModel, PhantomVolume};
use crate::distributor::{Distributor, FrameReader, IngestReport};
use crate::engine::{run_worker, EngineConfig, UpdateEvent, WorkerState};
use crate::enhancer::{pipeline_stage, DenoiserBinding, DenoiserMode, InputScale};
use crate::error::{Error, Result};
use crate::geometry::{AcquisitionGeometry, ProjectionFrame, ScheduleKind, ScheduledAngle, Tomogram};
use crate::metrics::{
    export_image, ground_truth_config, make_ground_truth, mean_curve, write_mean_curve, QualityCollector,
    QualityRecord, ThroughputRecord,
};
use crate::phantom::{make_phantom, make_phantom_stack, PhantomKind, PhantomSpec};
use crate::projector::{Projector, ScaleCache, SirtConfig};
use crate::transport::{connect_tcp, ChannelSink};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomKind,
    pub size: usize,
    /// Overrides the phantom kind's default feature count.
    pub features: Option<usize>,
    /// One seeded phantom per detector row instead of a replicated slice.
    pub stacked: bool,
    pub rows: usize,
    /// Detector columns; defaults to `size`.
    pub columns: Option<usize>,
    pub rotations: usize,
    pub per_rotation: usize,
    pub schedule: ScheduleKind,
    pub window: usize,
    pub iterations: usize,
    pub relax: f64,
    pub workers: usize,
    pub lanes: usize,
    pub warm_start: bool,
    /// Incident photons per bin; `None` disables noise.
    pub noise_i0: Option<f64>,
    pub seed: u64,
    pub denoiser: DenoiserMode,
    pub denoiser_endpoint: Option<String>,
    pub denoiser_timeout: Duration,
    pub input_scale: InputScale,
    pub enhancer_threads: usize,
    /// Projections per second; `None` is unthrottled.
    pub rate: Option<f64>,
    pub listen: Option<String>,
    pub connect: Option<String>,
    pub out: PathBuf,
    /// Keep every k-th snapshot; `Some(0)` keeps none. Defaults by image size.
    pub snapshot_every: Option<usize>,
    pub flush: bool,
    pub ground_truth: bool,
    pub queue_depth: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phantom: PhantomKind::SheppLogan,
            size: 128,
            features: None,
            stacked: false,
            rows: 4,
            columns: None,
            rotations: 20,
            per_rotation: 16,
            schedule: ScheduleKind::Interleaved,
            window: 16,
            iterations: 10,
            relax: 1.0,
            workers: 1,
            lanes: 1,
            warm_start: true,
            noise_i0: None,
            seed: 0,
            denoiser: DenoiserMode::Identity,
            denoiser_endpoint: None,
            denoiser_timeout: Duration::from_secs(5),
            input_scale: InputScale::UnitRange,
            enhancer_threads: 1,
            rate: None,
            listen: None,
            connect: None,
            out: PathBuf::from("out"),
            snapshot_every: None,
            flush: true,
            ground_truth: true,
            queue_depth: crate::distributor::DEFAULT_QUEUE_DEPTH,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

fn optional(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then(|| v.to_string())
}

impl RunConfig {
    /// Sets one option by its flag name (without the leading dashes).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let v = value.trim();
        match key.as_str() {
            "phantom" => self.phantom = v.parse()?,
            "size" => self.size = parse(&key, v)?,
            "features" => self.features = optional(v).map(|f| parse(&key, &f)).transpose()?,
            "stacked" => self.stacked = parse_bool(&key, v)?,
            "rows" => self.rows = parse(&key, v)?,
            "columns" => self.columns = optional(v).map(|c| parse(&key, &c)).transpose()?,
            "rotations" => self.rotations = parse(&key, v)?,
            "per-rotation" => self.per_rotation = parse(&key, v)?,
            "schedule" => self.schedule = v.parse()?,
            "window" => self.window = parse(&key, v)?,
            "iterations" => self.iterations = parse(&key, v)?,
            "relax" => self.relax = parse(&key, v)?,
            "workers" => self.workers = parse(&key, v)?,
            "lanes" => self.lanes = parse(&key, v)?,
            "warm-start" => self.warm_start = parse_bool(&key, v)?,
            "noise-i0" => {
                let i0: f64 = if optional(v).is_none() { 0.0 } else { parse(&key, v)? };
                self.noise_i0 = (i0 > 0.0).then_some(i0);
            }
            "seed" => self.seed = parse(&key, v)?,
            "denoiser" => self.denoiser = v.parse()?,
            "denoiser-endpoint" => self.denoiser_endpoint = optional(v),
            "denoiser-timeout" => self.denoiser_timeout = Duration::from_secs_f64(parse(&key, v)?),
            "input-scale" => {
                self.input_scale = match v {
                    "unit_range" | "unit-range" => InputScale::UnitRange,
                    "raw" => InputScale::Raw,
                    _ => return Err(Error::invalid(format!("bad input-scale {v:?}"))),
                }
            }
            "enhancer-threads" => self.enhancer_threads = parse(&key, v)?,
            "rate" => {
                let rate: f64 = if optional(v).is_none() { 0.0 } else { parse(&key, v)? };
                self.rate = (rate > 0.0).then_some(rate);
            }
            "listen" => self.listen = optional(v),
            "connect" => self.connect = optional(v),
            "out" => self.out = PathBuf::from(v),
            "snapshot-every" => self.snapshot_every = optional(v).map(|s| parse(&key, &s)).transpose()?,
            "flush" => self.flush = parse_bool(&key, v)?,
            "ground-truth" => self.ground_truth = parse_bool(&key, v)?,
            "queue-depth" => self.queue_depth = parse(&key, v)?,
            _ => return Err(Error::invalid(format!("unknown option {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Every option as `(key, value)`; feeding these back through
    /// [`RunConfig::set`] reproduces this configuration.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        vec![
            ("phantom", self.phantom.to_string()),
            ("size", self.size.to_string()),
            ("features", opt(self.features.map(|f| f.to_string()))),
            ("stacked", self.stacked.to_string()),
            ("rows", self.rows.to_string()),
            ("columns", opt(self.columns.map(|c| c.to_string()))),
            ("rotations", self.rotations.to_string()),
            ("per-rotation", self.per_rotation.to_string()),
            ("schedule", self.schedule.to_string()),
            ("window", self.window.to_string()),
            ("iterations", self.iterations.to_string()),
            ("relax", self.relax.to_string()),
            ("workers", self.workers.to_string()),
            ("lanes", self.lanes.to_string()),
            ("warm-start", self.warm_start.to_string()),
            ("noise-i0", opt(self.noise_i0.map(|v| v.to_string()))),
            ("seed", self.seed.to_string()),
            ("denoiser", self.denoiser.to_string()),
            ("denoiser-endpoint", opt(self.denoiser_endpoint.clone())),
            ("denoiser-timeout", self.denoiser_timeout.as_secs_f64().to_string()),
            (
                "input-scale",
                match self.input_scale {
                    InputScale::UnitRange => "unit_range".into(),
                    InputScale::Raw => "raw".into(),
                },
            ),
            ("enhancer-threads", self.enhancer_threads.to_string()),
            ("rate", opt(self.rate.map(|r| r.to_string()))),
            ("listen", opt(self.listen.clone())),
            ("connect", opt(self.connect.clone())),
            ("out", self.out.display().to_string()),
            ("snapshot-every", self.snapshot_every().to_string()),
            ("flush", self.flush.to_string()),
            ("ground-truth", self.ground_truth.to_string()),
            ("queue-depth", self.queue_depth.to_string()),
        ]
    }

    pub fn manifest(&self) -> String {
        let mut s = String::from("# streamtomo run manifest\n");
        for (k, v) in self.to_pairs() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn snapshot_every(&self) -> usize {
        self.snapshot_every
            .unwrap_or(if self.size <= 256 { 1 } else { 5 })
    }

    pub fn geometry(&self) -> Result<AcquisitionGeometry> {
        let mut g = AcquisitionGeometry::new(self.size, self.rows, self.rotations, self.per_rotation)?;
        g.detector_columns = self.columns.unwrap_or(self.size);
        g.validate()?;
        Ok(g)
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            sirt: SirtConfig {
                iterations: self.iterations,
                relaxation: self.relax,
                ..SirtConfig::default()
            },
            window: self.window,
            lanes: self.lanes,
            warm_start: self.warm_start,
        }
    }

    pub fn noise(&self) -> NoiseModel {
        match self.noise_i0 {
            Some(i0) => NoiseModel::poisson(i0, self.seed),
            None => NoiseModel::disabled(),
        }
    }

    pub fn binding(&self) -> DenoiserBinding {
        let mode = match &self.denoiser {
            DenoiserMode::External { .. } => DenoiserMode::External {
                endpoint: self.denoiser_endpoint.clone().unwrap_or_default(),
            },
            other => other.clone(),
        };
        DenoiserBinding {
            mode,
            timeout: self.denoiser_timeout,
            input_scale: self.input_scale,
        }
    }

    pub fn emit_rate(&self) -> EmitRate {
        self.rate.map_or(EmitRate::Unthrottled, EmitRate::PerSecond)
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let mut spec = PhantomSpec::new(self.phantom, self.size, self.seed);
        if let Some(f) = self.features {
            spec.feature_count = f;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        self.engine().validate()?;
        self.noise().validate()?;
        self.binding().validate()?;
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if self.rows < self.workers {
            return Err(Error::invalid(format!("{} rows cannot feed {} workers", self.rows, self.workers)));
        }
        if self.ground_truth && self.size < crate::metrics::SsimParams::default().window {
            return Err(Error::invalid("image size must be at least 11 for ssim scoring"));
        }
        if self.queue_depth == 0 || self.enhancer_threads == 0 {
            return Err(Error::invalid("queue-depth and enhancer-threads must be positive"));
        }
        Ok(())
    }
}

type Scored = (QualityRecord, ThroughputRecord);

/// The scanned object and its acquisition schedule.
pub struct Scene {
    pub geometry: AcquisitionGeometry,
    pub schedule: Vec<ScheduledAngle>,
    pub volume: PhantomVolume,
}

impl Scene {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let geometry = cfg.geometry()?;
        let schedule = geometry.schedule(cfg.schedule)?;
        let spec = cfg.phantom_spec();
        let volume = if cfg.stacked {
            PhantomVolume::Stacked(make_phantom_stack(&spec, cfg.rows)?)
        } else {
            PhantomVolume::Replicated(make_phantom(&spec)?)
        };
        Ok(Scene {
            geometry,
            schedule,
            volume,
        })
    }

    pub fn projector(&self) -> Result<Projector> {
        Projector::new(self.geometry.image_size, self.geometry.detector_columns, self.geometry.pixel_size)
    }

    pub fn angles(&self) -> Vec<f64> {
        self.schedule.iter().map(|s| s.angle).collect()
    }

    pub fn frames(&self, noise: &NoiseModel) -> Result<Vec<ProjectionFrame>> {
        simulate_scan(&self.volume, &self.geometry, noise, &self.schedule)
    }

    /// Offline 100-iteration SIRT over the complete clean sinogram, per row.
    pub fn ground_truth(&self, lanes: usize) -> Result<BTreeMap<usize, Tomogram>> {
        let projector = self.projector()?;
        let angles = self.angles();
        let sinos = clean_sinograms(&self.volume, &projector, &angles)?;
        let cfg = ground_truth_config();
        let distinct: Vec<Tomogram> = sinos
            .iter()
            .enumerate()
            .map(|(i, s)| make_ground_truth(&projector, i, s, &angles, &cfg, lanes))
            .collect::<Result<_>>()?;
        Ok((0..self.geometry.detector_rows)
            .map(|row| {
                let src = match self.volume {
                    PhantomVolume::Replicated(_) => &distinct[0],
                    PhantomVolume::Stacked(_) => &distinct[row],
                };
                let mut t = src.clone();
                t.slice_id = row;
                (row, t)
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config: RunConfig,
    pub events: Vec<UpdateEvent>,
    pub records: Vec<(QualityRecord, ThroughputRecord)>,
    pub final_tomograms: BTreeMap<usize, Tomogram>,
    pub ingest: IngestReport,
    /// Set when the stream ended abnormally; results cover what arrived.
    pub stream_error: Option<String>,
    pub wall: Duration,
}

impl RunSummary {
    /// SSIM of the last update of every slice.
    pub fn final_ssim(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for (q, _) in &self.records {
            out.insert(q.slice_id, q.ssim_conventional);
        }
        out
    }

    pub fn quality(&self) -> Vec<QualityRecord> {
        self.records.iter().map(|(q, _)| q.clone()).collect()
    }

    pub fn events_for(&self, slice_id: usize) -> Vec<&UpdateEvent> {
        self.events.iter().filter(|e| e.slice_id == slice_id).collect()
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(cfg.out.join("snapshots"))?;
    fs::create_dir_all(cfg.out.join("ground_truth"))?;
    fs::write(cfg.out.join("manifest.txt"), cfg.manifest())?;
    Ok(())
}

fn references(cfg: &RunConfig, scene: &Scene) -> Result<HashMap<usize, Array2<f64>>> {
    if !cfg.ground_truth {
        return Ok(HashMap::new());
    }
    let lanes = thread::available_parallelism().map_or(1, |n| n.get());
    let truth = scene.ground_truth(lanes)?;
    for (slice, t) in &truth {
        export_image(&cfg.out.join("ground_truth"), &format!("slice_{slice:04}"), &t.values, *slice, 0)?;
    }
    Ok(truth.into_iter().map(|(k, t)| (k, t.values)).collect())
}

/// Runs distributor, workers, enhancer and collector over `source`.
///
/// A source error (for example a truncated stream) stops ingestion; windows
/// still buffered are flushed and the summary records the error.
pub fn process_stream<I>(cfg: &RunConfig, scene: &Scene, references: HashMap<usize, Array2<f64>>, source: I) -> Result<RunSummary>
where
    I: IntoIterator<Item = Result<ProjectionFrame>>,
{
    let projector = scene.projector()?;
    let (mut distributor, queues) = Distributor::new(cfg.rows, cfg.workers, cfg.queue_depth)?;
    let cache = Arc::new(ScaleCache::new(64));
    let clock = Instant::now();

    let (update_tx, update_rx) = channel();
    let mut workers = Vec::with_capacity(cfg.workers);
    for (partition, rx) in distributor.partitions().to_vec().into_iter().zip(queues) {
        let state = WorkerState::new(partition, projector, cfg.engine(), Arc::clone(&cache), clock)?;
        let tx = update_tx.clone();
        let flush = cfg.flush;
        workers.push(thread::spawn(move || run_worker(state, rx, tx, flush)));
    }
    drop(update_tx);

    let (enhanced_rx, enhancer) = pipeline_stage(update_rx, cfg.binding(), cfg.enhancer_threads, clock)?;

    let scored = cfg.ground_truth;
    let mut collector = QualityCollector::new(references);
    if scored {
        collector = collector.with_csv(&cfg.out.join("quality.csv"))?;
    }
    let snapshot_every = cfg.snapshot_every();
    let snapshot_dir = cfg.out.join("snapshots");
    let export_enhanced = !matches!(cfg.denoiser, DenoiserMode::Identity);
    let collect = thread::spawn(move || -> Result<(Vec<UpdateEvent>, Vec<Scored>)> {
        let mut events = Vec::new();
        for item in enhanced_rx {
            if scored {
                collector.record_update(&item.event, &item.conventional, Some(&item.enhanced))?;
            }
            let e = &item.event;
            if snapshot_every > 0 && e.update_index % snapshot_every as u64 == 0 {
                let stem = format!("slice_{:04}_u{:04}", e.slice_id, e.update_index);
                export_image(&snapshot_dir, &stem, &item.conventional.values, e.slice_id, e.update_index)?;
                if export_enhanced {
                    export_image(&snapshot_dir, &format!("{stem}_enh"), &item.enhanced, e.slice_id, e.update_index)?;
                }
            }
            events.push(item.event);
        }
        Ok((events, collector.into_records()))
    });

    let stream_error = match distributor.ingest(source) {
        Ok(_) => None,
        Err(e) => {
            log::warn!("stream ended abnormally after {} frames: {e}", distributor.report().frames);
            Some(e.to_string())
        }
    };
    let ingest = distributor.report();
    drop(distributor);

    let mut final_tomograms = BTreeMap::new();
    let mut worker_error = None;
    for w in workers {
        match w.join().map_err(|_| Error::Pipeline("worker panicked".into()))? {
            Ok(state) => {
                let p = state.partition();
                for slice in p.row_start..p.row_end() {
                    final_tomograms.insert(slice, state.tomogram(slice)?.clone());
                }
            }
            Err(e) => worker_error = Some(e),
        }
    }
    enhancer
        .join()
        .map_err(|_| Error::Pipeline("enhancer panicked".into()))?;
    let (events, records) = collect
        .join()
        .map_err(|_| Error::Pipeline("collector panicked".into()))??;
    if let Some(e) = worker_error {
        return Err(e);
    }
    if scored {
        let curve = mean_curve(&records.iter().map(|(q, _)| q.clone()).collect::<Vec<_>>());
        write_mean_curve(&cfg.out.join("quality_mean.csv"), &curve)?;
    }
    Ok(RunSummary {
        config: cfg.clone(),
        events,
        records,
        final_tomograms,
        ingest,
        stream_error,
        wall: clock.elapsed(),
    })
}

/// Single-process run: simulate, emit through an in-process queue, reconstruct.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    prepare_out(cfg)?;
    let scene = Scene::from_config(cfg)?;
    let refs = references(cfg, &scene)?;
    let frames = scene.frames(&cfg.noise())?;
    let (tx, rx) = sync_channel(cfg.queue_depth);
    let rate = cfg.emit_rate();
    let emitter = thread::spawn(move || {
        let mut sink = ChannelSink::new(tx);
        stream_emit(&frames, rate, &mut sink)
    });
    let summary = process_stream(cfg, &scene, refs, rx.into_iter().map(Ok))?;
    emitter
        .join()
        .map_err(|_| Error::Pipeline("emitter panicked".into()))??;
    Ok(summary)
}

/// Detector half of a two-process run: simulate and send frames to
/// `cfg.connect`.
pub fn run_detector(cfg: &RunConfig) -> Result<EmissionReport> {
    cfg.validate()?;
    let endpoint = cfg
        .connect
        .as_deref()
        .ok_or_else(|| Error::invalid("detector mode needs --connect"))?;
    let scene = Scene::from_config(cfg)?;
    let frames = scene.frames(&cfg.noise())?;
    let mut sink = connect_tcp(endpoint)?;
    stream_emit(&frames, cfg.emit_rate(), &mut sink)
}

/// Processor half of a two-process run.
pub struct Processor {
    cfg: RunConfig,
    listener: TcpListener,
}

impl Processor {
    pub fn bind(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let endpoint = cfg
            .listen
            .as_deref()
            .ok_or_else(|| Error::invalid("processor mode needs --listen"))?;
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|source| Error::Connection {
                endpoint: endpoint.to_string(),
                last_seq: None,
                source,
            })?
            .next()
            .ok_or_else(|| Error::invalid(format!("{endpoint} resolves to nothing")))?;
        let listener = TcpListener::bind(addr).map_err(|source| Error::Connection {
            endpoint: endpoint.to_string(),
            last_seq: None,
            source,
        })?;
        Ok(Processor {
            cfg: cfg.clone(),
            listener,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts one detector connection and processes its stream to the end.
    pub fn run(self) -> Result<RunSummary> {
        prepare_out(&self.cfg)?;
        let scene = Scene::from_config(&self.cfg)?;
        let refs = references(&self.cfg, &scene)?;
        let (stream, peer) = self.listener.accept()?;
        log::info!("detector connected from {peer}");
        let reader = FrameReader::new(BufReader::new(stream));
        process_stream(&self.cfg, &scene, refs, reader)
    }
}

/// Runs one configuration per `(window, iterations)` pair, each in its own
/// output subdirectory. Projections per rotation follow the window size.
pub fn run_grid(base: &RunConfig, windows: &[usize], iterations: &[usize]) -> Result<Vec<RunSummary>> {
    let mut out = Vec::with_capacity(windows.len() * iterations.len());
    for &w in windows {
        for &i in iterations {
            let mut cfg = base.clone();
            cfg.window = w;
            cfg.per_rotation = w;
            cfg.iterations = i;
            cfg.out = base.out.join(format!("w{w:03}_i{i:02}"));
            out.push(run_pipeline(&cfg)?);
        }
    }
    Ok(out)
}
