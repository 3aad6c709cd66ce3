//! Command-line entry point.
//!
//! `--connect` runs the detector, `--listen` runs the processor, neither runs
//! both in one process. Exit status: 0 success, 2 bad arguments, 3 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use streamtomo::{run_detector, run_pipeline, Error, Processor, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "streamtomo", version, about = "Streaming sliding-window SIRT reconstruction")]
struct Cli {
    /// key=value file applied before any other flag
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    phantom: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    rows: Option<String>,
    #[arg(long)]
    rotations: Option<String>,
    #[arg(long = "per-rotation")]
    per_rotation: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    relax: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    lanes: Option<String>,
    #[arg(long = "noise-i0")]
    noise_i0: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    denoiser: Option<String>,
    #[arg(long = "denoiser-endpoint")]
    denoiser_endpoint: Option<String>,
    #[arg(long)]
    rate: Option<String>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    connect: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Any other option as key=value; may be repeated
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let flags = [
        ("phantom", &cli.phantom),
        ("size", &cli.size),
        ("rows", &cli.rows),
        ("rotations", &cli.rotations),
        ("per-rotation", &cli.per_rotation),
        ("window", &cli.window),
        ("iterations", &cli.iterations),
        ("relax", &cli.relax),
        ("workers", &cli.workers),
        ("lanes", &cli.lanes),
        ("noise-i0", &cli.noise_i0),
        ("seed", &cli.seed),
        ("denoiser", &cli.denoiser),
        ("denoiser-endpoint", &cli.denoiser_endpoint),
        ("rate", &cli.rate),
        ("listen", &cli.listen),
        ("connect", &cli.connect),
        ("out", &cli.out),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if cfg.listen.is_some() && cfg.connect.is_some() {
        return Err(Error::InvalidArgument("--listen and --connect are exclusive".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cfg: &RunConfig) -> Result<(), Error> {
    if cfg.connect.is_some() {
        let report = run_detector(cfg)?;
        log::info!("sent {} frames in {:.2?}", report.count, report.elapsed);
        return Ok(());
    }
    let summary = if cfg.listen.is_some() {
        let processor = Processor::bind(cfg)?;
        log::info!("listening on {}", processor.local_addr()?);
        processor.run()?
    } else {
        run_pipeline(cfg)?
    };
    if let Some(e) = &summary.stream_error {
        log::warn!("stream ended early: {e}");
    }
    for (slice, s) in summary.final_ssim() {
        println!("slice {slice}: final ssim {s:.4}");
    }
    println!(
        "{} frames, {} updates in {:.2?}; artifacts in {}",
        summary.ingest.frames,
        summary.events.len(),
        summary.wall,
        cfg.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
