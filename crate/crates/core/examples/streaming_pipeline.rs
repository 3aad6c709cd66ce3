//! A complete single-process streaming run: noisy interleaved scan, two
//! workers, Gaussian enhancement, quality curve and artifacts on disk.
//!
//! ```bash
//! cargo run --release --example streaming_pipeline
//! ```

use streamtomo::metrics::mean_curve;
use streamtomo::pipeline::{run_pipeline, RunConfig};

fn main() -> streamtomo::Result<()> {
    let mut cfg = RunConfig {
        out: std::env::temp_dir().join("streamtomo_streaming"),
        ..RunConfig::default()
    };
    cfg.apply_str(
        "size=96\nrows=4\nrotations=12\nper-rotation=16\nwindow=16\niterations=8\n\
         workers=2\nnoise-i0=1e5\ndenoiser=gaussian:0.8\nseed=3\n",
    )?;
    let summary = run_pipeline(&cfg)?;
    println!("update  slices  ssim(conv)  ssim(enh)");
    for p in mean_curve(&summary.quality()) {
        println!(
            "{:>6}  {:>6}  {:>10.4}  {:>9.4}",
            p.update_index,
            p.slices,
            p.ssim_conventional,
            p.ssim_enhanced.unwrap_or(f64::NAN)
        );
    }
    println!("{} updates in {:.2?}; artifacts in {}", summary.events.len(), summary.wall, cfg.out.display());
    Ok(())
}
