//! Sweeps window size and iteration count, reporting final quality and
//! sustained rate for each cell.
//!
//! ```bash
//! cargo run --release --example parameter_grid
//! ```

use streamtomo::pipeline::{run_grid, RunConfig};

fn main() -> streamtomo::Result<()> {
    let base = RunConfig {
        size: 64,
        rows: 1,
        rotations: 4,
        noise_i0: Some(1e5),
        snapshot_every: Some(0),
        out: std::env::temp_dir().join("streamtomo_grid"),
        ..RunConfig::default()
    };
    println!("   W   I  updates  final ssim  sustained p/s");
    for run in run_grid(&base, &[16, 32, 64], &[1, 5, 10])? {
        let (q, t) = run.records.last().expect("at least one update");
        println!(
            "{:>4} {:>3} {:>8} {:>11.4} {:>14.1}",
            run.config.window,
            run.config.iterations,
            run.events.len(),
            q.ssim_conventional,
            t.sustained_rate
        );
    }
    println!("results under {}", base.out.display());
    Ok(())
}
