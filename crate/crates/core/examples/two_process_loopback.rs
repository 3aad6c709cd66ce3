//! Detector and processor connected over loopback TCP, checked against the
//! same configuration run in one process.
//!
//! ```bash
//! cargo run --release --example two_process_loopback
//! ```

use std::thread;

use streamtomo::pipeline::{run_detector, run_pipeline, Processor, RunConfig};

fn main() -> streamtomo::Result<()> {
    let root = std::env::temp_dir().join("streamtomo_loopback");
    let base = RunConfig {
        size: 64,
        rows: 2,
        rotations: 8,
        iterations: 5,
        noise_i0: Some(1e5),
        seed: 11,
        ..RunConfig::default()
    };

    let processor = Processor::bind(&RunConfig {
        listen: Some("127.0.0.1:0".into()),
        out: root.join("processor"),
        ..base.clone()
    })?;
    let endpoint = processor.local_addr()?.to_string();
    println!("processor listening on {endpoint}");
    let handle = thread::spawn(move || processor.run());
    let sent = run_detector(&RunConfig {
        connect: Some(endpoint),
        rate: Some(200.0),
        ..base.clone()
    })?;
    println!("detector sent {} frames in {:.2?}", sent.count, sent.elapsed);
    let remote = handle.join().expect("processor thread")?;

    let local = run_pipeline(&RunConfig {
        out: root.join("single"),
        ..base
    })?;
    for (slice, s) in remote.final_ssim() {
        println!("slice {slice}: two-process {s:.6}, single-process {:.6}", local.final_ssim()[&slice]);
    }
    Ok(())
}
