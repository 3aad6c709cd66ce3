//! Builds a phantom, schedules an interleaved scan, simulates noisy frames,
//! and round-trips one through the wire format.
//!
//! ```bash
//! cargo run --release --example phantom_scan
//! ```

use streamtomo::acquisition::{simulate_scan, NoiseModel, PhantomVolume};
use streamtomo::distributor::{decode_frame, encode_frame};
use streamtomo::geometry::{AcquisitionGeometry, ScheduleKind};
use streamtomo::metrics::export_image;
use streamtomo::phantom::{make_phantom, PhantomKind, PhantomSpec};

fn main() -> streamtomo::Result<()> {
    let out = std::env::temp_dir().join("streamtomo_phantom_scan");
    std::fs::create_dir_all(&out)?;
    for kind in [PhantomKind::SheppLogan, PhantomKind::Spheres, PhantomKind::Porous] {
        let image = make_phantom(&PhantomSpec::new(kind, 128, 7))?;
        export_image(&out, &kind.to_string(), &image, 0, 0)?;
        println!("{kind:<12} mean {:.3}", image.mean().unwrap_or(0.0));
    }

    let geometry = AcquisitionGeometry::new(128, 1, 4, 8)?;
    let schedule = geometry.schedule(ScheduleKind::Interleaved)?;
    for rotation in 0..geometry.rotations {
        let degrees: Vec<String> = schedule
            .iter()
            .filter(|s| s.rotation_index == rotation)
            .map(|s| format!("{:.1}", s.angle.to_degrees()))
            .collect();
        println!("rotation {rotation}: {}", degrees.join(" "));
    }

    let volume = PhantomVolume::Replicated(make_phantom(&PhantomSpec::new(PhantomKind::SheppLogan, 128, 0))?);
    let frames = simulate_scan(&volume, &geometry, &NoiseModel::poisson(1e4, 1), &schedule)?;
    let bytes = encode_frame(&frames[3]);
    assert_eq!(decode_frame(&bytes)?, frames[3]);
    println!("{} frames simulated, {} bytes per record; images in {}", frames.len(), bytes.len(), out.display());
    Ok(())
}
