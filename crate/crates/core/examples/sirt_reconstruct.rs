//! Offline SIRT on a full sinogram, showing quality against the phantom as
//! iterations accumulate.
//!
//! ```bash
//! cargo run --release --example sirt_reconstruct
//! ```

use streamtomo::geometry::{SinogramWindow, Tomogram};
use streamtomo::metrics::ssim;
use streamtomo::phantom::{make_phantom, PhantomKind, PhantomSpec};
use streamtomo::projector::{sirt_update, Projector, SirtConfig};

fn main() -> streamtomo::Result<()> {
    let n = 128;
    let angles: Vec<f64> = (0..180).map(|k| (k as f64).to_radians()).collect();
    let phantom = make_phantom(&PhantomSpec::new(PhantomKind::SheppLogan, n, 0))?;
    let projector = Projector::new(n, n, 1.0)?;
    let sinogram = projector.forward_project(&phantom, &angles)?;
    let window = SinogramWindow::from_rows(0, &angles, &sinogram)?;
    let scales = projector.compute_scales(&angles)?;

    let step = SirtConfig::with_iterations(10);
    let mut x = Tomogram::zeros(0, n);
    for round in 1..=10 {
        x = sirt_update(&projector, &x, &window, &step, &scales)?;
        println!(
            "{:>3} iterations  residual {:>9.3}  ssim {:.4}",
            round * 10,
            projector.residual_norm(&x.values, &window)?,
            ssim(&x.values, &phantom, None)?
        );
    }
    Ok(())
}
