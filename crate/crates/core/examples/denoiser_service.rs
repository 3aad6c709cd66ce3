//! Serves the denoiser wire protocol in-process and enhances reconstructions
//! through it. An external service only has to speak the same protocol.
//!
//! ```bash
//! cargo run --release --example denoiser_service
//! ```

use std::net::TcpListener;

use ndarray::Array2;
use streamtomo::enhancer::{enhance, gaussian_blur, DenoiserBinding, DenoiserService};
use streamtomo::metrics::ssim;
use streamtomo::phantom::{make_phantom, PhantomKind, PhantomSpec};

fn main() -> streamtomo::Result<()> {
    // A stand-in model: a small blur applied to the unit-range image.
    let service = DenoiserService::spawn(TcpListener::bind("127.0.0.1:0")?, |req| {
        gaussian_blur(&req.image.mapv(f64::from), 1.0).mapv(|v| v as f32)
    })?;
    println!("denoiser listening on {}", service.endpoint());

    let clean = make_phantom(&PhantomSpec::new(PhantomKind::Spheres, 96, 5))?;
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let noisy: Array2<f64> = clean.mapv(|v| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        v + ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.3
    });
    let enhanced = enhance(&noisy, &DenoiserBinding::external(service.endpoint()))?;
    println!("ssim noisy    {:.4}", ssim(&noisy, &clean, None)?);
    println!("ssim enhanced {:.4}", ssim(&enhanced, &clean, None)?);
    Ok(())
}
