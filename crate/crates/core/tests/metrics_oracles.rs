mod common;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamtomo::metrics::{export_image, ground_truth_config, make_ground_truth, read_raw_image, ssim};
use streamtomo::phantom::{make_phantom, PhantomKind, PhantomSpec};
use streamtomo::projector::{Projector, SirtConfig};

#[test]
fn ssim_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..3 {
        let a = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((32, 32), |(i, j)| a[[i, j]] * 0.7 + 0.3 * rng.random::<f64>());
        let span = b.iter().cloned().fold(f64::MIN, f64::max) - b.iter().cloned().fold(f64::MAX, f64::min);
        let got = ssim(&a, &b, None).unwrap();
        let want = common::ssim_direct(&a, &b, span);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        let got = ssim(&a, &b, Some(2.0)).unwrap();
        let want = common::ssim_direct(&a, &b, 2.0);
        assert!((got - want).abs() < 1e-6);
    }
}

fn ground_truth_at(iterations: usize) -> (Array2<f64>, Array2<f64>) {
    let n = 128;
    let angles: Vec<f64> = (0..180).map(|k| k as f64 * std::f64::consts::PI / 180.0).collect();
    let phantom = make_phantom(&PhantomSpec::new(PhantomKind::SheppLogan, n, 0)).unwrap();
    let p = Projector::new(n, n, 1.0).unwrap();
    let sino = p.forward_project(&phantom, &angles).unwrap();
    let gt = make_ground_truth(&p, 0, &sino, &angles, &SirtConfig::with_iterations(iterations), 2).unwrap();
    (gt.values, phantom)
}

#[test]
fn ground_truth_quality_and_determinism() {
    assert_eq!(ground_truth_config().iterations, 100);
    let (gt, phantom) = ground_truth_at(100);
    let score = ssim(&gt, &phantom, None).unwrap();
    assert!(score >= 0.85, "ground truth ssim {score}");
    let (again, _) = ground_truth_at(100);
    assert_eq!(gt, again);
    let (early, _) = ground_truth_at(10);
    assert!(ssim(&early, &phantom, None).unwrap() < score);
}

#[test]
fn exported_raw_images_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let image = Array2::from_shape_fn((12, 9), |(i, j)| i as f64 * 0.25 - j as f64);
    export_image(dir.path(), "img", &image, 3, 7).unwrap();
    let back = read_raw_image(&dir.path().join("img.raw"), 12, 9).unwrap();
    assert_eq!(back, image.mapv(|v| v as f32));
    let header = std::fs::read_to_string(dir.path().join("img.hdr")).unwrap();
    assert!(header.contains("slice_id=3") && header.contains("update_index=7"), "{header}");
    let pgm = std::fs::read(dir.path().join("img.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n9 12\n255\n"));
    assert_eq!(pgm.len(), b"P5\n9 12\n255\n".len() + 12 * 9);
}
