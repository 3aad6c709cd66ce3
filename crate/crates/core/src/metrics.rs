//! Image quality and throughput accounting.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use ndarray::{Array2, ArrayView2};

use crate::engine::{lane_parallel_sirt, UpdateEvent};
use crate::error::{Error, Result};
use crate::geometry::{SinogramWindow, Tomogram};
use crate::projector::{Projector, SirtConfig};

/// Iterations used for the offline reference reconstruction.
pub const GROUND_TRUTH_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let mut k: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        k
    }
}

/// Separable valid-mode filtering with a 1-D kernel along both axes.
fn filter_valid(image: &ArrayView2<'_, f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = image.dim();
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(i, j)| {
        kernel.iter().enumerate().map(|(d, kv)| kv * image[[i, j + d]]).sum()
    });
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        kernel.iter().enumerate().map(|(d, kv)| kv * rows[[i + d, j]]).sum()
    })
}

/// Mean SSIM over all valid window positions.
///
/// `b` is the reference. Without an explicit `dynamic_range`, `L` is the
/// reference's value span, or 1 when the reference is constant.
pub fn ssim_with(a: &Array2<f64>, b: &Array2<f64>, dynamic_range: Option<f64>, params: &SsimParams) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("ssim shape mismatch {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < params.window || w < params.window {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {} pixel ssim window",
            params.window
        )));
    }
    let range = match dynamic_range {
        Some(l) if !(l > 0.0 && l.is_finite()) => {
            return Err(Error::invalid(format!("dynamic range {l} must be positive")))
        }
        Some(l) => l,
        None => {
            let hi = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        }
    };
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    let kernel = params.kernel();
    let mu_a = filter_valid(&a.view(), &kernel);
    let mu_b = filter_valid(&b.view(), &kernel);
    let aa = filter_valid(&(a * a).view(), &kernel);
    let bb = filter_valid(&(b * b).view(), &kernel);
    let ab = filter_valid(&(a * b).view(), &kernel);
    let mut sum = 0.0;
    for ((((&ma, &mb), &saa), &sbb), &sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let var_a = saa - ma * ma;
        let var_b = sbb - mb * mb;
        let cov = sab - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(sum / mu_a.len() as f64)
}

/// [`ssim_with`] using the standard 11×11, σ = 1.5, k1 = 0.01, k2 = 0.03 setup.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, dynamic_range: Option<f64>) -> Result<f64> {
    ssim_with(a, b, dynamic_range, &SsimParams::default())
}

/// Offline SIRT over a complete sinogram, from a zero start.
pub fn make_ground_truth(
    projector: &Projector,
    slice_id: usize,
    sinogram: &Array2<f64>,
    angles: &[f64],
    cfg: &SirtConfig,
    lanes: usize,
) -> Result<Tomogram> {
    cfg.validate()?;
    let window = SinogramWindow::from_rows(slice_id, angles, sinogram)?;
    let scales = projector.compute_scales(angles)?;
    let start = Tomogram::zeros(slice_id, projector.image_size());
    let mut out = lane_parallel_sirt(projector, &start, &window, &scales, cfg, lanes.max(1));
    out.update_count = 1;
    Ok(out)
}

/// Ground-truth SIRT settings: 100 iterations, otherwise defaults.
pub fn ground_truth_config() -> SirtConfig {
    SirtConfig::with_iterations(GROUND_TRUTH_ITERATIONS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityRecord {
    pub slice_id: usize,
    pub update_index: u64,
    pub seconds_since_start: f64,
    pub projections_consumed: u64,
    pub ssim_conventional: f64,
    pub ssim_enhanced: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRecord {
    pub update_index: u64,
    pub refresh_seconds: f64,
    /// Cumulative projections divided by elapsed time.
    pub sustained_rate: f64,
}

pub const CSV_HEADER: &str = "slice_id,update_index,t_seconds,projections,ssim_conv,ssim_enh,refresh_s,sustained_pps";

#[derive(Default)]
struct SliceClock {
    last: Duration,
    projections: u64,
}

/// Turns update events into quality and throughput rows.
pub struct QualityCollector {
    references: HashMap<usize, Array2<f64>>,
    clocks: HashMap<usize, SliceClock>,
    records: Vec<(QualityRecord, ThroughputRecord)>,
    csv: Option<BufWriter<File>>,
}

impl QualityCollector {
    pub fn new(references: HashMap<usize, Array2<f64>>) -> Self {
        QualityCollector {
            references,
            clocks: HashMap::new(),
            records: Vec::new(),
            csv: None,
        }
    }

    /// Also stream rows to a CSV file at `path`.
    pub fn with_csv(mut self, path: &Path) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{CSV_HEADER}")?;
        w.flush()?;
        self.csv = Some(w);
        Ok(self)
    }

    pub fn reference(&self, slice_id: usize) -> Option<&Array2<f64>> {
        self.references.get(&slice_id)
    }

    pub fn record_update(
        &mut self,
        event: &UpdateEvent,
        conventional: &Tomogram,
        enhanced: Option<&Array2<f64>>,
    ) -> Result<(QualityRecord, ThroughputRecord)> {
        let reference = self
            .references
            .get(&event.slice_id)
            .ok_or_else(|| Error::invalid(format!("no ground truth for slice {}", event.slice_id)))?;
        let ssim_conventional = ssim(&conventional.values, reference, None)?;
        let ssim_enhanced = enhanced.map(|img| ssim(img, reference, None)).transpose()?;

        let clock = self.clocks.entry(event.slice_id).or_default();
        let refresh = event.completed_at.saturating_sub(clock.last);
        clock.last = event.completed_at;
        clock.projections += event.projections_consumed as u64;
        let elapsed = event.completed_at.as_secs_f64();
        let quality = QualityRecord {
            slice_id: event.slice_id,
            update_index: event.update_index,
            seconds_since_start: elapsed,
            projections_consumed: clock.projections,
            ssim_conventional,
            ssim_enhanced,
        };
        let throughput = ThroughputRecord {
            update_index: event.update_index,
            refresh_seconds: refresh.as_secs_f64(),
            sustained_rate: if elapsed > 0.0 {
                clock.projections as f64 / elapsed
            } else {
                f64::INFINITY
            },
        };
        if let Some(w) = self.csv.as_mut() {
            let enh = quality.ssim_enhanced.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                quality.slice_id,
                quality.update_index,
                quality.seconds_since_start,
                quality.projections_consumed,
                quality.ssim_conventional,
                enh,
                throughput.refresh_seconds,
                throughput.sustained_rate
            )?;
            w.flush()?;
        }
        self.records.push((quality.clone(), throughput.clone()));
        Ok((quality, throughput))
    }

    pub fn records(&self) -> &[(QualityRecord, ThroughputRecord)] {
        &self.records
    }

    pub fn into_records(self) -> Vec<(QualityRecord, ThroughputRecord)> {
        self.records
    }
}

/// One point of the slice-averaged quality curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub update_index: u64,
    pub slices: usize,
    pub ssim_conventional: f64,
    pub ssim_enhanced: Option<f64>,
}

/// Arithmetic mean over slices for every update index.
pub fn mean_curve(records: &[QualityRecord]) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<u64, Vec<&QualityRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.update_index).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(update_index, rs)| {
            let n = rs.len() as f64;
            let enhanced: Option<Vec<f64>> = rs.iter().map(|r| r.ssim_enhanced).collect();
            CurvePoint {
                update_index,
                slices: rs.len(),
                ssim_conventional: rs.iter().map(|r| r.ssim_conventional).sum::<f64>() / n,
                ssim_enhanced: enhanced.map(|v| v.iter().sum::<f64>() / n),
            }
        })
        .collect()
}

pub fn write_mean_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "update_index,slices,ssim_conv,ssim_enh")?;
    for p in curve {
        let enh = p.ssim_enhanced.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", p.update_index, p.slices, p.ssim_conventional, enh)?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of consecutive pairs that fall by more than `threshold`.
pub fn drop_fraction(curve: &[f64], threshold: f64) -> f64 {
    if curve.len() < 2 {
        return 0.0;
    }
    let drops = curve.windows(2).filter(|p| p[0] - p[1] > threshold).count();
    drops as f64 / (curve.len() - 1) as f64
}

/// Writes `<stem>.raw` (f32 LE, row-major), `<stem>.hdr` and an 8-bit
/// min-max scaled `<stem>.pgm` preview.
pub fn export_image(dir: &Path, stem: &str, image: &Array2<f64>, slice_id: usize, update_index: u64) -> Result<()> {
    let (h, w) = image.dim();
    let mut raw = BufWriter::new(File::create(dir.join(format!("{stem}.raw")))?);
    for v in image.iter() {
        raw.write_all(&(*v as f32).to_le_bytes())?;
    }
    raw.flush()?;

    std::fs::write(
        dir.join(format!("{stem}.hdr")),
        format!("N={h}\nwidth={w}\nslice_id={slice_id}\nupdate_index={update_index}\ndtype=f32le\n"),
    )?;

    let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pgm = BufWriter::new(File::create(dir.join(format!("{stem}.pgm")))?);
    write!(pgm, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image
        .iter()
        .map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    pgm.write_all(&bytes)?;
    pgm.flush()?;
    Ok(())
}

/// Reads back a `.raw` image written by [`export_image`].
pub fn read_raw_image(path: &Path, height: usize, width: usize) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != height * width * 4 {
        return Err(Error::invalid(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            height * width * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((height, width), values).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(n: usize, seed: u64) -> Array2<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Array2::from_shape_fn((n, n), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn identical_images_score_one() {
        let x = noise_image(24, 1);
        assert_eq!(ssim(&x, &x, None).unwrap(), 1.0);
        let c = Array2::from_elem((16, 16), 3.0);
        assert_eq!(ssim(&c, &c, None).unwrap(), 1.0);
    }

    #[test]
    fn constant_images_luminance_only() {
        let (c, l): (f64, f64) = (0.5, 1.0);
        let a = Array2::from_elem((16, 16), c);
        let b = Array2::from_elem((16, 16), c + l / 10.0);
        let c1 = (0.01 * l).powi(2);
        let expected = (2.0 * c * (c + 0.1) + c1) / (c * c + (c + 0.1) * (c + 0.1) + c1);
        let got = ssim(&a, &b, Some(l)).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn argument_errors() {
        let a = Array2::zeros((16, 16));
        assert!(ssim(&a, &Array2::zeros((16, 15)), None).is_err());
        assert!(ssim(&a, &a, Some(0.0)).is_err());
        assert!(ssim(&Array2::zeros((8, 8)), &Array2::zeros((8, 8)), None).is_err());
    }

    #[test]
    fn dissimilar_images_score_lower() {
        let a = noise_image(32, 1);
        let b = noise_image(32, 2);
        let s = ssim(&a, &b, None).unwrap();
        assert!(s < 0.2, "{s}");
    }

    #[test]
    fn drop_fraction_counts_large_falls() {
        assert_eq!(drop_fraction(&[0.1, 0.2, 0.15, 0.3], 0.01), 1.0 / 3.0);
        assert_eq!(drop_fraction(&[0.5], 0.01), 0.0);
        assert_eq!(drop_fraction(&[0.5, 0.495], 0.01), 0.0);
    }

    #[test]
    fn mean_curve_averages_slices() {
        let rec = |slice, idx, s| QualityRecord {
            slice_id: slice,
            update_index: idx,
            seconds_since_start: 0.0,
            projections_consumed: 0,
            ssim_conventional: s,
            ssim_enhanced: None,
        };
        let curve = mean_curve(&[rec(0, 1, 0.2), rec(1, 1, 0.4), rec(0, 2, 0.6)]);
        assert_eq!(curve.len(), 2);
        assert!((curve[0].ssim_conventional - 0.3).abs() < 1e-15);
        assert_eq!(curve[1].slices, 1);
    }

    #[test]
    fn export_writes_raw_header_and_preview() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64);
        export_image(dir.path(), "s0000_u0001", &img, 0, 1).unwrap();
        let back = read_raw_image(&dir.path().join("s0000_u0001.raw"), 4, 5).unwrap();
        assert_eq!(back, img.mapv(|v| v as f32));
        let hdr = std::fs::read_to_string(dir.path().join("s0000_u0001.hdr")).unwrap();
        assert!(hdr.contains("N=4") && hdr.contains("update_index=1"));
        let pgm = std::fs::read(dir.path().join("s0000_u0001.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n5 4\n255\n"));
        assert_eq!(pgm.len(), 11 + 20);
        assert_eq!(*pgm.last().unwrap(), 255);
    }

    #[test]
    fn collector_tracks_refresh_and_rate() {
        let n = 16;
        let reference = noise_image(n, 4);
        let mut col = QualityCollector::new(HashMap::from([(0, reference.clone())]));
        let mut t = Tomogram::zeros(0, n);
        t.values = reference.clone();
        let event = |idx: u64, secs: f64| UpdateEvent {
            slice_id: 0,
            update_index: idx,
            trigger_seq: idx * 16 - 1,
            recon_elapsed: Duration::ZERO,
            projections_consumed: 16,
            partial: false,
            completed_at: Duration::from_secs_f64(secs),
        };
        let (q1, t1) = col.record_update(&event(1, 1.5), &t, Some(&t.values)).unwrap();
        assert_eq!(q1.ssim_conventional, 1.0);
        assert_eq!(q1.ssim_enhanced, Some(q1.ssim_conventional));
        assert!((t1.sustained_rate - 16.0 / 1.5).abs() < 1e-9);
        assert!((t1.refresh_seconds - 1.5).abs() < 1e-9);
        let (q2, t2) = col.record_update(&event(2, 3.5), &t, None).unwrap();
        assert_eq!(q2.projections_consumed, 32);
        assert!((t2.refresh_seconds - 2.0).abs() < 1e-9);
        assert!(col.record_update(&UpdateEvent { slice_id: 9, ..event(1, 1.0) }, &t, None).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn ssim_symmetric_with_fixed_range(seed_a in any::<u64>(), seed_b in any::<u64>(), l in 0.1f64..10.0) {
                let a = noise_image(14, seed_a);
                let b = noise_image(14, seed_b);
                prop_assert_eq!(ssim(&a, &b, Some(l)).unwrap(), ssim(&b, &a, Some(l)).unwrap());
            }

            #[test]
            fn ssim_self_is_one(seed in any::<u64>(), scale in -100.0f64..100.0) {
                let x = noise_image(13, seed) * scale;
                prop_assert_eq!(ssim(&x, &x, None).unwrap(), 1.0);
            }
        }
    }
}
