//! Synthetic test objects: Shepp-Logan, packed spheres and a porous solid.

use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::make_support_mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhantomKind {
    SheppLogan,
    Spheres,
    Porous,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp_logan" | "shepp-logan" => Ok(PhantomKind::SheppLogan),
            "spheres" => Ok(PhantomKind::Spheres),
            "porous" => Ok(PhantomKind::Porous),
            other => Err(Error::invalid(format!("unknown phantom kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhantomKind::SheppLogan => "shepp_logan",
            PhantomKind::Spheres => "spheres",
            PhantomKind::Porous => "porous",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: usize,
    pub seed: u64,
    /// Discs for `Spheres`, pores for `Porous`; ignored by `SheppLogan`.
    pub feature_count: usize,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, size: usize, seed: u64) -> Self {
        let feature_count = match kind {
            PhantomKind::SheppLogan => 1,
            PhantomKind::Spheres => 12,
            PhantomKind::Porous => 40,
        };
        PhantomSpec {
            kind,
            size,
            seed,
            feature_count,
        }
    }
}

/// `(intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees)` in
/// normalised `[-1, 1]²` coordinates, y pointing up. This is the modified
/// (higher contrast) variant whose values already span `[0, 1]`.
pub const SHEPP_LOGAN_ELLIPSES: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

pub fn make_phantom(spec: &PhantomSpec) -> Result<Array2<f64>> {
    if spec.size == 0 {
        return Err(Error::invalid("phantom size must be positive"));
    }
    if spec.kind != PhantomKind::SheppLogan && spec.feature_count == 0 {
        return Err(Error::invalid("feature_count must be positive"));
    }
    let mut image = match spec.kind {
        PhantomKind::SheppLogan => shepp_logan(spec.size),
        PhantomKind::Spheres => spheres(spec.size, spec.seed, spec.feature_count),
        PhantomKind::Porous => porous(spec.size, spec.seed, spec.feature_count),
    };
    let mask = make_support_mask(spec.size);
    image.zip_mut_with(&mask, |v, &inside| {
        *v = if inside { v.clamp(0.0, 1.0) } else { 0.0 };
    });
    Ok(image)
}

/// One phantom per detector row. Shepp-Logan is replicated; seeded kinds get
/// a per-row perturbed seed.
pub fn make_phantom_stack(spec: &PhantomSpec, rows: usize) -> Result<Vec<Array2<f64>>> {
    (0..rows)
        .map(|r| {
            let mut s = *spec;
            s.seed = spec.seed.wrapping_add(r as u64);
            make_phantom(&s)
        })
        .collect()
}

fn shepp_logan(n: usize) -> Array2<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let half = n as f64 / 2.0;
    Array2::from_shape_fn((n, n), |(i, j)| {
        let x = (j as f64 - c) / half;
        let y = (c - i as f64) / half;
        SHEPP_LOGAN_ELLIPSES
            .iter()
            .filter(|e| {
                let (sin, cos) = e[5].to_radians().sin_cos();
                let dx = x - e[3];
                let dy = y - e[4];
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / e[1]).powi(2) + (v / e[2]).powi(2) <= 1.0
            })
            .map(|e| e[0])
            .sum()
    })
}

fn paint_disc(image: &mut Array2<f64>, cx: f64, cy: f64, r: f64, value: f64) {
    let n = image.nrows() as isize;
    let lo_i = ((cy - r).floor() as isize).max(0);
    let hi_i = ((cy + r).ceil() as isize).min(n - 1);
    let lo_j = ((cx - r).floor() as isize).max(0);
    let hi_j = ((cx + r).ceil() as isize).min(n - 1);
    for i in lo_i..=hi_i {
        for j in lo_j..=hi_j {
            if (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2) <= r * r {
                image[[i as usize, j as usize]] = value;
            }
        }
    }
}

/// Non-overlapping discs of random radius and density on a zero background.
fn spheres(n: usize, seed: u64, count: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Array2::zeros((n, n));
    let c = (n as f64 - 1.0) / 2.0;
    let field = 0.9 * n as f64 / 2.0;
    let r_min = (n as f64 / 32.0).max(1.0);
    let r_max = (n as f64 / 8.0).max(r_min + 0.5);
    let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..500 {
            let r = rng.random_range(r_min..r_max);
            if r >= field {
                continue;
            }
            let rho = (field - r) * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (cx, cy) = (c + rho * phi.cos(), c + rho * phi.sin());
            let clear = placed
                .iter()
                .all(|&(px, py, pr)| (px - cx).hypot(py - cy) >= pr + r + 1.0);
            if clear {
                let value = rng.random_range(0.4..=1.0);
                paint_disc(&mut image, cx, cy, r, value);
                placed.push((cx, cy, r));
                break;
            }
        }
    }
    image
}

/// A filled disc perforated by irregular pores (clusters of small circles).
fn porous(n: usize, seed: u64, count: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Array2::zeros((n, n));
    let c = (n as f64 - 1.0) / 2.0;
    let body = 0.85 * n as f64 / 2.0;
    paint_disc(&mut image, c, c, body, 0.7);
    let r_min = (n as f64 / 64.0).max(0.75);
    let r_max = (n as f64 / 24.0).max(r_min + 0.5);
    for _ in 0..count {
        let rho = 0.9 * body * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (mut px, mut py) = (c + rho * phi.cos(), c + rho * phi.sin());
        let lobes = rng.random_range(1..=3);
        for _ in 0..lobes {
            let r = rng.random_range(r_min..r_max);
            paint_disc(&mut image, px, py, r, 0.0);
            px += rng.random_range(-r..r);
            py += rng.random_range(-r..r);
        }
    }
    // A few dense grains give the solid a second phase.
    for _ in 0..(count / 8).max(1) {
        let rho = 0.8 * body * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let r = rng.random_range(r_min..r_max);
        paint_disc(&mut image, c + rho * phi.cos(), c + rho * phi.sin(), r, 1.0);
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shepp_logan_range_and_background() {
        let p = make_phantom(&PhantomSpec::new(PhantomKind::SheppLogan, 128, 0)).unwrap();
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[0, 127]], 0.0);
        assert_eq!(p[[127, 0]], 0.0);
        assert_eq!(p[[127, 127]], 0.0);
        assert!(p.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn seeded_kinds_are_deterministic() {
        for kind in [PhantomKind::Spheres, PhantomKind::Porous] {
            let spec = PhantomSpec::new(kind, 128, 7);
            assert_eq!(make_phantom(&spec).unwrap(), make_phantom(&spec).unwrap());
            let other = PhantomSpec { seed: 8, ..spec };
            assert_ne!(make_phantom(&spec).unwrap(), make_phantom(&other).unwrap());
        }
    }

    #[test]
    fn all_kinds_in_unit_range_with_empty_corners() {
        for kind in [PhantomKind::SheppLogan, PhantomKind::Spheres, PhantomKind::Porous] {
            let p = make_phantom(&PhantomSpec::new(kind, 96, 3)).unwrap();
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)), "{kind}");
            assert_eq!(p[[0, 0]], 0.0);
            assert!(p.iter().any(|&v| v > 0.0), "{kind} is empty");
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("cube".parse::<PhantomKind>(), Err(Error::InvalidArgument(_))));
        assert_eq!("shepp_logan".parse::<PhantomKind>().unwrap(), PhantomKind::SheppLogan);
    }

    #[test]
    fn stack_perturbs_seed_per_row() {
        let stack = make_phantom_stack(&PhantomSpec::new(PhantomKind::Spheres, 64, 1), 3).unwrap();
        assert_eq!(stack.len(), 3);
        assert_ne!(stack[0], stack[1]);
        let sl = make_phantom_stack(&PhantomSpec::new(PhantomKind::SheppLogan, 32, 1), 2).unwrap();
        assert_eq!(sl[0], sl[1]);
    }
}
