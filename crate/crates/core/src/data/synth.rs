//! Seeded synthetic domain pairs rendered as small two-channel images.
//!
//! Each sample is a 2-D point drawn as a Gaussian bump on the canvas. Channel
//! 0 holds the bump weighted by the column coordinate and channel 1 the bump
//! weighted by the row coordinate, so globally pooled features still encode
//! where the point lies.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DomainPair, EvalLabels, LabeledSet, Shift, TargetSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Renders points given in pixel coordinates `(row, col)` onto `size × size`
/// canvases with bump width `sigma` pixels. Returns `[n, 2, size, size]`.
pub fn render_points(points: &[(f64, f64)], size: usize, sigma: f64) -> Tensor {
    let plane = size * size;
    let mut data = vec![0.0; points.len() * 2 * plane];
    let scale = (size.max(2) - 1) as f64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (n, &(r, c)) in points.iter().enumerate() {
        let base = n * 2 * plane;
        for i in 0..size {
            let di = i as f64 - r;
            for j in 0..size {
                let dj = j as f64 - c;
                let g = (-(di * di + dj * dj) * inv).exp();
                data[base + i * size + j] = g * j as f64 / scale;
                data[base + plane + i * size + j] = g * i as f64 / scale;
            }
        }
    }
    Tensor::new(vec![points.len(), 2, size, size], data).expect("length matches shape")
}

/// `n` labels split as evenly as possible over `classes`, in seeded random order.
fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoonsParams {
    /// Samples per domain.
    pub n: usize,
    pub rotation_deg: f64,
    pub noise: f64,
    pub seed: u64,
    pub size: usize,
    /// Bump width in pixels.
    pub sigma: f64,
}

impl Default for MoonsParams {
    fn default() -> Self {
        Self {
            n: 512,
            rotation_deg: 45.0,
            noise: 0.1,
            seed: 0,
            size: 16,
            sigma: 1.0,
        }
    }
}

/// Center of the two moons; rotations are taken about it.
const MOONS_CENTER: (f64, f64) = (0.5, 0.25);
/// Radius of the disk around the center that maps onto the canvas.
const MOONS_EXTENT: f64 = 2.0;

fn moons_domain(p: &MoonsParams, rotation_deg: f64, rng: &mut ChaCha8Rng) -> (Vec<(f64, f64)>, Vec<usize>) {
    let labels = balanced_labels(p.n, 2, rng);
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let half = (p.size - 1) as f64 / 2.0;
    let points = labels
        .iter()
        .map(|&y| {
            let t = rng.random::<f64>() * PI;
            let (x0, y0) = if y == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let x0 = x0 + p.noise * normal(rng) - MOONS_CENTER.0;
            let y0 = y0 + p.noise * normal(rng) - MOONS_CENTER.1;
            let (x, y) = (c * x0 - s * y0, s * x0 + c * y0);
            // Image rows grow downwards.
            (half - y / MOONS_EXTENT * half, half + x / MOONS_EXTENT * half)
        })
        .collect();
    (points, labels)
}

/// Two-moons source and a copy of the distribution rotated by `rotation_deg`
/// about the moons' center as target.
pub fn gen_two_moons_shift(p: &MoonsParams) -> Result<DomainPair> {
    if p.n < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 samples per domain, got {}", p.n)));
    }
    if !(0.0..=90.0).contains(&p.rotation_deg) {
        return Err(Error::InvalidArgument(format!(
            "rotation must lie in [0, 90] degrees, got {}",
            p.rotation_deg
        )));
    }
    if p.size < 2 || p.sigma <= 0.0 || p.noise < 0.0 {
        return Err(Error::InvalidArgument(format!("degenerate moons parameters {p:?}")));
    }
    let (sp, sy) = moons_domain(p, 0.0, &mut stream(p.seed, 0));
    let (tp, ty) = moons_domain(p, p.rotation_deg, &mut stream(p.seed, 1));
    let pair = DomainPair {
        source: LabeledSet::new(render_points(&sp, p.size, p.sigma), sy, 2)?,
        target: TargetSet {
            x: render_points(&tp, p.size, p.sigma),
            labels: EvalLabels::new(ty),
        },
        classes: 2,
        shift: Shift {
            kind: "rotation".into(),
            magnitude: p.rotation_deg,
        },
        overlap_warning: false,
    };
    pair.validate()?;
    Ok(pair)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub classes: usize,
    /// Samples per domain.
    pub n: usize,
    /// Horizontal translation of the target means, in pixels.
    pub mean_shift: f64,
    pub seed: u64,
    pub size: usize,
    /// Distance of the class means from the canvas center, in pixels.
    pub radius: f64,
    /// Per-coordinate standard deviation around each mean, in pixels.
    pub spread: f64,
    pub sigma: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            classes: 3,
            n: 300,
            mean_shift: 2.0,
            seed: 0,
            size: 16,
            radius: 4.0,
            spread: 0.8,
            sigma: 1.0,
        }
    }
}

/// Class means closer than this many spreads raise the overlap warning.
pub const BLOB_SEPARATION: f64 = 4.0;

fn blob_domain(p: &BlobParams, shift: f64, rng: &mut ChaCha8Rng) -> (Vec<(f64, f64)>, Vec<usize>) {
    let labels = balanced_labels(p.n, p.classes, rng);
    let center = (p.size - 1) as f64 / 2.0;
    let points = labels
        .iter()
        .map(|&k| {
            let a = 2.0 * PI * k as f64 / p.classes as f64;
            let r = center + p.radius * a.sin() + p.spread * normal(rng);
            let c = center + p.radius * a.cos() + shift + p.spread * normal(rng);
            (r, c)
        })
        .collect();
    (points, labels)
}

/// `K` Gaussian blobs placed evenly on a circle; the target translates every
/// mean horizontally by `mean_shift` pixels.
pub fn gen_blob_shift(p: &BlobParams) -> Result<DomainPair> {
    if p.classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", p.classes)));
    }
    if p.n < 2 * p.classes {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples per domain, got {}",
            2 * p.classes,
            p.n
        )));
    }
    if p.size < 2 || p.sigma <= 0.0 || p.spread < 0.0 {
        return Err(Error::InvalidArgument(format!("degenerate blob parameters {p:?}")));
    }
    // Chord between adjacent means on the circle.
    let min_dist = 2.0 * p.radius * (PI / p.classes as f64).sin();
    let overlap_warning = min_dist < BLOB_SEPARATION * p.spread;
    if overlap_warning {
        log::warn!("blob means {min_dist:.2}px apart with spread {:.2}px overlap", p.spread);
    }
    let (sp, sy) = blob_domain(p, 0.0, &mut stream(p.seed, 0));
    let (tp, ty) = blob_domain(p, p.mean_shift, &mut stream(p.seed, 1));
    let pair = DomainPair {
        source: LabeledSet::new(render_points(&sp, p.size, p.sigma), sy, p.classes)?,
        target: TargetSet {
            x: render_points(&tp, p.size, p.sigma),
            labels: EvalLabels::new(ty),
        },
        classes: p.classes,
        shift: Shift {
            kind: "translation".into(),
            magnitude: p.mean_shift,
        },
        overlap_warning,
    };
    pair.validate()?;
    Ok(pair)
}
