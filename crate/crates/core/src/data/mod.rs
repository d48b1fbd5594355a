//! Dataset ingestion, augmentation, corruption and batching.
//!
//! Images are single-channel tensors `[1, h, w]` with intensities in `[0, 1]`.

mod io;
mod synthetic;

pub use io::{image_to_u8, load_dataset, load_image, save_image, Dataset, Split};
pub use synthetic::{synthetic_image, write_synthetic_dataset};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_NOISE_VARIANCE: f64 = 0.05;

const TRAIN_STREAM: u64 = 0x7EA1;
const TEST_STREAM: u64 = 0x7E57;

fn plane(img: &Tensor, op: &str) -> Result<(usize, usize)> {
    match *img.shape() {
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::Config(format!("{op} expects a [1, h, w] image, got {:?}", img.shape()))),
    }
}

/// Luminance of a `[3, h, w]` RGB tensor.
pub fn to_grayscale(rgb: &Tensor) -> Result<Tensor> {
    let [3, h, w] = *rgb.shape() else {
        return Err(Error::Config(format!("to_grayscale expects [3, h, w], got {:?}", rgb.shape())));
    };
    let n = h * w;
    let d = rgb.data();
    let gray = (0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect();
    Tensor::new(gray, &[1, h, w])
}

/// One of the eight symmetries of the square: optional horizontal mirror,
/// then `quarter_turns` counter-clockwise rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub mirror: bool,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub fn sample(rng: &mut Rng) -> Self {
        let mirror = rng.coin();
        Self {
            mirror,
            quarter_turns: rng.below(4) as u8,
        }
    }

    pub fn apply(self, img: &Tensor) -> Result<Tensor> {
        let (h, w) = plane(img, "augment")?;
        if self.quarter_turns % 2 == 1 && h != w {
            return Err(Error::Config(format!("quarter-turn rotation needs a square image, got {h}x{w}")));
        }
        let src = img.data();
        let mut cur: Vec<f64> = if self.mirror {
            (0..h * w).map(|i| src[(i / w) * w + (w - 1 - i % w)]).collect()
        } else {
            src.to_vec()
        };
        for _ in 0..self.quarter_turns % 4 {
            // square here, so h == w
            cur = (0..h * w).map(|i| cur[(i % w) * w + (w - 1 - i / w)]).collect();
        }
        Tensor::new(cur, &[1, h, w])
    }
}

pub fn augment(img: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    Dihedral::sample(rng).apply(img)
}

/// Zero-mean Gaussian draws with the given variance, before any clamping.
pub fn noise_field(len: usize, variance: f64, rng: &mut Rng) -> Vec<f64> {
    rng.normal_vec(len, variance.sqrt())
}

pub fn add_gaussian_noise(img: &Tensor, variance: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(variance > 0.0) {
        return Err(Error::Config(format!("noise variance must be positive, got {variance}")));
    }
    let noise = noise_field(img.numel(), variance, rng);
    let out = img.data().iter().zip(noise).map(|(p, n)| (p + n).clamp(0.0, 1.0)).collect();
    Tensor::new(out, img.shape())
}

/// Picks `n_rows` distinct rows without replacement, sorted ascending.
pub fn draw_rows(h: usize, n_rows: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n_rows == 0 || n_rows >= h {
        return Err(Error::Config(format!("row mask needs 0 < n_rows < {h}, got {n_rows}")));
    }
    let mut rows = rand::seq::index::sample(rng, h, n_rows).into_vec();
    rows.sort_unstable();
    Ok(rows)
}

pub fn mask_rows(img: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (h, w) = plane(img, "row mask")?;
    let mut out = img.to_vec();
    for &r in rows {
        if r >= h {
            return Err(Error::Config(format!("masked row {r} outside image of height {h}")));
        }
        out[r * w..(r + 1) * w].iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::new(out, img.shape())
}

pub fn apply_row_mask(img: &Tensor, n_rows: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
    let (h, _) = plane(img, "row mask")?;
    let rows = draw_rows(h, n_rows, rng)?;
    Ok((mask_rows(img, &rows)?, rows))
}

/// Which corruption a task applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise { variance: f64 },
    RowMask { n_rows: usize },
}

impl CorruptionKind {
    pub fn validate(&self, image_h: usize) -> Result<()> {
        match *self {
            CorruptionKind::GaussianNoise { variance } if !(variance > 0.0) => {
                Err(Error::Config(format!("noise variance must be positive, got {variance}")))
            }
            CorruptionKind::RowMask { n_rows } if n_rows == 0 || n_rows >= image_h => Err(Error::Config(format!(
                "row mask needs 0 < n_rows < {image_h}, got {n_rows}"
            ))),
            _ => Ok(()),
        }
    }
}

/// A fully recorded corruption: replaying it on the same clean image is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub seed: u64,
    /// Rows blanked by a mask; empty for noise.
    pub row_indices: Vec<usize>,
}

impl CorruptionSpec {
    /// Draws a new corruption of `clean` from `seed`.
    pub fn draw(kind: CorruptionKind, seed: u64, clean: &Tensor) -> Result<(Self, Tensor)> {
        let mut rng = Rng::new(seed);
        let (corrupted, row_indices) = match kind {
            CorruptionKind::GaussianNoise { variance } => (add_gaussian_noise(clean, variance, &mut rng)?, Vec::new()),
            CorruptionKind::RowMask { n_rows } => apply_row_mask(clean, n_rows, &mut rng)?,
        };
        Ok((
            Self {
                kind,
                seed,
                row_indices,
            },
            corrupted,
        ))
    }

    pub fn apply(&self, clean: &Tensor) -> Result<Tensor> {
        match self.kind {
            CorruptionKind::GaussianNoise { variance } => add_gaussian_noise(clean, variance, &mut Rng::new(self.seed)),
            CorruptionKind::RowMask { .. } => mask_rows(clean, &self.row_indices),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub clean: Tensor,
    pub corrupted: Tensor,
    pub corruption: CorruptionSpec,
    pub source_id: String,
}

impl ImageSample {
    pub fn new(source_id: &str, clean: &Tensor, kind: CorruptionKind, seed: u64) -> Result<Self> {
        let (corruption, corrupted) = CorruptionSpec::draw(kind, seed, clean)?;
        Ok(Self {
            clean: clean.clone(),
            corrupted,
            corruption,
            source_id: source_id.to_string(),
        })
    }
}

/// Seed for a training corruption: fresh every epoch.
pub fn train_corruption_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(seed, &[TRAIN_STREAM, epoch as u64, index as u64])
}

/// Seed for a test corruption: fixed per image so evaluation is stable.
pub fn test_corruption_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[TEST_STREAM, index as u64])
}

/// Corrupts a test split with per-image fixed seeds.
pub fn corrupt_test_split(dataset: &Dataset, kind: CorruptionKind, seed: u64) -> Result<Vec<ImageSample>> {
    dataset
        .images
        .iter()
        .enumerate()
        .map(|(i, (id, img))| ImageSample::new(id, img, kind, test_corruption_seed(seed, i)))
        .collect()
}

/// Shuffles `samples` with `rng` and yields consecutive batches; the last one may be short.
pub fn batch_iter<'a, T>(samples: &'a [T], batch_size: usize, rng: &mut Rng) -> Result<impl Iterator<Item = Vec<&'a T>> + 'a> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(batches.into_iter().map(move |b| b.into_iter().map(|i| &samples[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new((0..h * w).map(|i| i as f64 / (h * w) as f64).collect(), &[1, h, w]).unwrap()
    }

    #[test]
    fn grayscale_coefficients() {
        let gray = Tensor::full(&[3, 2, 2], 0.37);
        assert!(to_grayscale(&gray).unwrap().data().iter().all(|v| (v - 0.37).abs() < 1e-15));
        let mut red = vec![0.0; 12];
        red[..4].fill(1.0);
        let g = to_grayscale(&Tensor::new(red, &[3, 2, 2]).unwrap()).unwrap();
        assert_eq!(g.data()[0], 0.299);
        let mut rng = Rng::new(1);
        let px: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
        let g = to_grayscale(&Tensor::new(px.clone(), &[3, 1, 1]).unwrap()).unwrap();
        assert!((g.data()[0] - (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])).abs() < 1e-12);
    }

    #[test]
    fn dihedral_group_laws() {
        let x = ramp(5, 5);
        let id = Dihedral { mirror: false, quarter_turns: 0 };
        assert_eq!(id.apply(&x).unwrap().data(), x.data());
        let half = Dihedral { mirror: false, quarter_turns: 2 };
        assert_eq!(half.apply(&half.apply(&x).unwrap()).unwrap().data(), x.data());
        let quarter = Dihedral { mirror: false, quarter_turns: 1 };
        let mut y = x.clone();
        for _ in 0..4 {
            y = quarter.apply(&y).unwrap();
        }
        assert_eq!(y.data(), x.data());
        // all eight images are distinct for an asymmetric input
        let mut seen = std::collections::HashSet::new();
        for mirror in [false, true] {
            for quarter_turns in 0..4 {
                let out = Dihedral { mirror, quarter_turns }.apply(&x).unwrap();
                let mut sorted = out.to_vec();
                sorted.sort_by(f64::total_cmp);
                let mut orig = x.to_vec();
                orig.sort_by(f64::total_cmp);
                assert_eq!(sorted, orig);
                seen.insert(out.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
        assert_eq!(seen.len(), 8);
        assert!(quarter.apply(&ramp(4, 6)).is_err());
    }

    #[test]
    fn augmentation_outcomes_are_uniform() {
        let mut rng = Rng::new(2);
        let mut counts: HashMap<Dihedral, usize> = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            *counts.entry(Dihedral::sample(&mut rng)).or_default() += 1;
        }
        assert_eq!(counts.len(), 8);
        let p = 1.0 / 8.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn noise_is_reproducible_and_clamped() {
        let x = Tensor::full(&[1, 16, 16], 0.5);
        let a = add_gaussian_noise(&x, DEFAULT_NOISE_VARIANCE, &mut Rng::new(3)).unwrap();
        let b = add_gaussian_noise(&x, DEFAULT_NOISE_VARIANCE, &mut Rng::new(3)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(x.data().iter().all(|&v| v == 0.5));
        assert!(add_gaussian_noise(&x, 0.0, &mut Rng::new(3)).is_err());
    }

    #[test]
    fn noise_variance_before_clamping() {
        let mut rng = Rng::new(4);
        let n = noise_field(64 * 64, 0.05, &mut rng);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let var = n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.len() - 1) as f64;
        assert!((var - 0.05).abs() < 0.005, "{var}");
    }

    #[test]
    fn row_mask_contract() {
        let x = ramp(8, 5).add_scalar(0.1);
        let (y, rows) = apply_row_mask(&x, 3, &mut Rng::new(5)).unwrap();
        assert_eq!(rows.len(), 3);
        for r in 0..8 {
            let (a, b) = (&x.data()[r * 5..r * 5 + 5], &y.data()[r * 5..r * 5 + 5]);
            if rows.contains(&r) {
                assert!(b.iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(a, b);
            }
        }
        let (y, _) = apply_row_mask(&x, 7, &mut Rng::new(6)).unwrap();
        let nonzero = (0..8).filter(|r| y.data()[r * 5..r * 5 + 5].iter().any(|&v| v != 0.0)).count();
        assert_eq!(nonzero, 1);
        assert!(apply_row_mask(&x, 8, &mut Rng::new(0)).is_err());
        assert!(apply_row_mask(&x, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn row_choice_is_uniform() {
        let mut rng = Rng::new(7);
        let (h, k, draws) = (16, 4, 10_000);
        let mut counts = vec![0usize; h];
        for _ in 0..draws {
            for r in draw_rows(h, k, &mut rng).unwrap() {
                counts[r] += 1;
            }
        }
        let p = k as f64 / h as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn spec_replays_bit_exactly() {
        let x = ramp(8, 8);
        for kind in [CorruptionKind::GaussianNoise { variance: 0.05 }, CorruptionKind::RowMask { n_rows: 2 }] {
            let (spec, y) = CorruptionSpec::draw(kind, 99, &x).unwrap();
            assert_eq!(spec.apply(&x).unwrap().data(), y.data());
        }
    }

    #[test]
    fn batching() {
        let items: Vec<usize> = (0..10).collect();
        let sizes: Vec<usize> = batch_iter(&items, 4, &mut Rng::new(8)).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, [4, 4, 2]);
        let once: Vec<Vec<usize>> = batch_iter(&items, 4, &mut Rng::new(8)).unwrap().map(|b| b.into_iter().copied().collect()).collect();
        let twice: Vec<Vec<usize>> = batch_iter(&items, 4, &mut Rng::new(8)).unwrap().map(|b| b.into_iter().copied().collect()).collect();
        assert_eq!(once, twice);
        let mut all: Vec<usize> = once.concat();
        all.sort();
        assert_eq!(all, items);
        assert!(batch_iter(&items, 0, &mut Rng::new(8)).is_err());
    }
}
