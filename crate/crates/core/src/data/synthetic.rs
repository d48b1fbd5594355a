//! Smooth procedural images for tests, demos and desk-scale experiments.

use std::path::Path;

use super::save_image;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Sum of a tilted plane, a few Gaussian blobs and one soft-edged rectangle,
/// rescaled into `[0.05, 0.95]`.
pub fn synthetic_image(h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let (fh, fw) = (h as f64, w as f64);
    let (gx, gy) = (rng.normal(0.0, 0.5), rng.normal(0.0, 0.5));
    let blobs: Vec<(f64, f64, f64, f64)> = (0..2 + rng.below(4))
        .map(|_| {
            let sigma = fh.min(fw) * (0.08 + 0.25 * rng.uniform());
            (rng.uniform() * fh, rng.uniform() * fw, sigma, rng.normal(0.0, 1.0))
        })
        .collect();
    let (r0, c0) = (rng.uniform() * fh * 0.6, rng.uniform() * fw * 0.6);
    let (r1, c1) = (r0 + fh * (0.2 + 0.3 * rng.uniform()), c0 + fw * (0.2 + 0.3 * rng.uniform()));
    let step = rng.normal(0.0, 0.8);

    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let mut v = gx * fx / fw + gy * fy / fh;
            for &(cy, cx, s, a) in &blobs {
                v += a * (-((fy - cy).powi(2) + (fx - cx).powi(2)) / (2.0 * s * s)).exp();
            }
            let inside = |lo: f64, hi: f64, t: f64| ((t - lo).clamp(0.0, 1.0)) * ((hi - t).clamp(0.0, 1.0));
            v += step * inside(r0, r1, fy) * inside(c0, c1, fx);
            px.push(v);
        }
    }
    let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let out = px.into_iter().map(|v| 0.05 + 0.9 * (v - lo) / span).collect();
    Tensor::new(out, &[1, h, w]).expect("length matches shape")
}

/// Writes `<root>/train/NNNNN.png` and `<root>/test/NNNNN.png`.
pub fn write_synthetic_dataset(root: &Path, n_train: usize, n_test: usize, h: usize, w: usize, seed: u64) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Config("synthetic images need positive dimensions".into()));
    }
    for (split, n, stream) in [("train", n_train, 1u64), ("test", n_test, 2)] {
        let dir = root.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n {
            let mut rng = Rng::new(derive_seed(seed, &[stream, i as u64]));
            save_image(&synthetic_image(h, w, &mut rng), &dir.join(format!("{i:05}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, Split};

    #[test]
    fn in_range_and_deterministic() {
        let a = synthetic_image(16, 16, &mut Rng::new(1));
        let b = synthetic_image(16, 16, &mut Rng::new(1));
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (0.05 - 1e-12..=0.95 + 1e-12).contains(v)));
    }

    #[test]
    fn dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 3, 2, 8, 8, 0).unwrap();
        assert_eq!(load_dataset(dir.path(), Split::Train, None).unwrap().len(), 3);
        assert_eq!(load_dataset(dir.path(), Split::Test, None).unwrap().len(), 2);
    }
}
