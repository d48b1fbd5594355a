//! Image ↔ token conversions.
//!
//! Layout conventions (stable, checkpoints depend on them):
//! - patches are numbered row-major over the patch grid;
//! - a token flattens its patch channel-major, then row, then column, so element
//!   `ch·p² + py·p + px` of token `r·cols + q` is pixel `(ch, r·p + py, q·p + px)`.
//!
//! All functions accept optional leading batch axes in front of `[c, h, w]`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::tensor::{Tensor, ZERO_FILL};

/// Non-overlapping tiling of an image into `patch × patch` squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(image_h: usize, image_w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !image_h.is_multiple_of(patch) || !image_w.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "patch size {patch} does not divide image {image_h}x{image_w}"
            )));
        }
        Ok(Self {
            image_h,
            image_w,
            patch,
        })
    }

    pub fn rows(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn cols(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn n_tokens(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Raw (pre-projection) token length for `channels` input channels.
    pub fn token_len(&self, channels: usize) -> usize {
        channels * self.patch * self.patch
    }

    /// `(row, col)` grid coordinates of each token, in token order.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        (0..self.rows())
            .flat_map(|r| (0..self.cols()).map(move |c| (r as f64, c as f64)))
            .collect()
    }
}

/// Splits `shape` into (batch count, channels) after checking the trailing `[h, w]`.
fn image_dims(op: &str, shape: &[usize], grid: &PatchGrid) -> Result<(usize, usize)> {
    let n = shape.len();
    if n < 3 || shape[n - 2] != grid.image_h || shape[n - 1] != grid.image_w {
        return Err(Error::Config(format!(
            "{op}: image shape {shape:?} does not match grid {}x{}",
            grid.image_h, grid.image_w
        )));
    }
    Ok((shape[..n - 3].iter().product(), shape[n - 3]))
}

/// `[.., c, h, w] → [.., N, c·p·p]`.
pub fn patchify(img: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let (batch, c) = image_dims("patchify", img.shape(), grid)?;
    let (h, w, p) = (grid.image_h, grid.image_w, grid.patch);
    let (n, len) = (grid.n_tokens(), grid.token_len(c));
    let mut index = Vec::with_capacity(batch * n * len);
    for b in 0..batch {
        for r in 0..grid.rows() {
            for q in 0..grid.cols() {
                for ch in 0..c {
                    for py in 0..p {
                        let row = b * c * h * w + ch * h * w + (r * p + py) * w + q * p;
                        index.extend(row..row + p);
                    }
                }
            }
        }
    }
    let lead = &img.shape()[..img.ndim() - 3];
    let mut shape = lead.to_vec();
    shape.extend([n, len]);
    img.gather(&shape, Arc::new(index))
}

/// Inverse of [`patchify`]: `[.., N, c·p·p] → [.., c, h, w]`.
pub fn depatchify(tokens: &Tensor, grid: &PatchGrid, channels: usize) -> Result<Tensor> {
    let s = tokens.shape();
    let nd = s.len();
    let (n, len) = (grid.n_tokens(), grid.token_len(channels));
    if nd < 2 || s[nd - 2] != n || s[nd - 1] != len {
        return Err(Error::Config(format!(
            "depatchify: tokens {s:?} do not fit {n} tokens of length {len}"
        )));
    }
    let batch: usize = s[..nd - 2].iter().product();
    let (h, w, p) = (grid.image_h, grid.image_w, grid.patch);
    let mut index = Vec::with_capacity(tokens.numel());
    for b in 0..batch {
        for ch in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let t = (y / p) * grid.cols() + x / p;
                    index.push(b * n * len + t * len + ch * p * p + (y % p) * p + x % p);
                }
            }
        }
    }
    let mut shape = s[..nd - 2].to_vec();
    shape.extend([channels, h, w]);
    tokens.gather(&shape, Arc::new(index))
}

/// Translates content by `(dy, dx)` pixels (positive = down/right), keeping the
/// frame: pixels shifted out are dropped and vacated pixels are zero.
pub fn shift_crop_pad(img: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    let s = img.shape();
    let nd = s.len();
    if nd < 2 {
        return Err(Error::shape("shift_crop_pad", s, &[]));
    }
    let (h, w) = (s[nd - 2], s[nd - 1]);
    if dy.unsigned_abs() as usize >= h || dx.unsigned_abs() as usize >= w {
        return Err(Error::Config(format!(
            "shift ({dy}, {dx}) too large for a {h}x{w} image"
        )));
    }
    let planes = img.numel() / (h * w);
    let mut index = Vec::with_capacity(img.numel());
    for pl in 0..planes {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y - dy, x - dx);
                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                    index.push(ZERO_FILL);
                } else {
                    index.push(pl * h * w + sy as usize * w + sx as usize);
                }
            }
        }
    }
    img.gather(s, Arc::new(index))
}

/// The four diagonal half-patch shifts used by shifted patch tokenization, in
/// concatenation order: up-left, up-right, down-left, down-right.
pub fn spt_shifts(patch: usize) -> [(i64, i64); 4] {
    let s = (patch / 2) as i64;
    [(-s, -s), (-s, s), (s, -s), (s, s)]
}

/// Raw token length of shifted patch tokenization: the original plus four shifted copies.
pub fn spt_token_len(channels: usize, patch: usize) -> usize {
    5 * channels * patch * patch
}

/// Stacks the image with its four diagonal shifts along the channel axis:
/// `[.., c, h, w] → [.., 5c, h, w]`.
pub fn spt_stack(img: &Tensor, patch: usize) -> Result<Tensor> {
    let mut parts = vec![img.clone()];
    for (dy, dx) in spt_shifts(patch) {
        parts.push(shift_crop_pad(img, dy, dx)?);
    }
    Tensor::concat(&parts, img.ndim() - 3)
}

/// Shifted patch tokenization: stack shifts, patchify, layer-normalize each raw
/// token, then project to the model width.
pub fn spt_tokenize(img: &Tensor, grid: &PatchGrid, ln: &LayerNorm, proj: &Linear) -> Result<Tensor> {
    let (_, c) = image_dims("spt_tokenize", img.shape(), grid)?;
    let raw = spt_token_len(c, grid.patch);
    if proj.d_in() != raw || ln.gain.numel() != raw {
        return Err(Error::Config(format!(
            "SPT projection expects input width {raw}, found {}",
            proj.d_in()
        )));
    }
    let tokens = patchify(&spt_stack(img, grid.patch)?, grid)?;
    proj.forward(&ln.forward(&tokens)?)
}

/// Number of overlapping `patch × patch` windows with the given stride along one axis.
pub fn overlapping_count(size: usize, patch: usize, stride: usize) -> Result<usize> {
    if patch == 0 || stride == 0 || stride > patch || patch > size || !(size - patch).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "windows of {patch} px with stride {stride} do not tile {size} px"
        )));
    }
    Ok((size - patch) / stride + 1)
}

/// Overlapping patch extraction: `[.., c, h, w] → [.., T, c·p·p]` with windows every
/// `stride` pixels, row-major, each flattened like [`patchify`].
pub fn patchify_overlapping(img: &Tensor, patch: usize, stride: usize) -> Result<Tensor> {
    let s = img.shape();
    let nd = s.len();
    if nd < 3 {
        return Err(Error::shape("patchify_overlapping", s, &[]));
    }
    let (c, h, w) = (s[nd - 3], s[nd - 2], s[nd - 1]);
    let (ny, nx) = (overlapping_count(h, patch, stride)?, overlapping_count(w, patch, stride)?);
    let batch: usize = s[..nd - 3].iter().product();
    let len = c * patch * patch;
    let mut index = Vec::with_capacity(batch * ny * nx * len);
    for b in 0..batch {
        for wy in 0..ny {
            for wx in 0..nx {
                for ch in 0..c {
                    for py in 0..patch {
                        let row = b * c * h * w + ch * h * w + (wy * stride + py) * w + wx * stride;
                        index.extend(row..row + patch);
                    }
                }
            }
        }
    }
    let mut shape = s[..nd - 3].to_vec();
    shape.extend([ny * nx, len]);
    img.gather(&shape, Arc::new(index))
}
