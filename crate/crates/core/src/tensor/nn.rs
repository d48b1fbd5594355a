//! Fused neural-network kernels with hand-written backward passes.

use std::sync::Arc;

use super::{BackwardCtx, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Valid-mode separable correlation of the last two axes with a 1-D kernel applied
/// along rows then columns. Input `[.., h, w]`, output `[.., h-k+1, w-k+1]`.
pub(crate) fn filter_valid_raw(x: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let planes = x.len() / (h * w);
    let mut out = vec![0.0; planes * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xo in 0..ow {
                tmp[y * ow + xo] = (0..k).map(|t| kernel[t] * src[y * w + xo + t]).sum();
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for yo in 0..oh {
            for xo in 0..ow {
                dst[yo * ow + xo] = (0..k).map(|t| kernel[t] * tmp[(yo + t) * ow + xo]).sum();
            }
        }
    }
    out
}

fn filter_valid_adjoint(g: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let planes = g.len() / (oh * ow);
    let mut gx = vec![0.0; planes * h * w];
    let mut gtmp = vec![0.0; h * ow];
    for p in 0..planes {
        gtmp.iter_mut().for_each(|v| *v = 0.0);
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for yo in 0..oh {
            for xo in 0..ow {
                let v = gp[yo * ow + xo];
                for t in 0..k {
                    gtmp[(yo + t) * ow + xo] += kernel[t] * v;
                }
            }
        }
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xo in 0..ow {
                let v = gtmp[y * ow + xo];
                for t in 0..k {
                    dst[y * w + xo + t] += kernel[t] * v;
                }
            }
        }
    }
    gx
}

/// Precomputed rotation angles for a fixed token layout, one `(cos, sin)` per
/// token and rotation pair, stored `[n_tokens, pairs]`.
#[derive(Debug, Clone)]
pub struct RopeTables {
    pub n_tokens: usize,
    pub pairs: usize,
    pub cos: Arc<Vec<f64>>,
    pub sin: Arc<Vec<f64>>,
}

impl RopeTables {
    pub fn from_angles(n_tokens: usize, pairs: usize, angles: &[f64]) -> Self {
        assert_eq!(angles.len(), n_tokens * pairs);
        Self {
            n_tokens,
            pairs,
            cos: Arc::new(angles.iter().map(|a| a.cos()).collect()),
            sin: Arc::new(angles.iter().map(|a| a.sin()).collect()),
        }
    }
}

fn rotate(x: &[f64], tables: &RopeTables, inverse: bool) -> Vec<f64> {
    let hd = 2 * tables.pairs;
    let per_block = tables.n_tokens * hd;
    let mut out = vec![0.0; x.len()];
    for (blk_in, blk_out) in x.chunks(per_block).zip(out.chunks_mut(per_block)) {
        for t in 0..tables.n_tokens {
            for p in 0..tables.pairs {
                let c = tables.cos[t * tables.pairs + p];
                let s = if inverse { -tables.sin[t * tables.pairs + p] } else { tables.sin[t * tables.pairs + p] };
                let i = t * hd + 2 * p;
                let (x0, x1) = (blk_in[i], blk_in[i + 1]);
                blk_out[i] = x0 * c - x1 * s;
                blk_out[i + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

impl Tensor {
    /// Softmax over the last axis. `-inf` entries come out exactly 0 and receive
    /// exactly zero gradient; a row with no finite entry is an error.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let len = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let mut data = Vec::with_capacity(self.numel());
        for (r, row) in self.data().chunks(len).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::InvalidMask { row: r });
            }
            let start = data.len();
            data.extend(row.iter().map(|v| (v - m).exp()));
            let z: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|v| *v /= z);
        }
        Ok(Tensor::from_op(
            "softmax",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = Vec::with_capacity(ctx.grad.len());
                for (y, gy) in ctx.out.chunks(len).zip(ctx.grad.chunks(len)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    g.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain * x̂ + bias`. Variance is the biased (population) estimate.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.numel() / d;
        let mut xhat = Vec::with_capacity(self.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in self.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|v| (v - mean) * r));
        }
        let (gd, bd) = (gain.data(), bias.data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| gd[i % d] * v + bd[i % d])
            .collect();
        Ok(Tensor::from_op(
            "layer_norm",
            data,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx.grad;
                let gain = ctx.parents[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut out = Vec::with_capacity(g.len());
                    for ((gr, xr), r) in g.chunks(d).zip(xhat.chunks(d)).zip(&rstd) {
                        let dxh: Vec<f64> = gr.iter().zip(gain).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        out.extend(dxh.iter().zip(xr).map(|(a, xh)| r * (a - m1 - xh * m2)));
                    }
                    out
                });
                let ggain = ctx.needs[1].then(|| {
                    let mut out = vec![0.0; d];
                    for (i, (gi, xh)) in g.iter().zip(&xhat).enumerate() {
                        out[i % d] += gi * xh;
                    }
                    out
                });
                let gbias = ctx.needs[2].then(|| {
                    let mut out = vec![0.0; d];
                    for (i, gi) in g.iter().enumerate() {
                        out[i % d] += gi;
                    }
                    out
                });
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Valid-mode separable filtering of the last two axes (see [`filter_valid_raw`]).
    pub fn filter2d_valid(&self, kernel: Arc<Vec<f64>>) -> Result<Tensor> {
        let nd = self.ndim();
        let k = kernel.len();
        if nd < 2 || self.shape()[nd - 2] < k || self.shape()[nd - 1] < k {
            return Err(Error::Config(format!(
                "filter of size {k} does not fit an input of shape {:?}",
                self.shape()
            )));
        }
        let (h, w) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let data = filter_valid_raw(self.data(), h, w, &kernel);
        let mut shape = self.shape().to_vec();
        shape[nd - 2] = h + 1 - k;
        shape[nd - 1] = w + 1 - k;
        Ok(Tensor::from_op(
            "filter2d_valid",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(filter_valid_adjoint(ctx.grad, h, w, &kernel))]),
        ))
    }

    /// Squared Euclidean distances between rows: `[.., n, d] × [.., m, d] → [.., n, m]`.
    /// Leading axes must match exactly.
    pub fn pairwise_sq_dist(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let nd = sa.len();
        if nd < 2 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] || sa[nd - 1] != sb[nd - 1] {
            return Err(Error::shape("pairwise_sq_dist", sa, sb));
        }
        let (n, m, d) = (sa[nd - 2], sb[nd - 2], sa[nd - 1]);
        let batches = self.numel() / (n * d);
        let (a, b) = (self.data(), other.data());
        let mut data = Vec::with_capacity(batches * n * m);
        for bi in 0..batches {
            for i in 0..n {
                let ai = &a[(bi * n + i) * d..][..d];
                for j in 0..m {
                    let bj = &b[(bi * m + j) * d..][..d];
                    data.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
                }
            }
        }
        let mut shape = sa[..nd - 1].to_vec();
        shape.push(m);
        Ok(Tensor::from_op(
            "pairwise_sq_dist",
            data,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; b.len()];
                for bi in 0..batches {
                    for i in 0..n {
                        for j in 0..m {
                            let g = 2.0 * ctx.grad[(bi * n + i) * m + j];
                            if g == 0.0 {
                                continue;
                            }
                            let (ia, ib) = ((bi * n + i) * d, (bi * m + j) * d);
                            for c in 0..d {
                                let diff = g * (a[ia + c] - b[ib + c]);
                                ga[ia + c] += diff;
                                gb[ib + c] -= diff;
                            }
                        }
                    }
                }
                vec![ctx.needs[0].then_some(ga), ctx.needs[1].then_some(gb)]
            }),
        ))
    }

    /// Rotates consecutive feature pairs `(2p, 2p+1)` of each token by the angles in
    /// `tables`. Input `[.., n_tokens, 2·pairs]`.
    pub fn rotate_pairs(&self, tables: &RopeTables) -> Result<Tensor> {
        let s = self.shape();
        let nd = s.len();
        if nd < 2 || s[nd - 2] != tables.n_tokens || s[nd - 1] != 2 * tables.pairs {
            return Err(Error::shape(
                "rotate_pairs",
                s,
                &[tables.n_tokens, 2 * tables.pairs],
            ));
        }
        let data = rotate(self.data(), tables, false);
        let tables = tables.clone();
        Ok(Tensor::from_op(
            "rotate_pairs",
            data,
            s.to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(rotate(ctx.grad, &tables, true))]),
        ))
    }
}
