//! Layout ops: reshape, index gathers (permute, slice, broadcast) and concatenation.

use std::sync::Arc;

use super::{numel_of, BackwardCtx, Tensor};
use crate::error::{Error, Result};

/// Marks an output element of [`Tensor::gather`] that reads as zero.
pub const ZERO_FILL: usize = usize::MAX;

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op_shared(
            "reshape",
            self.data_arc(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Output element `i` is `self[index[i]]`, or 0 where `index[i] == ZERO_FILL`.
    /// The backward pass scatter-adds, so repeated indices are fine.
    pub fn gather(&self, shape: &[usize], index: Arc<Vec<usize>>) -> Result<Tensor> {
        if index.len() != numel_of(shape) {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let src = self.data();
        if let Some(&bad) = index.iter().find(|&&i| i != ZERO_FILL && i >= src.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index
            .iter()
            .map(|&i| if i == ZERO_FILL { 0.0 } else { src[i] })
            .collect();
        let n_src = self.numel();
        Ok(Tensor::from_op(
            "gather",
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; n_src];
                for (&i, v) in index.iter().zip(ctx.grad) {
                    if i != ZERO_FILL {
                        g[i] += v;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", shape, axes));
        }
        let in_strides = strides_of(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = self.numel();
        let mut index = Vec::with_capacity(total);
        let mut idx = vec![0usize; out_shape.len()];
        let mut off = 0usize;
        for _ in 0..total {
            index.push(off);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                off += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        self.gather(&out_shape, Arc::new(index))
    }

    pub fn transpose_last2(&self) -> Result<Tensor> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::shape("transpose_last2", self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    /// Picks `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Contract(format!(
                "narrow({axis}, {start}, {len}) on shape {shape:?}"
            )));
        }
        let outer = numel_of(&shape[..axis]);
        let inner = numel_of(&shape[axis + 1..]);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.gather(&out_shape, Arc::new(index))
    }

    /// Repeats the tensor along new leading axes: `[..s] → [..lead, ..s]`.
    pub fn expand_leading(&self, lead: &[usize]) -> Result<Tensor> {
        let n = self.numel();
        let reps = numel_of(lead);
        let index: Vec<usize> = (0..reps).flat_map(|_| 0..n).collect();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape());
        self.gather(&shape, Arc::new(index))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", base, &[axis]));
        }
        for p in parts {
            let s = p.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", base, s));
            }
        }
        let outer = numel_of(&base[..axis]);
        let inner = numel_of(&base[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            "concat",
            data,
            shape,
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut grads: Vec<Option<Vec<f64>>> = ctx
                    .needs
                    .iter()
                    .zip(&widths)
                    .map(|(&need, w)| need.then(|| Vec::with_capacity(outer * w)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, w) in grads.iter_mut().zip(&widths) {
                        if let Some(g) = g {
                            g.extend_from_slice(&ctx.grad[off..off + w]);
                        }
                        off += w;
                    }
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::grad_check;

    #[test]
    fn permute_moves_elements() {
        let x = Tensor::new((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let t = x.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0., 3., 1., 4., 2., 5.]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn permute_3d_matches_index_formula() {
        let x = Tensor::new((0..24).map(f64::from).collect(), &[2, 3, 4]).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(y.data()[(a * 2 + b) * 3 + c], x.data()[(b * 3 + c) * 4 + a]);
                }
            }
        }
    }

    #[test]
    fn narrow_and_concat_invert() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[2, 5, 3], 1.0, &mut rng);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        let y = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn layout_ops_pass_grad_check() {
        let mut rng = Rng::new(2);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 1, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 2, 4], 1.0, &mut rng);
        let err = grad_check(
            |p| {
                let c = Tensor::concat(&[p[0].clone(), p[1].clone()], 1)?;
                let t = c.permute(&[1, 0, 2])?.narrow(0, 0, 4)?;
                let e = p[1].reshape(&[2, 4])?.expand_leading(&[3])?;
                t.mul(&w)?.sum().add(&e.square().sum())
            },
            &[x, y],
            1e-5,
            30,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_fill_gathers_zero_and_blocks_gradient() {
        let x = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.gather(&[3], Arc::new(vec![1, ZERO_FILL, 1])).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 2.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 2.0]);
    }
}
