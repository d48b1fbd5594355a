//! Batched matrix products with broadcasting over leading dimensions.

use super::{numel_of, BackwardCtx, Tensor};
use crate::error::{Error, Result};

/// `c += a · b` where `a` is m×k and `b` is k×n, both described by row/column
/// strides, and `c` is an m×n block with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    rsc: usize,
) {
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.len() >= extent(m, k, rsa, csa), "gemm: lhs out of bounds");
    assert!(b.len() >= extent(k, n, rsb, csb), "gemm: rhs out of bounds");
    assert!(c.len() >= extent(m, n, rsc, 1), "gemm: out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` cannot alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Layout of one batched product: per-batch offsets into both operands.
struct Plan {
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
    out_shape: Vec<usize>,
}

fn broadcast_offsets(batch: &[usize], dims: &[usize], block: usize) -> Vec<usize> {
    // right-align `dims` against `batch`
    let pad = batch.len() - dims.len();
    let mut strides = vec![0usize; batch.len()];
    let mut s = block;
    for d in (0..dims.len()).rev() {
        strides[pad + d] = if dims[d] == 1 { 0 } else { s };
        s *= dims[d];
    }
    let total = numel_of(batch);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; batch.len()];
    for _ in 0..total {
        offsets.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offsets
}

fn plan(a: &[usize], b: &[usize], trans_b: bool) -> Result<Plan> {
    let op = if trans_b { "matmul_t" } else { "matmul" };
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(op, a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(Error::shape(op, a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);

    // Plain right operand: fold every leading dimension of `a` into the rows.
    if bb.is_empty() {
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(n);
        return Ok(Plan {
            m: numel_of(ab) * m,
            k,
            n,
            trans_b,
            a_offsets: vec![0],
            b_offsets: vec![0],
            out_shape,
        });
    }

    let rank = ab.len().max(bb.len());
    let mut batch = vec![0usize; rank];
    for i in 0..rank {
        let da = if i + ab.len() >= rank { ab[i + ab.len() - rank] } else { 1 };
        let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
        batch[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    Ok(Plan {
        m,
        k,
        n,
        trans_b,
        a_offsets: broadcast_offsets(&batch, ab, m * k),
        b_offsets: broadcast_offsets(&batch, bb, k * n),
        out_shape,
    })
}

impl Plan {
    /// Strides of the k×n right factor as stored.
    fn b_strides(&self) -> (usize, usize) {
        if self.trans_b {
            (1, self.k)
        } else {
            (self.n, 1)
        }
    }

    fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; numel_of(&self.out_shape)];
        for (bi, (ao, bo)) in self.a_offsets.iter().zip(&self.b_offsets).enumerate() {
            gemm_acc(
                m,
                k,
                n,
                &a[*ao..],
                (k, 1),
                &b[*bo..],
                self.b_strides(),
                &mut out[bi * m * n..],
                n,
            );
        }
        out
    }

    fn grad_a(&self, g: &[f64], b: &[f64], a_len: usize) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        // dA = dC · B'ᵀ, where B' is the k×n right factor.
        let bt = if self.trans_b { (self.k, 1) } else { (1, self.n) };
        let mut ga = vec![0.0; a_len];
        for (bi, (ao, bo)) in self.a_offsets.iter().zip(&self.b_offsets).enumerate() {
            gemm_acc(m, n, k, &g[bi * m * n..], (n, 1), &b[*bo..], bt, &mut ga[*ao..], k);
        }
        ga
    }

    fn grad_b(&self, g: &[f64], a: &[f64], b_len: usize) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut gb = vec![0.0; b_len];
        for (bi, (ao, bo)) in self.a_offsets.iter().zip(&self.b_offsets).enumerate() {
            if self.trans_b {
                // stored B is n×k: dB = dCᵀ · A
                gemm_acc(n, m, k, &g[bi * m * n..], (1, n), &a[*ao..], (k, 1), &mut gb[*bo..], k);
            } else {
                // dB = Aᵀ · dC
                gemm_acc(k, m, n, &a[*ao..], (1, k), &g[bi * m * n..], (n, 1), &mut gb[*bo..], n);
            }
        }
        gb
    }
}

fn matmul_impl(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let plan = plan(a.shape(), b.shape(), trans_b)?;
    let data = plan.forward(a.data(), b.data());
    let out_shape = plan.out_shape.clone();
    Ok(Tensor::from_op(
        if trans_b { "matmul_t" } else { "matmul" },
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
            vec![
                ctx.needs[0].then(|| plan.grad_a(ctx.grad, b.data(), a.numel())),
                ctx.needs[1].then(|| plan.grad_b(ctx.grad, a.data(), b.numel())),
            ]
        }),
    ))
}

impl Tensor {
    /// Matrix product over the last two axes, `[.., m, k] × [.., k, n] → [.., m, n]`.
    /// Leading axes broadcast numpy-style.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        matmul_impl(self, rhs, false)
    }

    /// `self · rhsᵀ` over the last two axes, `[.., m, k] × [.., n, k] → [.., m, n]`.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        matmul_impl(self, rhs, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::grad_check;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_times_m_is_m() {
        let eye = Tensor::new(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]).unwrap();
        let m = Tensor::new((0..9).map(|v| v as f64 * 1.5 - 2.0).collect(), &[3, 3]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn zero_annihilates() {
        let a = Tensor::new(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn dimension_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_and_broadcast_match_naive() {
        let mut rng = Rng::new(11);
        let a = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 5, 2], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4, 2]);
        for i in 0..2 {
            for j in 0..3 {
                let ablk = &a.data()[(i * 3 + j) * 20..][..20];
                let bblk = &b.data()[j * 10..][..10];
                let expect = naive(ablk, bblk, 4, 5, 2);
                let got = &c.data()[(i * 3 + j) * 8..][..8];
                for (x, y) in expect.iter().zip(got) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_t_equals_explicit_transpose() {
        let mut rng = Rng::new(5);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let c1 = a.matmul_t(&b).unwrap();
        let c2 = a.matmul(&b.transpose_last2().unwrap()).unwrap();
        for (x, y) in c1.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = Rng::new(7);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let err = grad_check(|p| Ok(p[0].matmul(&p[1])?.sum()), &[a, b], 1e-5, 35, &mut rng).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn broadcast_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 5, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 3, 5], 1.0, &mut rng);
        let err = grad_check(
            |p| Ok(p[0].matmul_t(&p[1])?.mul(&w)?.sum()),
            &[a, b],
            1e-5,
            40,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let m = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let err = grad_check(|p| Ok(p[0].matmul(&p[1])?.square().sum()), &[x, m], 1e-5, 40, &mut rng).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
