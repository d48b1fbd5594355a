//! Elementwise arithmetic, pointwise nonlinearities and reductions.

use super::{BackwardCtx, Tensor};
use crate::error::{Error, Result};

/// The right operand may be smaller than the left one when its shape is a suffix of
/// the left shape, or when it holds a single element; it is then repeated.
fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let scalar = b.iter().product::<usize>() == 1;
    let suffix = b.len() <= a.len() && a[a.len() - b.len()..] == *b;
    if scalar || suffix {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Sums `g` (laid out like the left operand) down onto the right operand's layout.
fn reduce_to(g: &[f64], nb: usize) -> Vec<f64> {
    if g.len() == nb {
        return g.to_vec();
    }
    let mut out = vec![0.0; nb];
    for chunk in g.chunks(nb) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    check_broadcast(op.name(), a.shape(), b.shape())?;
    let nb = b.numel();
    let bd = b.data();
    let data: Vec<f64> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| op.apply(x, bd[i % nb]))
        .collect();
    Ok(Tensor::from_op(
        op.name(),
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let g = ctx.grad;
            let ad = ctx.parents[0].data();
            let bd = ctx.parents[1].data();
            let nb = bd.len();
            let ga = ctx.needs[0].then(|| match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * bd[i % nb]).collect(),
                BinOp::Div => g.iter().enumerate().map(|(i, gi)| gi / bd[i % nb]).collect(),
            });
            let gb = ctx.needs[1].then(|| {
                let full: Vec<f64> = match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|v| -v).collect(),
                    BinOp::Mul => g.iter().zip(ad).map(|(gi, x)| gi * x).collect(),
                    BinOp::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let y = bd[i % nb];
                            -gi * ad[i] / (y * y)
                        })
                        .collect(),
                };
                reduce_to(&full, nb)
            });
            vec![ga, gb]
        }),
    ))
}

/// Pointwise map whose derivative is expressed through input `x` and output `y`.
fn unary(x: &Tensor, op: &'static str, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        op,
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let xd = ctx.parents[0].data();
            let g = ctx
                .grad
                .iter()
                .zip(xd.iter().zip(ctx.out))
                .map(|(gi, (&x, &y))| gi * df(x, y))
                .collect();
            vec![Some(g)]
        }),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64, _y: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + eˣ) without overflow.
fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Mul)
    }

    /// Elementwise `self / rhs`; `rhs` broadcasts like in [`Tensor::add`].
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinOp::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, "add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            "mul_scalar",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.iter().map(|g| g * c).collect())]),
        )
    }

    /// `x / c` computed as a true division (not multiplication by 1/c).
    pub fn div_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v / c).collect();
        Tensor::from_op(
            "div_scalar",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.iter().map(|g| g / c).collect())]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, "sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, "softplus", softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    /// GELU, tanh approximation (see [`gelu_scalar`]).
    pub fn gelu(&self) -> Tensor {
        unary(self, "gelu", gelu_scalar, gelu_grad)
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![total],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            "mean",
            vec![total / n as f64],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(vec![ctx.grad[0] / n as f64; n])]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::grad_check;

    #[test]
    fn gelu_fixed_points_and_asymptotes() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_at_one_matches_formula() {
        let expected = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715)).tanh());
        let y = Tensor::new(vec![1.0], &[1]).unwrap().gelu();
        assert!((y.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus_scalar(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus_scalar(-800.0) >= 0.0);
        assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn broadcast_rules() {
        let a = Tensor::zeros(&[2, 3, 4]);
        assert!(a.add(&Tensor::zeros(&[4])).is_ok());
        assert!(a.add(&Tensor::zeros(&[3, 4])).is_ok());
        assert!(a.add(&Tensor::scalar(1.0)).is_ok());
        assert!(a.add(&Tensor::zeros(&[3])).is_err());
        assert!(a.add(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn pointwise_ops_pass_grad_check() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng).add_scalar(3.0);
        let err = grad_check(
            |p| {
                let y = p[0].gelu().add(&p[1].sigmoid())?;
                let y = y.mul(&p[0].softplus())?.div(&p[1])?;
                let y = y.sub(&p[0].exp().square())?;
                Ok(y.sum())
            },
            &[x, b],
            1e-5,
            40,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = Tensor::parameter(vec![2.0], &[1]).unwrap();
        x.mul(&s).unwrap().sum().backward().unwrap();
        assert_eq!(s.grad().unwrap(), vec![6.0]);
    }
}
