//! Fast invariant suite run by `vitrecon selfcheck`.

use std::time::Instant;

use crate::attention::{AttentionVariant, AttentionWeights};
use crate::embeddings::{apply_rope, RopeParams, ROPE_BASE};
use crate::error::Result;
use crate::layers::ParametersExt;
use crate::losses::ssim_loss;
use crate::metrics::{gaussian_window, nmse, psnr, ssim};
use crate::model::{Checkpoint, GeneratorModel, ModelConfig};
use crate::rng::Rng;
use crate::tensor::{grad_check, Tensor, LAYER_NORM_EPS};
use crate::vision::{patchify, spt_shifts, spt_stack, spt_token_len, PatchGrid};

const GRAD_TOL: f64 = 1e-4;

/// Replaceable kernels, so tests can verify that a broken one is caught.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub softmax: fn(&Tensor) -> Result<Tensor>,
}

impl Default for Hooks {
    fn default() -> Self {
        Self {
            softmax: Tensor::softmax_last,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = Result<(bool, String)>;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn project(t: Tensor) -> Result<Tensor> {
    let n = t.numel();
    let w = Tensor::new(Rng::new(n as u64).normal_vec(n, 1.0), &[n])?;
    t.reshape(&[n])?.mul(&w).map(|p| p.sum())
}

fn grad_result(err: f64) -> (bool, String) {
    (err < GRAD_TOL, format!("max relative error {err:.2e}"))
}

fn softmax_simplex(hooks: &Hooks) -> Outcome {
    let mut rng = Rng::new(1);
    let x = Tensor::new(rng.normal_vec(6 * 7, 4.0), &[6, 7])?;
    let s = (hooks.softmax)(&x)?;
    let worst = s
        .data()
        .chunks(7)
        .map(|row| {
            let neg = row.iter().any(|&v| v < 0.0);
            if neg {
                f64::INFINITY
            } else {
                (row.iter().sum::<f64>() - 1.0).abs()
            }
        })
        .fold(0.0, f64::max);
    Ok((s.shape() == x.shape() && worst < 1e-12, format!("max |row sum - 1| {worst:.1e}")))
}

fn softmax_gradient(hooks: &Hooks) -> Outcome {
    let mut rng = Rng::new(2);
    let x = randn(&[3, 5], &mut rng);
    let f = hooks.softmax;
    Ok(grad_result(grad_check(|p| project(f(&p[0])?), &[x], 1e-4, 15, &mut rng)?))
}

fn op_gradients() -> Outcome {
    let mut rng = Rng::new(3);
    let a = randn(&[2, 3, 4], &mut rng);
    let b = randn(&[4, 4], &mut rng);
    let (g, beta) = (randn(&[4], &mut rng), randn(&[4], &mut rng));
    let err = grad_check(
        |p| {
            let h = p[0].matmul(&p[1])?.layer_norm(&p[2], &p[3], LAYER_NORM_EPS)?.gelu();
            project(h.matmul_t(&p[0])?.sigmoid())
        },
        &[a, b, g, beta],
        1e-4,
        40,
        &mut rng,
    )?;
    Ok(grad_result(err))
}

fn attention_gradients() -> Outcome {
    let mut rng = Rng::new(4);
    let x = randn(&[5, 8], &mut rng);
    let mut worst: f64 = 0.0;
    for variant in [AttentionVariant::Standard, AttentionVariant::Locality, AttentionVariant::L2] {
        let w = AttentionWeights::new(8, 2, variant, &mut rng)?;
        let mut params = vec![x.clone()];
        params.extend(w.params().iter().map(|t| t.mul_scalar(10.0)));
        let err = grad_check(|p| project(w.with_params(&p[1..])?.forward(&p[0], None)?), &params, 1e-4, 25, &mut rng)?;
        worst = worst.max(err);
    }
    Ok(grad_result(worst))
}

fn generator_gradient() -> Outcome {
    let cfg = ModelConfig {
        image_h: 16,
        image_w: 16,
        patch: 4,
        d_model: 16,
        heads: 2,
        depth: 2,
        use_spt: true,
        use_rope: true,
        use_lsa: true,
        seed: 6,
        ..Default::default()
    };
    let g = GeneratorModel::new(&cfg)?;
    let mut rng = Rng::new(5);
    let clean = Tensor::new((0..256).map(|_| rng.uniform()).collect(), &[1, 16, 16])?;
    let noisy = Tensor::new((0..256).map(|_| rng.uniform()).collect(), &[1, 16, 16])?;
    let params: Vec<Tensor> = g
        .params()
        .iter()
        .map(|t| t.add(&Tensor::randn(t.shape(), 0.2, &mut rng)).map(|s| s.detach()))
        .collect::<Result<_>>()?;
    let err = grad_check(|p| ssim_loss(&clean, &g.with_params(p)?.forward(&noisy)?), &params, 1e-4, 60, &mut rng)?;
    Ok(grad_result(err))
}

// Direct double loop over an explicit 2-D window.
fn ssim_loop(x: &[f64], y: &[f64], n: usize) -> f64 {
    let g = gaussian_window(11, 1.5);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for i in 0..=n - 11 {
        for j in 0..=n - 11 {
            let at = |v: &[f64], u: usize, s: usize| v[(i + u) * n + j + s];
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..11 {
                for s in 0..11 {
                    let w = g[u] * g[s];
                    let (a, b) = (at(x, u, s), at(y, u, s));
                    mx += w * a;
                    my += w * b;
                    xx += w * a * a;
                    yy += w * b * b;
                    xy += w * a * b;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    acc / ((n - 10) * (n - 10)) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::new(7);
    let img = |rng: &mut Rng| Tensor::new((0..16 * 16).map(|_| rng.uniform()).collect(), &[1, 16, 16]);
    let (x, y) = (img(&mut rng)?, img(&mut rng)?);
    let loop_err = (ssim(&x, &y)? - ssim_loop(x.data(), y.data(), 16)).abs();
    let identity = ssim(&x, &x)?;
    let p = psnr(&Tensor::full(&[1, 4, 4], 0.2), &Tensor::full(&[1, 4, 4], 0.3), 1.0)?;
    let n = nmse(&x, &Tensor::zeros(&[1, 16, 16]))?;
    let ok = loop_err < 1e-8 && identity == 1.0 && (p - 20.0).abs() < 1e-9 && n == 1.0;
    Ok((ok, format!("ssim loop err {loop_err:.1e}, ssim(x,x) {identity}, psnr {p:.9}, nmse(x,0) {n}")))
}

fn rope_translation() -> Outcome {
    let mut rng = Rng::new(8);
    let params = RopeParams::new(8, ROPE_BASE)?;
    let pos = PatchGrid::new(12, 12, 3)?.positions();
    let (q, k) = (randn(&[pos.len(), 8], &mut rng), randn(&[pos.len(), 8], &mut rng));
    let logits = |p: &[(f64, f64)]| apply_rope(&q, p, &params)?.matmul_t(&apply_rope(&k, p, &params)?);
    let base = logits(&pos)?;
    let moved: Vec<(f64, f64)> = pos.iter().map(|&(r, c)| (r + 5.0, c - 3.0)).collect();
    let err = base.data().iter().zip(logits(&moved)?.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((err <= 1e-9, format!("max logit change {err:.1e}")))
}

fn lsa_diagonal() -> Outcome {
    let mut rng = Rng::new(9);
    let w = AttentionWeights::new(16, 4, AttentionVariant::Locality, &mut rng)?;
    let probs = w.probabilities(&randn(&[6, 16], &mut rng), None)?;
    let diag_zero = probs.data().chunks(36).all(|m| (0..6).all(|i| m[i * 6 + i] == 0.0));
    let tau = w.tau().map(|t| t.data()[0]).unwrap_or(f64::NAN);
    let ok = diag_zero && (tau - 2.0).abs() <= 1e-12;
    Ok((ok, format!("diagonal zero {diag_zero}, initial tau {tau}")))
}

fn spt_shape() -> Outcome {
    let p = 4;
    let img = Tensor::zeros(&[1, 8, 12]);
    let grid = PatchGrid::new(8, 12, p)?;
    let tokens = patchify(&spt_stack(&img, p)?, &grid)?;
    let s = (p / 2) as i64;
    let ok = tokens.shape() == [grid.n_tokens(), spt_token_len(1, p)]
        && spt_token_len(1, p) == 5 * p * p
        && spt_shifts(p).iter().all(|&(dy, dx)| dy.abs() == s && dx.abs() == s);
    Ok((ok, format!("token shape {:?}", tokens.shape())))
}

fn checkpoint_round_trip() -> Outcome {
    let g = GeneratorModel::new(&ModelConfig {
        image_h: 8,
        image_w: 8,
        patch: 4,
        d_model: 8,
        heads: 2,
        depth: 1,
        ..Default::default()
    })?;
    let bytes = g.to_checkpoint().to_bytes()?;
    let again = GeneratorModel::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?.to_checkpoint().to_bytes()?;
    Ok((bytes == again, format!("{} bytes", bytes.len())))
}

/// Runs every check, never stopping early.
pub fn run(hooks: &Hooks) -> Vec<CheckResult> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("softmax simplex", Box::new(|| softmax_simplex(hooks))),
        ("softmax gradient", Box::new(|| softmax_gradient(hooks))),
        ("op gradients", Box::new(op_gradients)),
        ("attention gradients", Box::new(attention_gradients)),
        ("generator gradient", Box::new(generator_gradient)),
        ("metric oracles", Box::new(metric_oracles)),
        ("rope translation invariance", Box::new(rope_translation)),
        ("lsa diagonal", Box::new(lsa_diagonal)),
        ("spt shape", Box::new(spt_shape)),
        ("checkpoint round-trip", Box::new(checkpoint_round_trip)),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let started = Instant::now();
            let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
            CheckResult {
                name,
                passed,
                detail,
                seconds: started.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
