//! Multi-head self-attention in three flavours.
//!
//! * standard: `softmax(Q·Kᵀ / √d_k) · V`
//! * locality (LSA): the query/key diagonal is masked to `-inf` and the fixed
//!   `√d_k` temperature is replaced by a learned scalar `τ = exp(θ)`
//! * L2: logits are `-‖qᵢ - kⱼ‖² / √d_k` with one projection shared by queries
//!   and keys, as used by the discriminator
//!
//! Inputs are `[.., N, d_model]`; heads live on an extra axis in front of `N`.

use crate::error::{Error, Result};
use crate::layers::{join, param, Parameters, INIT_STD};
use crate::rng::Rng;
use crate::tensor::{RopeTables, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    Standard,
    Locality,
    L2,
}

/// Scale applied to the logits before the softmax (logits are divided by it).
#[derive(Debug, Clone)]
pub enum Temperature {
    Fixed(f64),
    Learned(Tensor),
}

/// Projection matrices of one attention layer.
///
/// `key` is `None` for L2 attention, where `query` serves both roles.
/// `log_tau` is present only for locality attention.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub heads: usize,
    pub head_dim: usize,
    pub query: Tensor,
    pub key: Option<Tensor>,
    pub value: Tensor,
    pub out: Tensor,
    pub log_tau: Option<Tensor>,
}

impl AttentionWeights {
    pub fn new(d_model: usize, heads: usize, variant: AttentionVariant, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let head_dim = d_model / heads;
        let query = param(&[d_model, d_model], INIT_STD, rng);
        let key = (variant != AttentionVariant::L2).then(|| param(&[d_model, d_model], INIT_STD, rng));
        let value = param(&[d_model, d_model], INIT_STD, rng);
        let out = param(&[d_model, d_model], INIT_STD, rng);
        // τ starts at √d_k, the vanilla operating point
        let log_tau = (variant == AttentionVariant::Locality)
            .then(|| Tensor::full(&[1], (head_dim as f64).sqrt().ln()).to_parameter());
        Ok(Self {
            heads,
            head_dim,
            query,
            key,
            value,
            out,
            log_tau,
        })
    }

    pub fn variant(&self) -> AttentionVariant {
        match (&self.key, &self.log_tau) {
            (None, _) => AttentionVariant::L2,
            (Some(_), Some(_)) => AttentionVariant::Locality,
            (Some(_), None) => AttentionVariant::Standard,
        }
    }

    pub fn d_model(&self) -> usize {
        self.query.shape()[0]
    }

    /// Learned temperature τ (locality attention only).
    pub fn tau(&self) -> Option<Tensor> {
        self.log_tau.as_ref().map(Tensor::exp)
    }

    pub fn forward(&self, x: &Tensor, rope: Option<&RopeTables>) -> Result<Tensor> {
        match self.variant() {
            AttentionVariant::Standard => standard_attention(x, self, rope),
            AttentionVariant::Locality => lsa_attention(x, self, rope),
            AttentionVariant::L2 => l2_attention(x, self),
        }
    }

    /// Post-softmax attention weights `[.., heads, N, N]` of this layer's variant.
    pub fn probabilities(&self, x: &Tensor, rope: Option<&RopeTables>) -> Result<Tensor> {
        match self.variant() {
            AttentionVariant::Standard => {
                masked_scaled(&similarity(x, self, rope)?, &self.default_temperature(), false)?.softmax_last()
            }
            AttentionVariant::Locality => {
                check_lsa_tokens(x)?;
                masked_scaled(&similarity(x, self, rope)?, &self.learned_temperature()?, true)?.softmax_last()
            }
            AttentionVariant::L2 => l2_logits(x, self)?.softmax_last(),
        }
    }

    fn default_temperature(&self) -> Temperature {
        Temperature::Fixed((self.head_dim as f64).sqrt())
    }

    fn learned_temperature(&self) -> Result<Temperature> {
        self.tau()
            .map(Temperature::Learned)
            .ok_or_else(|| Error::Config("locality attention needs a learned temperature".into()))
    }
}

impl Parameters for AttentionWeights {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "query"), &mut self.query));
        if let Some(k) = &mut self.key {
            out.push((join(prefix, "key"), k));
        }
        out.push((join(prefix, "value"), &mut self.value));
        out.push((join(prefix, "out"), &mut self.out));
        if let Some(t) = &mut self.log_tau {
            out.push((join(prefix, "log_tau"), t));
        }
    }
}

fn check_input(x: &Tensor, w: &AttentionWeights) -> Result<()> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] != w.d_model() {
        return Err(Error::Config(format!(
            "attention input {s:?} does not have model width {}",
            w.d_model()
        )));
    }
    Ok(())
}

fn check_lsa_tokens(x: &Tensor) -> Result<()> {
    let n = x.shape()[x.ndim() - 2];
    if n < 2 {
        return Err(Error::Config(
            "locality attention masks the diagonal and needs at least 2 tokens".into(),
        ));
    }
    Ok(())
}

/// `[.., N, H·dh] → [.., H, N, dh]`
fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let s = t.shape();
    let r = s.len();
    let mut shape = s[..r - 1].to_vec();
    shape.extend([heads, s[r - 1] / heads]);
    let mut perm: Vec<usize> = (0..r - 2).collect();
    perm.extend([r - 1, r - 2, r]);
    t.reshape(&shape)?.permute(&perm)
}

/// `[.., H, N, dh] → [.., N, H·dh]`
fn merge_heads(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    let r = s.len();
    let mut perm: Vec<usize> = (0..r - 3).collect();
    perm.extend([r - 2, r - 3, r - 1]);
    let merged = t.permute(&perm)?;
    let mut shape = s[..r - 3].to_vec();
    shape.extend([s[r - 2], s[r - 3] * s[r - 1]]);
    merged.reshape(&shape)
}

fn queries_keys(x: &Tensor, w: &AttentionWeights, rope: Option<&RopeTables>) -> Result<(Tensor, Tensor)> {
    check_input(x, w)?;
    let key_w = w.key.as_ref().unwrap_or(&w.query);
    let mut q = split_heads(&x.matmul(&w.query)?, w.heads)?;
    let mut k = split_heads(&x.matmul(key_w)?, w.heads)?;
    if let Some(tables) = rope {
        q = q.rotate_pairs(tables)?;
        k = k.rotate_pairs(tables)?;
    }
    Ok((q, k))
}

/// Per-head query/key logits `R = Q·Kᵀ`, shape `[.., heads, N, N]`.
pub fn similarity(x: &Tensor, w: &AttentionWeights, rope: Option<&RopeTables>) -> Result<Tensor> {
    let (q, k) = queries_keys(x, w, rope)?;
    q.matmul_t(&k)
}

fn diagonal_mask(n: usize) -> Tensor {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = f64::NEG_INFINITY;
    }
    Tensor::new(m, &[n, n]).expect("square mask")
}

fn masked_scaled(r: &Tensor, temperature: &Temperature, mask_diagonal: bool) -> Result<Tensor> {
    let scaled = match temperature {
        Temperature::Fixed(t) => r.div_scalar(*t),
        Temperature::Learned(tau) => r.div(tau)?,
    };
    if mask_diagonal {
        let n = r.shape()[r.ndim() - 1];
        scaled.add(&diagonal_mask(n))
    } else {
        Ok(scaled)
    }
}

/// Attends with `probs [.., H, N, N]` over values and applies the output projection.
fn combine(probs: &Tensor, x: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    let v = split_heads(&x.matmul(&w.value)?, w.heads)?;
    merge_heads(&probs.matmul(&v)?)?.matmul(&w.out)
}

/// Dot-product attention with an explicit temperature and optional diagonal mask.
/// [`standard_attention`] and [`lsa_attention`] are the two canonical settings.
pub fn attention_with(
    x: &Tensor,
    w: &AttentionWeights,
    rope: Option<&RopeTables>,
    temperature: &Temperature,
    mask_diagonal: bool,
) -> Result<Tensor> {
    if mask_diagonal {
        check_lsa_tokens(x)?;
    }
    let probs = masked_scaled(&similarity(x, w, rope)?, temperature, mask_diagonal)?.softmax_last()?;
    combine(&probs, x, w)
}

/// `softmax(R / √d_k) · V`, heads concatenated, then the output projection.
pub fn standard_attention(x: &Tensor, w: &AttentionWeights, rope: Option<&RopeTables>) -> Result<Tensor> {
    attention_with(x, w, rope, &w.default_temperature(), false)
}

/// Locality self-attention: diagonal masked to `-inf`, logits divided by learned τ.
/// Fails with a configuration error for a single token.
pub fn lsa_attention(x: &Tensor, w: &AttentionWeights, rope: Option<&RopeTables>) -> Result<Tensor> {
    attention_with(x, w, rope, &w.learned_temperature()?, true)
}

fn l2_logits(x: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    let (q, k) = queries_keys(x, w, None)?;
    Ok(q.pairwise_sq_dist(&k)?.div_scalar((w.head_dim as f64).sqrt()).neg())
}

/// L2 attention: logits `-‖qᵢ - kⱼ‖² / √d_k`. With tied projections `qᵢ = kᵢ`.
pub fn l2_attention(x: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    let probs = l2_logits(x, w)?.softmax_last()?;
    combine(&probs, x, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    /// Scalar-loop reference: returns output `[N, d]` for one unbatched input.
    fn loop_attention(x: &Tensor, w: &AttentionWeights, variant: AttentionVariant, tau: f64) -> Vec<f64> {
        let s = x.shape();
        let (n, d) = (s[0], s[1]);
        let (h, dh) = (w.heads, w.head_dim);
        let proj = |m: &Tensor| -> Vec<f64> {
            let mut o = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    for c in 0..d {
                        o[i * d + j] += x.data()[i * d + c] * m.data()[c * d + j];
                    }
                }
            }
            o
        };
        let q = proj(&w.query);
        let k = proj(w.key.as_ref().unwrap_or(&w.query));
        let v = proj(&w.value);
        let mut concat = vec![0.0; n * d];
        for head in 0..h {
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for j in 0..n {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        let (qi, kj) = (q[i * d + head * dh + c], k[j * d + head * dh + c]);
                        acc += match variant {
                            AttentionVariant::L2 => (qi - kj) * (qi - kj),
                            _ => qi * kj,
                        };
                    }
                    logits[j] = match variant {
                        AttentionVariant::Standard => acc / (dh as f64).sqrt(),
                        AttentionVariant::Locality => {
                            if i == j {
                                f64::NEG_INFINITY
                            } else {
                                acc / tau
                            }
                        }
                        AttentionVariant::L2 => -acc / (dh as f64).sqrt(),
                    };
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    concat[i * d + head * dh + c] = (0..n).map(|j| e[j] / z * v[j * d + head * dh + c]).sum();
                }
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                for c in 0..d {
                    out[i * d + j] += concat[i * d + c] * w.out.data()[c * d + j];
                }
            }
        }
        out
    }

    fn weights(variant: AttentionVariant, seed: u64) -> AttentionWeights {
        let mut rng = Rng::new(seed);
        let mut w = AttentionWeights::new(8, 2, variant, &mut rng).unwrap();
        // larger weights so the softmax is far from uniform
        for t in [&mut w.query, &mut w.value, &mut w.out] {
            *t = Tensor::randn(t.shape(), 0.7, &mut rng);
        }
        if let Some(k) = &mut w.key {
            *k = Tensor::randn(k.shape(), 0.7, &mut rng);
        }
        w
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_input_zero_similarity() {
        let w = weights(AttentionVariant::Standard, 1);
        let r = similarity(&Tensor::zeros(&[3, 8]), &w, None).unwrap();
        assert_eq!(r.shape(), &[2, 3, 3]);
        assert!(r.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn similarity_matches_triple_loop() {
        let w = weights(AttentionVariant::Standard, 2);
        let mut rng = Rng::new(20);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let r = similarity(&x, &w, None).unwrap();
        let (q, k) = (x.matmul(&w.query).unwrap(), x.matmul(w.key.as_ref().unwrap()).unwrap());
        for h in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let e: f64 = (0..4).map(|c| q.data()[i * 8 + h * 4 + c] * k.data()[j * 8 + h * 4 + c]).sum();
                    assert!((r.data()[(h * 3 + i) * 3 + j] - e).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_token_returns_projected_value() {
        let w = weights(AttentionVariant::Standard, 3);
        let mut rng = Rng::new(21);
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let y = standard_attention(&x, &w, None).unwrap();
        let expect = x.matmul(&w.value).unwrap().matmul(&w.out).unwrap();
        assert_close(y.data(), expect.data(), 1e-14);
        let lsa = weights(AttentionVariant::Locality, 3);
        assert!(matches!(lsa_attention(&x, &lsa, None), Err(Error::Config(_))));
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let w = weights(AttentionVariant::Standard, 4);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = Tensor::new(row.repeat(4), &[4, 8]).unwrap();
        let y = standard_attention(&x, &w, None).unwrap();
        for t in y.data().chunks(8).skip(1) {
            assert_close(t, &y.data()[..8], 1e-14);
        }
    }

    #[test]
    fn variants_match_loop_oracle() {
        let mut rng = Rng::new(22);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let w = weights(AttentionVariant::Standard, 5);
        assert_close(
            standard_attention(&x, &w, None).unwrap().data(),
            &loop_attention(&x, &w, AttentionVariant::Standard, 0.0),
            1e-9,
        );
        let x3 = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let mut w = weights(AttentionVariant::Locality, 6);
        w.log_tau = Some(Tensor::full(&[1], 0.9f64.ln()));
        assert_close(
            lsa_attention(&x3, &w, None).unwrap().data(),
            &loop_attention(&x3, &w, AttentionVariant::Locality, w.tau().unwrap().data()[0]),
            1e-9,
        );
        let w = weights(AttentionVariant::L2, 7);
        assert!(w.key.is_none());
        assert_close(
            l2_attention(&x3, &w).unwrap().data(),
            &loop_attention(&x3, &w, AttentionVariant::L2, 0.0),
            1e-9,
        );
    }

    #[test]
    fn lsa_diagonal_is_exactly_zero_and_tau_init() {
        let mut rng = Rng::new(23);
        let w = AttentionWeights::new(256, 4, AttentionVariant::Locality, &mut rng).unwrap();
        assert_eq!(w.head_dim, 64);
        assert!((w.tau().unwrap().data()[0] - 8.0).abs() < 1e-12);
        let x = Tensor::randn(&[5, 256], 1.0, &mut rng);
        let p = w.probabilities(&x, None).unwrap();
        for h in 0..4 {
            for i in 0..5 {
                assert_eq!(p.data()[(h * 5 + i) * 5 + i], 0.0);
            }
        }
    }

    #[test]
    fn l2_logits_are_non_positive_and_uniform_for_equal_rows() {
        let w = weights(AttentionVariant::L2, 8);
        let mut rng = Rng::new(24);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        assert!(l2_logits(&x, &w).unwrap().data().iter().all(|v| *v <= 0.0));
        let same = Tensor::new([0.5; 8].repeat(3), &[3, 8]).unwrap();
        let p = w.probabilities(&same, None).unwrap();
        assert_close(p.data(), &[1.0 / 3.0; 18], 1e-15);
    }

    #[test]
    fn unmasked_lsa_at_sqrt_dk_is_bitwise_standard() {
        let w = weights(AttentionVariant::Standard, 9);
        let mut rng = Rng::new(25);
        let x = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
        let tau = Tensor::scalar((w.head_dim as f64).sqrt());
        let a = attention_with(&x, &w, None, &Temperature::Learned(tau), false).unwrap();
        let b = standard_attention(&x, &w, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gradients_through_each_variant() {
        let mut rng = Rng::new(26);
        let x = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        for variant in [AttentionVariant::Standard, AttentionVariant::Locality, AttentionVariant::L2] {
            let w = weights(variant, 10);
            let mut params = vec![x.clone()];
            params.extend(crate::layers::ParametersExt::params(&w));
            let err = grad_check(
                |p| {
                    let w2 = crate::layers::ParametersExt::with_params(&w, &p[1..])?;
                    Ok(w2.forward(&p[0], None)?.mul(&probe)?.sum())
                },
                &params,
                1e-5,
                60,
                &mut rng,
            )
            .unwrap();
            assert!(err < 1e-6, "{variant:?}: {err}");
        }
    }
}
