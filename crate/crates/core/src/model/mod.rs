//! The reconstruction generator and the adversarial discriminator.

mod checkpoint;
mod discriminator;
mod generator;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, ModelKind, NamedArray, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use discriminator::DiscriminatorModel;
pub use generator::GeneratorModel;

use crate::attention::{AttentionVariant, AttentionWeights};
use crate::error::{Error, Result};
use crate::layers::{join, LayerNorm, Mlp, Parameters};
use crate::rng::Rng;
use crate::tensor::{RopeTables, Tensor};
use crate::vision::{overlapping_count, PatchGrid};

/// Architecture hyperparameters and the four enhancement switches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub use_spt: bool,
    pub use_rope: bool,
    pub use_lsa: bool,
    pub use_discriminator: bool,
    pub disc_patch: usize,
    pub disc_stride: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            channels: 1,
            patch: 8,
            d_model: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            use_spt: false,
            use_rope: false,
            use_lsa: false,
            use_discriminator: false,
            disc_patch: 8,
            disc_stride: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.d_model == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("channels, d_model, heads and mlp_ratio must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.use_rope && !self.head_dim().is_multiple_of(4) {
            return fail(format!(
                "rotary embeddings need head_dim divisible by 4, got {}",
                self.head_dim()
            ));
        }
        let grid = self.grid()?;
        if self.use_lsa && grid.n_tokens() < 2 {
            return fail("locality attention needs at least 2 patches".into());
        }
        if self.disc_stride > self.disc_patch {
            return fail(format!(
                "disc_stride {} exceeds disc_patch {}",
                self.disc_stride, self.disc_patch
            ));
        }
        if self.use_discriminator {
            overlapping_count(self.image_h, self.disc_patch, self.disc_stride)?;
            overlapping_count(self.image_w, self.disc_patch, self.disc_stride)?;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_h, self.image_w, self.patch)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_h, self.image_w]
    }

    /// Raw token length fed to the tokenizer projection.
    pub fn raw_token_len(&self) -> usize {
        let base = self.channels * self.patch * self.patch;
        if self.use_spt {
            5 * base
        } else {
            base
        }
    }

    /// Number of tokens the discriminator sees, CLS token excluded.
    pub fn disc_tokens(&self) -> Result<usize> {
        Ok(overlapping_count(self.image_h, self.disc_patch, self.disc_stride)?
            * overlapping_count(self.image_w, self.disc_patch, self.disc_stride)?)
    }

    /// Closed-form learnable parameter count of the generator.
    ///
    /// tokenizer `r·d + d` (+ `2r` layer norm with SPT), position table `N·d` unless
    /// RoPE, per block `4d + 4d² + 2·m·d² + m·d + d` (+1 for τ with LSA), final norm
    /// `2d`, head `d·q + q`; `r` raw token length, `q = c·p²`, `m` the MLP ratio.
    pub fn generator_param_count(&self) -> usize {
        let d = self.d_model;
        let r = self.raw_token_len();
        let q = self.channels * self.patch * self.patch;
        let n = (self.image_h / self.patch) * (self.image_w / self.patch);
        let hidden = self.mlp_ratio * d;
        let tokenizer = r * d + d + if self.use_spt { 2 * r } else { 0 };
        let pos = if self.use_rope { 0 } else { n * d };
        let block = 4 * d + 4 * d * d + 2 * hidden * d + hidden + d + usize::from(self.use_lsa);
        tokenizer + pos + self.depth * block + 2 * d + d * q + q
    }

    /// Closed-form learnable parameter count of the discriminator.
    pub fn discriminator_param_count(&self) -> Result<usize> {
        let d = self.d_model;
        let r = self.channels * self.disc_patch * self.disc_patch;
        let t = self.disc_tokens()?;
        let hidden = self.mlp_ratio * d;
        let block = 4 * d + 3 * d * d + 2 * hidden * d + hidden + d;
        Ok(r * d + d + d + (t + 1) * d + self.depth * block + 2 * d + d + 1)
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionWeights,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(d_model: usize, heads: usize, mlp_ratio: usize, variant: AttentionVariant, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(d_model),
            attn: AttentionWeights::new(d_model, heads, variant, rng)?,
            norm2: LayerNorm::new(d_model),
            mlp: Mlp::new(d_model, mlp_ratio * d_model, rng),
        })
    }

    pub fn forward(&self, x: &Tensor, rope: Option<&RopeTables>) -> Result<Tensor> {
        let x = x.add(&self.attn.forward(&self.norm1.forward(x)?, rope)?)?;
        x.add(&self.mlp.forward(&self.norm2.forward(&x)?)?)
    }
}

impl Parameters for EncoderBlock {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.attn.visit_mut(&join(prefix, "attn"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
        self.mlp.visit_mut(&join(prefix, "mlp"), out);
    }
}

/// Adds a leading batch axis to a single `[c, h, w]` image.
pub(crate) fn as_batch(img: &Tensor, expected: [usize; 3]) -> Result<(Tensor, bool)> {
    match img.shape() {
        s if s == expected => Ok((img.reshape(&[1, expected[0], expected[1], expected[2]])?, true)),
        [_, c, h, w] if [*c, *h, *w] == expected => Ok((img.clone(), false)),
        s => Err(Error::Config(format!(
            "image shape {s:?} does not match model input {expected:?}"
        ))),
    }
}

pub(crate) fn ensure_finite(t: &Tensor, what: impl FnOnce() -> String) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}
