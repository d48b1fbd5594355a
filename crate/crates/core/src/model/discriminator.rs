use super::{as_batch, ensure_finite, EncoderBlock, ModelConfig};
use crate::attention::AttentionVariant;
use crate::embeddings::{add_absolute, PosEmbedTable};
use crate::error::{Error, Result};
use crate::layers::{join, param, LayerNorm, Linear, Parameters, INIT_STD};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use crate::vision::patchify_overlapping;

/// ViT real/fake classifier: overlapping patches → linear embedding → CLS token
/// prepended → absolute positions → L2-attention blocks → logit from the CLS token.
#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    pub config: ModelConfig,
    pub embed: Linear,
    /// `[1, d_model]`
    pub cls: Tensor,
    pub pos: PosEmbedTable,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

/// Stream tag so discriminator weights never share draws with the generator.
const DISC_STREAM: u64 = 0xD15C;

impl DiscriminatorModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(derive_seed(config.seed, &[DISC_STREAM]));
        let d = config.d_model;
        let tokens = config.disc_tokens()?;
        let raw = config.channels * config.disc_patch * config.disc_patch;
        let embed = Linear::new(raw, d, true, &mut rng);
        let cls = param(&[1, d], INIT_STD, &mut rng);
        let pos = PosEmbedTable::new(tokens + 1, d, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| EncoderBlock::new(d, config.heads, config.mlp_ratio, AttentionVariant::L2, &mut rng))
            .collect::<Result<_>>()?;
        let head = Linear::new(d, 1, true, &mut rng);
        Ok(Self {
            config: config.clone(),
            embed,
            cls,
            pos,
            blocks,
            final_norm: LayerNorm::new(d),
            head,
        })
    }

    /// Logits `[B]` for a batch `[B, c, h, w]` (or `[1]` for a single image).
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (batch, _) = as_batch(img, self.config.image_shape())?;
        let b = batch.shape()[0];
        let d = self.config.d_model;
        let patches = patchify_overlapping(&batch, self.config.disc_patch, self.config.disc_stride)?;
        let tokens = self.embed.forward(&patches)?;
        let cls = self.cls.expand_leading(&[b])?;
        let mut x = add_absolute(&Tensor::concat(&[cls, tokens], 1)?, &self.pos)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, None)?;
            ensure_finite(&x, || format!("discriminator block {i}"))?;
        }
        let cls_out = self.final_norm.forward(&x)?.narrow(1, 0, 1)?.reshape(&[b, d])?;
        self.head.forward(&cls_out)?.reshape(&[b])
    }

    /// Single-image convenience: one real-valued logit.
    pub fn logit(&self, img: &Tensor) -> Result<f64> {
        if img.ndim() != 3 {
            return Err(Error::Config(format!("logit() takes one [c,h,w] image, got {:?}", img.shape())));
        }
        self.forward(img)?.item()
    }
}

impl Parameters for DiscriminatorModel {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.embed.visit_mut(&join(prefix, "embed"), out);
        out.push((join(prefix, "cls"), &mut self.cls));
        self.pos.visit_mut(&join(prefix, "pos"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), out);
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}
