use super::{as_batch, ensure_finite, EncoderBlock, ModelConfig};
use crate::attention::AttentionVariant;
use crate::embeddings::{add_absolute, PosEmbedTable, RopeParams, ROPE_BASE};
use crate::error::Result;
use crate::layers::{join, LayerNorm, Linear, Parameters};
use crate::rng::Rng;
use crate::tensor::{RopeTables, Tensor};
use crate::vision::{depatchify, patchify, spt_tokenize, PatchGrid};

/// ViT encoder with a per-patch reconstruction head instead of a class head.
///
/// Forward: tokenize (linear patch embedding, or SPT) → add the absolute position
/// table unless RoPE is on → `depth` pre-norm blocks → final layer norm → linear
/// head to `c·p²` pixels per token → fold patches back → sigmoid.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub config: ModelConfig,
    pub grid: PatchGrid,
    /// Layer norm over raw SPT tokens; absent for the vanilla tokenizer.
    pub token_norm: Option<LayerNorm>,
    pub token_proj: Linear,
    pub pos: Option<PosEmbedTable>,
    pub rope: Option<RopeParams>,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl GeneratorModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let grid = config.grid()?;
        let d = config.d_model;
        let raw = config.raw_token_len();
        let variant = if config.use_lsa {
            AttentionVariant::Locality
        } else {
            AttentionVariant::Standard
        };
        let token_norm = config.use_spt.then(|| LayerNorm::new(raw));
        let token_proj = Linear::new(raw, d, true, &mut rng);
        let pos = (!config.use_rope).then(|| PosEmbedTable::new(grid.n_tokens(), d, &mut rng));
        let rope = config
            .use_rope
            .then(|| RopeParams::new(config.head_dim(), ROPE_BASE))
            .transpose()?;
        let blocks = (0..config.depth)
            .map(|_| EncoderBlock::new(d, config.heads, config.mlp_ratio, variant, &mut rng))
            .collect::<Result<_>>()?;
        let head = Linear::new(d, grid.token_len(config.channels), true, &mut rng);
        Ok(Self {
            config: config.clone(),
            grid,
            token_norm,
            token_proj,
            pos,
            rope,
            blocks,
            final_norm: LayerNorm::new(d),
            head,
        })
    }

    /// Token embeddings `[B, N, d_model]` for a batch `[B, c, h, w]`.
    pub fn tokenize(&self, batch: &Tensor) -> Result<Tensor> {
        match &self.token_norm {
            Some(norm) => spt_tokenize(batch, &self.grid, norm, &self.token_proj),
            None => self.token_proj.forward(&patchify(batch, &self.grid)?),
        }
    }

    fn rope_tables(&self) -> Option<RopeTables> {
        self.rope.as_ref().map(|r| r.tables(&self.grid.positions()))
    }

    /// Maps `[c, h, w]` or `[B, c, h, w]` in `[0, 1]` to a reconstruction of the same shape.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (batch, single) = as_batch(img, self.config.image_shape())?;
        let mut x = self.tokenize(&batch)?;
        ensure_finite(&x, || "generator tokenizer".into())?;
        if let Some(pos) = &self.pos {
            x = add_absolute(&x, pos)?;
        }
        let rope = self.rope_tables();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, rope.as_ref())?;
            ensure_finite(&x, || format!("generator block {i}"))?;
        }
        let pixels = self.head.forward(&self.final_norm.forward(&x)?)?;
        let out = depatchify(&pixels, &self.grid, self.config.channels)?.sigmoid();
        ensure_finite(&out, || "generator head".into())?;
        if single {
            out.reshape(&self.config.image_shape())
        } else {
            Ok(out)
        }
    }
}

impl Parameters for GeneratorModel {
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if let Some(n) = &mut self.token_norm {
            n.visit_mut(&join(prefix, "token_norm"), out);
        }
        self.token_proj.visit_mut(&join(prefix, "token_proj"), out);
        if let Some(p) = &mut self.pos {
            p.visit_mut(&join(prefix, "pos"), out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), out);
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParametersExt;

    fn tiny(spt: bool, rope: bool, lsa: bool) -> ModelConfig {
        ModelConfig {
            image_h: 16,
            image_w: 16,
            patch: 4,
            d_model: 16,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            use_spt: spt,
            use_rope: rope,
            use_lsa: lsa,
            ..Default::default()
        }
    }

    #[test]
    fn output_shape_and_range_at_64px() {
        let model = GeneratorModel::new(&ModelConfig::default()).unwrap();
        let mut rng = Rng::new(1);
        let img = Tensor::new((0..4096).map(|_| rng.uniform()).collect(), &[1, 64, 64]).unwrap();
        let out = model.forward(&img).unwrap();
        assert_eq!(out.shape(), &[1, 64, 64]);
        assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn param_count_matches_formula_for_every_switch_combination() {
        for mask in 0..8u8 {
            let cfg = tiny(mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
            let m = GeneratorModel::new(&cfg).unwrap();
            assert_eq!(m.param_count(), cfg.generator_param_count(), "{cfg:?}");
        }
    }

    #[test]
    fn vanilla_has_no_enhancement_machinery() {
        let m = GeneratorModel::new(&tiny(false, false, false)).unwrap();
        assert!(m.token_norm.is_none());
        assert!(m.rope.is_none());
        assert!(m.pos.is_some());
        assert_eq!(m.token_proj.d_in(), 16);
        assert!(m.blocks.iter().all(|b| b.attn.log_tau.is_none()));
        assert!(m.named_params().iter().all(|(n, _)| !n.contains("log_tau")));
    }

    #[test]
    fn rope_replaces_absolute_table() {
        let m = GeneratorModel::new(&tiny(false, true, false)).unwrap();
        assert!(m.pos.is_none() && m.rope.is_some());
    }

    #[test]
    fn depth_zero_is_head_of_tokens() {
        let cfg = ModelConfig { depth: 0, ..tiny(false, false, false) };
        let m = GeneratorModel::new(&cfg).unwrap();
        let mut rng = Rng::new(2);
        let img = Tensor::new((0..256).map(|_| rng.uniform()).collect(), &[1, 16, 16]).unwrap();
        let out = m.forward(&img).unwrap();

        // manual composition
        let tokens = patchify(&img, &m.grid).unwrap();
        let x = tokens.matmul(&m.token_proj.weight).unwrap().add(m.token_proj.bias.as_ref().unwrap()).unwrap();
        let x = x.add(&m.pos.as_ref().unwrap().table).unwrap();
        let x = x.layer_norm(&m.final_norm.gain, &m.final_norm.bias, 1e-5).unwrap();
        let px = x.matmul(&m.head.weight).unwrap().add(m.head.bias.as_ref().unwrap()).unwrap();
        let expect = depatchify(&px, &m.grid, 1).unwrap().sigmoid();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn batch_and_single_agree() {
        let m = GeneratorModel::new(&tiny(true, true, true)).unwrap();
        let mut rng = Rng::new(3);
        let a = Tensor::new((0..256).map(|_| rng.uniform()).collect(), &[1, 16, 16]).unwrap();
        let b = Tensor::new((0..256).map(|_| rng.uniform()).collect(), &[1, 16, 16]).unwrap();
        let both = Tensor::concat(&[a.reshape(&[1, 1, 16, 16]).unwrap(), b.reshape(&[1, 1, 16, 16]).unwrap()], 0).unwrap();
        let ob = m.forward(&both).unwrap();
        let oa = m.forward(&a).unwrap();
        for (x, y) in ob.data()[..256].iter().zip(oa.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(m.forward(&Tensor::zeros(&[1, 8, 8])).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(true, false, true);
        let a = GeneratorModel::new(&cfg).unwrap();
        let b = GeneratorModel::new(&cfg).unwrap();
        let img = Tensor::full(&[1, 16, 16], 0.3);
        assert_eq!(a.forward(&img).unwrap().data(), b.forward(&img).unwrap().data());
    }
}
