use candle_core::{Tensor, D};

use super::{MaskPrediction, PromptBundle};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ConvTranspose2d, LayerNorm2d, Mlp};
use crate::registry::{Init, Param, ParamBuilder};

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    iou_token: Param,
    mask_tokens: Param,
    transformer: super::TwoWayTransformer,
    upscale1: ConvTranspose2d,
    upscale_norm: LayerNorm2d,
    upscale2: ConvTranspose2d,
    hypernetworks: Vec<Mlp>,
    iou_head: Mlp,
    grid: usize,
    input_size: usize,
    dim: usize,
}

impl MaskDecoder {
    pub fn new(mut pb: ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let emb = Init::TruncNormal { std: 1.0 };
        let fan_in = |n: usize| Init::FanIn { fan_in: n, gain: 1.0 };
        let iou_token = pb.pp("iou_token").get("weight", &[1, d], emb)?;
        let mask_tokens = pb.pp("mask_tokens").get("weight", &[cfg.mask_tokens(), d], emb)?;
        let transformer = super::TwoWayTransformer::new(
            pb.pp("transformer"),
            cfg.mask_decoder_depth,
            d,
            cfg.decoder_heads,
            cfg.decoder_mlp_dim,
        )?;
        let mut up = pb.pp("output_upscaling");
        let upscale1 = ConvTranspose2d::new(up.pp(0), d, d / 4, 2, fan_in(d))?;
        let upscale_norm = LayerNorm2d::new(up.pp(1), d / 4)?;
        let upscale2 = ConvTranspose2d::new(up.pp(3), d / 4, d / 8, 2, fan_in(d / 4))?;
        let hypernetworks = (0..cfg.mask_tokens())
            .map(|i| {
                Mlp::new(
                    pb.pp("output_hypernetworks_mlps").pp(i),
                    &[d, d, d, d / 8],
                    Activation::Relu,
                    fan_in,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let iou_head = Mlp::new(
            pb.pp("iou_prediction_head"),
            &[d, d, d, cfg.mask_tokens()],
            Activation::Relu,
            fan_in,
        )?;
        Ok(Self {
            iou_token,
            mask_tokens,
            transformer,
            upscale1,
            upscale_norm,
            upscale2,
            hypernetworks,
            iou_head,
            grid: cfg.grid_side(),
            input_size: cfg.input_size,
            dim: d,
        })
    }

    /// Frozen copy of the `(5, d)` output tokens (quality token first).
    pub fn output_tokens(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[self.iou_token.value(), self.mask_tokens.value()], 0)?)
    }

    fn output_tokens_tracked(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[self.iou_token.tensor(), self.mask_tokens.tensor()], 0)?)
    }

    /// Single-mask decoding (first mask token).
    ///
    /// `image_embedding`: `(b, g, g, d)`; `image_pe`: `(1, g, g, d)`.
    pub fn forward(&self, image_embedding: &Tensor, image_pe: &Tensor, prompts: &PromptBundle) -> Result<MaskPrediction> {
        let (b, h, w, d) = image_embedding.dims4()?;
        if (h, w, d) != (self.grid, self.grid, self.dim) {
            return Err(Error::shape("mask decoder image embedding", (self.grid, self.grid, self.dim), (h, w, d)));
        }
        if prompts.dense.dims() != image_embedding.dims() {
            return Err(Error::shape("dense prompt", image_embedding.dims(), prompts.dense.dims()));
        }
        let (sb, n_sparse, sd) = prompts.sparse.dims3()?;
        if sb != b || sd != d {
            return Err(Error::shape("sparse prompt", (b, "n", d), (sb, n_sparse, sd)));
        }
        let out_tokens = self.output_tokens_tracked()?.unsqueeze(0)?.broadcast_as((b, 5, d))?;
        let tokens = if n_sparse == 0 {
            out_tokens.contiguous()?
        } else {
            Tensor::cat(&[&out_tokens.contiguous()?, &prompts.sparse], 1)?
        };
        let src = (image_embedding + &prompts.dense)?.reshape((b, h * w, d))?;
        let pos = image_pe.reshape((1, h * w, d))?;
        let (hs, src) = self.transformer.forward(&src, &pos, &tokens)?;

        let iou_out = hs.narrow(1, 0, 1)?.squeeze(1)?;
        let mask_out = hs.narrow(1, 1, 1)?.squeeze(1)?;

        let src = src.transpose(1, 2)?.contiguous()?.reshape((b, d, h, w))?;
        let up = self.upscale1.forward(&src)?;
        let up = nn::gelu(&self.upscale_norm.forward(&up)?)?;
        let up = nn::gelu(&self.upscale2.forward(&up)?)?;
        let (_, c, uh, uw) = up.dims4()?;

        let hyper = self.hypernetworks[0].forward(&mask_out)?; // (b, d/8)
        let low_res = hyper
            .unsqueeze(1)?
            .matmul(&up.reshape((b, c, uh * uw))?)?
            .reshape((b, 1, uh, uw))?;
        let logits = nn::resize_bilinear(&low_res, self.input_size, self.input_size)?;
        let quality = self.iou_head.forward(&iou_out)?.narrow(D::Minus1, 0, 1)?.squeeze(1)?;
        Ok(MaskPrediction {
            logits: logits.squeeze(1)?,
            low_res: low_res.squeeze(1)?,
            quality,
        })
    }
}
