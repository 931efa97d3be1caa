use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{self, Activation, LayerNorm, Linear, Mlp};
use crate::registry::{Init, ParamBuilder};

/// SAM decoder attention with separate q/k/v projections and an optional
/// internal downsampling of the channel width.
#[derive(Clone, Debug)]
pub struct SamAttention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    heads: usize,
}

impl SamAttention {
    pub fn new(mut pb: ParamBuilder, dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        let inner = dim / downsample;
        let init_in = Init::FanIn { fan_in: dim, gain: 1.0 };
        let init_out = Init::FanIn { fan_in: inner, gain: 1.0 };
        Ok(Self {
            q_proj: Linear::new(pb.pp("q_proj"), dim, inner, true, init_in)?,
            k_proj: Linear::new(pb.pp("k_proj"), dim, inner, true, init_in)?,
            v_proj: Linear::new(pb.pp("v_proj"), dim, inner, true, init_in)?,
            out_proj: Linear::new(pb.pp("out_proj"), inner, dim, true, init_out)?,
            heads,
        })
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = nn::split_heads(&self.q_proj.forward(q)?, self.heads)?;
        let k = nn::split_heads(&self.k_proj.forward(k)?, self.heads)?;
        let v = nn::split_heads(&self.v_proj.forward(v)?, self.heads)?;
        let out = nn::scaled_attention(&q, &k, &v)?;
        self.out_proj.forward(&nn::merge_heads(&out)?)
    }
}

#[derive(Clone, Debug)]
struct TwoWayAttentionBlock {
    self_attn: SamAttention,
    norm1: LayerNorm,
    cross_token_to_image: SamAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    norm4: LayerNorm,
    cross_image_to_token: SamAttention,
    skip_first_layer_pe: bool,
}

impl TwoWayAttentionBlock {
    fn new(mut pb: ParamBuilder, dim: usize, heads: usize, mlp_dim: usize, skip_first_layer_pe: bool) -> Result<Self> {
        let mlp = Mlp::from_layers(
            vec![
                Linear::new(pb.pp("mlp").pp("lin1"), dim, mlp_dim, true, Init::FanIn { fan_in: dim, gain: 1.0 })?,
                Linear::new(pb.pp("mlp").pp("lin2"), mlp_dim, dim, true, Init::FanIn { fan_in: mlp_dim, gain: 1.0 })?,
            ],
            Activation::Relu,
        );
        Ok(Self {
            self_attn: SamAttention::new(pb.pp("self_attn"), dim, heads, 1)?,
            norm1: LayerNorm::new(pb.pp("norm1"), dim)?,
            cross_token_to_image: SamAttention::new(pb.pp("cross_attn_token_to_image"), dim, heads, 2)?,
            norm2: LayerNorm::new(pb.pp("norm2"), dim)?,
            mlp,
            norm3: LayerNorm::new(pb.pp("norm3"), dim)?,
            norm4: LayerNorm::new(pb.pp("norm4"), dim)?,
            cross_image_to_token: SamAttention::new(pb.pp("cross_attn_image_to_token"), dim, heads, 2)?,
            skip_first_layer_pe,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_layer_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let attn = self.cross_token_to_image.forward(&q, &k, keys)?;
        let queries = self.norm2.forward(&(queries + attn)?)?;

        let queries = self.norm3.forward(&(&queries + self.mlp.forward(&queries)?)?)?;

        let q = (&queries + query_pe)?;
        let attn = self.cross_image_to_token.forward(&k, &q, &queries)?;
        let keys = self.norm4.forward(&(keys + attn)?)?;
        Ok((queries, keys))
    }
}

/// Alternating token↔image attention followed by a final token→image step.
#[derive(Clone, Debug)]
pub struct TwoWayTransformer {
    layers: Vec<TwoWayAttentionBlock>,
    final_attn: SamAttention,
    norm_final: LayerNorm,
}

impl TwoWayTransformer {
    pub fn new(mut pb: ParamBuilder, depth: usize, dim: usize, heads: usize, mlp_dim: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| TwoWayAttentionBlock::new(pb.pp("layers").pp(i), dim, heads, mlp_dim, i == 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            final_attn: SamAttention::new(pb.pp("final_attn_token_to_image"), dim, heads, 2)?,
            norm_final: LayerNorm::new(pb.pp("norm_final_attn"), dim)?,
        })
    }

    /// `image`: `(b, hw, d)`, `image_pe`: `(1 or b, hw, d)`, `tokens`: `(b, t, d)`.
    /// Returns updated `(tokens, image)`.
    pub fn forward(&self, image: &Tensor, image_pe: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut queries = tokens.clone();
        let mut keys = image.clone();
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, tokens, image_pe)?;
        }
        let q = (&queries + tokens)?;
        let k = keys.broadcast_add(image_pe)?;
        let attn = self.final_attn.forward(&q, &k, &keys)?;
        let queries = self.norm_final.forward(&(queries + attn)?)?;
        Ok((queries, keys))
    }
}
