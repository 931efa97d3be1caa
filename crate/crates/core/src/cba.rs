//! Cross-branch attention: ViT tokens query CNN-branch features, with a
//! learnable relative-position table added after the softmax. Also the
//! final fusion of the two branches into the image embedding.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{self, Linear};
use crate::registry::{Init, Param, ParamBuilder};

#[derive(Clone, Debug)]
pub struct CrossBranchAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    /// `(hw, hw)`, shared by all heads, zero at init.
    rel_pos: Param,
    heads: usize,
    head_dim: usize,
    tokens: usize,
}

impl CrossBranchAttention {
    pub fn new(mut pb: ParamBuilder, dim: usize, head_dim: usize, heads: usize, tokens: usize) -> Result<Self> {
        let init = Init::TruncNormal { std: 0.02 };
        let inner = heads * head_dim;
        Ok(Self {
            q: Linear::new(pb.pp("q"), dim, inner, false, init)?,
            k: Linear::new(pb.pp("k"), dim, inner, false, init)?,
            v: Linear::new(pb.pp("v"), dim, inner, false, init)?,
            out: Linear::new(pb.pp("out"), inner, dim, true, init)?,
            rel_pos: pb.get("rel_pos", &[tokens, tokens], Init::Zeros)?,
            heads,
            head_dim,
            tokens,
        })
    }

    pub fn q(&self) -> &Linear {
        &self.q
    }
    pub fn k(&self) -> &Linear {
        &self.k
    }
    pub fn v(&self) -> &Linear {
        &self.v
    }
    pub fn out(&self) -> &Linear {
        &self.out
    }
    pub fn rel_pos(&self) -> &Param {
        &self.rel_pos
    }
    pub fn heads(&self) -> usize {
        self.heads
    }

    fn check(&self, f_v: &Tensor, f_c: &Tensor) -> Result<()> {
        let (bv, nv, _) = f_v.dims3()?;
        let (bc, nc, _) = f_c.dims3()?;
        if bv != bc || nv != nc {
            return Err(Error::shape("CBA token counts", (bv, nv), (bc, nc)));
        }
        if nv != self.tokens {
            return Err(Error::shape("CBA relative position table", self.tokens, nv));
        }
        Ok(())
    }

    /// Softmax part of the attention weights, `(b, heads, hw, hw)`.
    pub fn softmax_weights(&self, f_v: &Tensor, f_c: &Tensor) -> Result<Tensor> {
        self.check(f_v, f_c)?;
        let q = nn::split_heads(&self.q.forward(f_v)?, self.heads)?;
        let k = nn::split_heads(&self.k.forward(f_c)?, self.heads)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (self.head_dim as f64).sqrt())?;
        nn::softmax_last(&scores)
    }

    /// `(softmax(F_v E_q (F_c E_k)^T / sqrt(d_m)) + R) (F_c E_v)` per head,
    /// heads concatenated and projected back to `d`. Inputs are `(b, hw, d)`.
    pub fn forward(&self, f_v: &Tensor, f_c: &Tensor) -> Result<Tensor> {
        let weights = self
            .softmax_weights(f_v, f_c)?
            .broadcast_add(&self.rel_pos.tensor())?;
        let v = nn::split_heads(&self.v.forward(f_c)?, self.heads)?;
        let heads = weights.matmul(&v)?;
        self.out.forward(&nn::merge_heads(&heads)?)
    }
}

/// Combine the two branch outputs into the image embedding: elementwise sum
/// of `(b, g, g, d)` grids.
pub fn fuse_branches(vit_out: &Tensor, cnn_out: &Tensor) -> Result<Tensor> {
    if vit_out.dims() != cnn_out.dims() {
        return Err(Error::shape("branch fusion", vit_out.dims(), cnn_out.dims()));
    }
    Ok((vit_out + cnn_out)?)
}
