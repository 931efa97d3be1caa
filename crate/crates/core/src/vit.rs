//! Adapted ViT image encoder.
//!
//! Overlapped patch embedding (SAM kernel, half stride), a position adapter
//! that resizes SAM's positional embedding to the shorter token grid, a
//! feature adapter right after the embedding, and a stack of windowed/global
//! transformer blocks. Global blocks carry cross-branch attention and a
//! parallel feature adapter on the FFN residual.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;

use crate::cba::CrossBranchAttention;
use crate::config::{ModelConfig, BACKBONE_IN_CHANS};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Conv2d, LayerNorm, LayerNorm2d, Linear, Mlp};
use crate::registry::{Component, Init, ParamBuilder};

/// Overlapped patch embedding: SAM's patch kernel at half its stride.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    proj: Conv2d,
    input_size: usize,
}

impl PatchEmbedding {
    pub fn new(mut pb: ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let fan_in = BACKBONE_IN_CHANS * cfg.patch_kernel * cfg.patch_kernel;
        let proj = Conv2d::new(
            pb.pp("proj"),
            BACKBONE_IN_CHANS,
            cfg.embed_dim,
            cfg.patch_kernel,
            cfg.patch_stride,
            cfg.patch_padding(),
            true,
            Init::FanIn { fan_in, gain: 1.0 },
        )?;
        Ok(Self {
            proj,
            input_size: cfg.input_size,
        })
    }

    pub fn proj(&self) -> &Conv2d {
        &self.proj
    }

    /// `(b, 1, H, W)` grayscale in `[0, 1]` → `(b, g, g, d)` tokens.
    /// The single channel is replicated to the three channels the SAM-layout
    /// kernel expects.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = image.dims4()?;
        if c != 1 || h != self.input_size || w != self.input_size {
            return Err(Error::shape(
                "patch embedding input",
                (b, 1, self.input_size, self.input_size),
                (b, c, h, w),
            ));
        }
        let rgb = image.broadcast_as((b, BACKBONE_IN_CHANS, h, w))?.contiguous()?;
        nn::nchw_to_bhwc(&self.proj.forward(&rgb)?)
    }
}

/// Max-pool (kernel 2, stride 2) followed by a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct PositionAdapter {
    conv: Conv2d,
}

impl PositionAdapter {
    /// The convolution starts as the identity so the adapted embedding
    /// initially equals the pooled SAM embedding.
    pub fn new(mut pb: ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb.pp("conv"), dim, dim, 3, 1, 1, true, Init::IdentityConv)?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    /// `(b, 2g, 2g, d)` → `(b, g, g, d)`.
    pub fn forward(&self, pos: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = pos.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("position adapter input side", "even", (h, w)));
        }
        let x = nn::max_pool(&nn::bhwc_to_nchw(pos)?, 2)?;
        nn::nchw_to_bhwc(&self.conv.forward(&x)?)
    }
}

/// Bottleneck adapter `GELU(x E_d) E_u` (with biases). The caller adds the
/// result to the residual stream.
#[derive(Clone, Debug)]
pub struct FeatureAdapter {
    down: Linear,
    up: Linear,
    dim: usize,
}

impl FeatureAdapter {
    pub fn new(mut pb: ParamBuilder, dim: usize, bottleneck: usize) -> Result<Self> {
        Ok(Self {
            down: Linear::new(pb.pp("down"), dim, bottleneck, true, Init::TruncNormal { std: 0.02 })?,
            up: Linear::new(pb.pp("up"), bottleneck, dim, true, Init::Zeros)?,
            dim,
        })
    }

    pub fn down(&self) -> &Linear {
        &self.down
    }

    pub fn up(&self) -> &Linear {
        &self.up
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims().last().copied().unwrap_or(0);
        if c != self.dim {
            return Err(Error::shape("feature adapter channels", self.dim, c));
        }
        self.up.forward(&nn::gelu(&self.down.forward(x)?)?)
    }
}

/// Multi-head self-attention over a `(b, h, w, c)` grid.
#[derive(Clone, Debug)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(mut pb: ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        let init = Init::FanIn { fan_in: dim, gain: 1.0 };
        Ok(Self {
            qkv: Linear::new(pb.pp("qkv"), dim, 3 * dim, true, init)?,
            proj: Linear::new(pb.pp("proj"), dim, dim, true, init)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let n = h * w;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(&x.reshape((b, n, c))?)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let out = nn::scaled_attention(&q, &k, &v)?;
        self.proj.forward(&nn::merge_heads(&out)?)?.reshape((b, h, w, c)).map_err(Into::into)
    }
}

fn window_partition(x: &Tensor, ws: usize) -> Result<(Tensor, (usize, usize))> {
    let (b, h, w, c) = x.dims4()?;
    let pad_h = (ws - h % ws) % ws;
    let pad_w = (ws - w % ws) % ws;
    let mut x = x.clone();
    if pad_h > 0 {
        x = x.pad_with_zeros(1, 0, pad_h)?;
    }
    if pad_w > 0 {
        x = x.pad_with_zeros(2, 0, pad_w)?;
    }
    let (hp, wp) = (h + pad_h, w + pad_w);
    let windows = x
        .reshape(&[b, hp / ws, ws, wp / ws, ws, c][..])?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (hp / ws) * (wp / ws), ws, ws, c))?;
    Ok((windows, (hp, wp)))
}

fn window_unpartition(windows: &Tensor, ws: usize, padded: (usize, usize), hw: (usize, usize)) -> Result<Tensor> {
    let (hp, wp) = padded;
    let (h, w) = hw;
    let (nw, _, _, c) = windows.dims4()?;
    let b = nw / ((hp / ws) * (wp / ws));
    let x = windows
        .reshape(&[b, hp / ws, wp / ws, ws, ws, c][..])?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, hp, wp, c))?;
    if hp > h || wp > w {
        Ok(x.narrow(1, 0, h)?.narrow(2, 0, w)?.contiguous()?)
    } else {
        Ok(x)
    }
}

/// Cross-branch attention attached to a global block, with its pre-norm.
#[derive(Clone, Debug)]
pub struct CbaAttachment {
    pub norm: LayerNorm,
    pub attn: CrossBranchAttention,
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    /// 0 for global attention.
    window: usize,
    adapter: Option<FeatureAdapter>,
    cba: Option<CbaAttachment>,
}

impl TransformerBlock {
    pub fn is_global(&self) -> bool {
        self.window == 0
    }

    pub fn adapter(&self) -> Option<&FeatureAdapter> {
        self.adapter.as_ref()
    }

    pub fn cba(&self) -> Option<&CbaAttachment> {
        self.cba.as_ref()
    }

    /// `plain` skips the adapter and the CBA attachment, giving the
    /// unadapted backbone block.
    fn forward(&self, x: &Tensor, cnn: Option<&Tensor>, plain: bool, cba_calls: &AtomicUsize) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let y = self.norm1.forward(x)?;
        let y = if self.window > 0 {
            let (windows, padded) = window_partition(&y, self.window)?;
            let out = self.attn.forward(&windows)?;
            window_unpartition(&out, self.window, padded, (h, w))?
        } else {
            self.attn.forward(&y)?
        };
        let mut x = (x + y)?;
        if !plain {
            if let Some(cba) = &self.cba {
                let f_c = cnn.ok_or_else(|| Error::shape("CBA input", "CNN feature map", "none"))?;
                let tokens = x.reshape((b, h * w, c))?;
                let fused = cba.attn.forward(&cba.norm.forward(&tokens)?, f_c)?;
                cba_calls.fetch_add(1, Ordering::Relaxed);
                x = (x + fused.reshape((b, h, w, c))?)?;
            }
        }
        let xn = self.norm2.forward(&x)?;
        let mut out = (&x + self.mlp.forward(&xn)?)?;
        if !plain {
            if let Some(adapter) = &self.adapter {
                out = (out + adapter.forward(&xn)?)?;
            }
        }
        Ok(out)
    }
}

/// Which adaptation modules the encoder carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitOptions {
    pub feature_adapters: bool,
    pub position_adapter: bool,
    pub cba: bool,
}

#[derive(Debug)]
pub struct VitBranch {
    patch_embed: PatchEmbedding,
    pos_embed: crate::registry::Param,
    pos_adapter: Option<PositionAdapter>,
    input_adapter: Option<FeatureAdapter>,
    blocks: Vec<TransformerBlock>,
    neck: (Conv2d, LayerNorm2d, Conv2d, LayerNorm2d),
    grid: usize,
    cba_calls: AtomicUsize,
}

impl VitBranch {
    /// `pb` should be rooted at `image_encoder`; backbone parameters are
    /// tagged `vit`, adapters `adapter`, CBA `cba`.
    pub fn new(mut pb: ParamBuilder, cfg: &ModelConfig, opts: VitOptions) -> Result<Self> {
        let d = cfg.embed_dim;
        let g = cfg.grid_side();
        let mut vit = pb.tagged(Component::Vit);
        let patch_embed = PatchEmbedding::new(vit.pp("patch_embed"), cfg)?;
        let pos_embed = vit.get("pos_embed", &[1, 2 * g, 2 * g, d], Init::TruncNormal { std: 0.02 })?;
        drop(vit);
        let mut adapters = pb.tagged(Component::Adapter);
        let pos_adapter = if opts.position_adapter {
            Some(PositionAdapter::new(adapters.pp("pos_adapter"), d)?)
        } else {
            None
        };
        let input_adapter = if opts.feature_adapters {
            Some(FeatureAdapter::new(adapters.pp("input_adapter"), d, cfg.adapter_bottleneck)?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let global = cfg.is_global(i);
            let mut blocks_pb = pb.pp("blocks");
            let mut bp = blocks_pb.pp(i);
            let mut bv = bp.tagged(Component::Vit);
            let norm1 = LayerNorm::new(bv.pp("norm1"), d)?;
            let attn = Attention::new(bv.pp("attn"), d, cfg.vit_heads)?;
            let norm2 = LayerNorm::new(bv.pp("norm2"), d)?;
            let hidden = d * cfg.mlp_ratio;
            let mlp = Mlp::from_layers(
                vec![
                    Linear::new(bv.pp("mlp").pp("lin1"), d, hidden, true, Init::FanIn { fan_in: d, gain: 1.0 })?,
                    Linear::new(bv.pp("mlp").pp("lin2"), hidden, d, true, Init::FanIn { fan_in: hidden, gain: 1.0 })?,
                ],
                Activation::Gelu,
            );
            let adapter = if global && opts.feature_adapters {
                Some(FeatureAdapter::new(
                    bp.tagged(Component::Adapter).pp("adapter"),
                    d,
                    cfg.adapter_bottleneck,
                )?)
            } else {
                None
            };
            let cba = if global && opts.cba {
                let mut cp = bp.tagged(Component::Cba);
                let mut cp = cp.pp("cba");
                Some(CbaAttachment {
                    norm: LayerNorm::new(cp.pp("norm"), d)?,
                    attn: CrossBranchAttention::new(cp.pp("attn"), d, cfg.cba_dim, cfg.cba_heads, g * g)?,
                })
            } else {
                None
            };
            blocks.push(TransformerBlock {
                norm1,
                attn,
                norm2,
                mlp,
                window: if global { 0 } else { cfg.window_size },
                adapter,
                cba,
            });
        }
        let mut vit = pb.tagged(Component::Vit);
        let mut np = vit.pp("neck");
        let neck = (
            Conv2d::new(np.pp(0), d, d, 1, 1, 0, false, Init::FanIn { fan_in: d, gain: 1.0 })?,
            LayerNorm2d::new(np.pp(1), d)?,
            Conv2d::new(np.pp(2), d, d, 3, 1, 1, false, Init::FanIn { fan_in: 9 * d, gain: 1.0 })?,
            LayerNorm2d::new(np.pp(3), d)?,
        );
        Ok(Self {
            patch_embed,
            pos_embed,
            pos_adapter,
            input_adapter,
            blocks,
            neck,
            grid: g,
            cba_calls: AtomicUsize::new(0),
        })
    }

    pub fn patch_embed(&self) -> &PatchEmbedding {
        &self.patch_embed
    }

    pub fn pos_adapter(&self) -> Option<&PositionAdapter> {
        self.pos_adapter.as_ref()
    }

    pub fn input_adapter(&self) -> Option<&FeatureAdapter> {
        self.input_adapter.as_ref()
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    pub fn grid_side(&self) -> usize {
        self.grid
    }

    /// Number of CBA attachments, i.e. CNN maps `forward` expects.
    pub fn cba_slots(&self) -> usize {
        self.blocks.iter().filter(|b| b.cba.is_some()).count()
    }

    /// Total CBA invocations since construction.
    pub fn cba_invocations(&self) -> usize {
        self.cba_calls.load(Ordering::Relaxed)
    }

    /// Positional embedding matched to the token grid: position adapter
    /// when present, bilinear resize otherwise.
    pub fn position_embedding(&self) -> Result<Tensor> {
        match &self.pos_adapter {
            Some(adapter) => adapter.forward(&self.pos_embed.tensor()),
            None => {
                let pos = nn::bhwc_to_nchw(&self.pos_embed.tensor())?;
                nn::nchw_to_bhwc(&nn::resize_bilinear(&pos, self.grid, self.grid)?)
            }
        }
    }

    /// Adapted encoder. `cnn_features` holds one `(b, g*g, d)` map per CBA
    /// slot, in block order. Returns `(b, g, g, d)`.
    pub fn forward(&self, image: &Tensor, cnn_features: &[Tensor]) -> Result<Tensor> {
        if cnn_features.len() != self.cba_slots() {
            return Err(Error::shape("CNN feature list", self.cba_slots(), cnn_features.len()));
        }
        let mut x = self.patch_embed.forward(image)?;
        x = x.broadcast_add(&self.position_embedding()?)?;
        if let Some(adapter) = &self.input_adapter {
            x = (&x + adapter.forward(&x)?)?;
        }
        let mut feats = cnn_features.iter();
        for block in &self.blocks {
            let f = if block.cba.is_some() { feats.next() } else { None };
            if let Some(f) = f {
                let (b, n, c) = f.dims3()?;
                let expect = (x.dim(0)?, self.grid * self.grid, x.dim(3)?);
                if (b, n, c) != expect {
                    return Err(Error::shape("CNN feature map", expect, (b, n, c)));
                }
            }
            x = block.forward(&x, f, false, &self.cba_calls)?;
        }
        self.apply_neck(&x)
    }

    /// Unadapted backbone: overlapped embedding, max-pooled SAM positional
    /// embedding, plain blocks and neck.
    pub fn backbone_forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = self.patch_embed.forward(image)?;
        let pos = nn::nchw_to_bhwc(&nn::max_pool(&nn::bhwc_to_nchw(&self.pos_embed.tensor())?, 2)?)?;
        x = x.broadcast_add(&pos)?;
        for block in &self.blocks {
            x = block.forward(&x, None, true, &self.cba_calls)?;
        }
        self.apply_neck(&x)
    }

    fn apply_neck(&self, x: &Tensor) -> Result<Tensor> {
        let (c0, n1, c2, n3) = &self.neck;
        let y = nn::bhwc_to_nchw(x)?;
        let y = n3.forward(&c2.forward(&n1.forward(&c0.forward(&y)?)?)?)?;
        nn::nchw_to_bhwc(&y)
    }
}
