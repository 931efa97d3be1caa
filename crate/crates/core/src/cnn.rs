//! Lightweight convolutional branch running parallel to the ViT branch.
//!
//! One 3×3 conv block, three pool+conv blocks (8× downsampling, matching the
//! stride-8 token grid), then four conv blocks at grid resolution whose
//! outputs feed the CBA attachments through 1×1 projections.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d};
use crate::registry::{Init, ParamBuilder};

pub const DOWNSAMPLE: usize = 8;
pub const TRAILING_BLOCKS: usize = 4;

/// 3×3 convolution (padding 1) followed by GELU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv: Conv2d,
}

impl ConvBlock {
    pub fn new(mut pb: ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        let init = Init::FanIn {
            fan_in: 9 * in_ch,
            gain: std::f64::consts::SQRT_2,
        };
        Ok(Self {
            conv: Conv2d::new(pb.pp("conv"), in_ch, out_ch, 3, 1, 1, true, init)?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nn::gelu(&self.conv.forward(x)?)
    }
}

/// Max-pool (kernel 2, stride 2) then a [`ConvBlock`].
#[derive(Clone, Debug)]
pub struct ConvPoolBlock {
    block: ConvBlock,
}

impl ConvPoolBlock {
    pub fn new(pb: ParamBuilder, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            block: ConvBlock::new(pb, in_ch, out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.block.forward(&nn::max_pool(x, 2)?)
    }
}

/// Maps produced by one CNN forward pass.
#[derive(Clone, Debug)]
pub struct CnnFeatures {
    /// Outputs of the four trailing conv blocks, NCHW at grid resolution.
    pub trailing: Vec<Tensor>,
    /// Projected `(b, g*g, d)` token maps, one per CBA slot in block order.
    pub attachments: Vec<Tensor>,
}

impl CnnFeatures {
    /// The last trailing map, used for branch fusion.
    pub fn final_map(&self) -> &Tensor {
        self.trailing.last().expect("trailing blocks are never empty")
    }
}

/// Which trailing block output feeds CBA slot `slot` of `slots`: slots are
/// spread over the four trailing blocks and the last slot always takes the
/// last block.
pub fn attachment_source(slot: usize, slots: usize) -> usize {
    ((slot + 1) * TRAILING_BLOCKS).div_ceil(slots) - 1
}

#[derive(Clone, Debug)]
pub struct CnnBranch {
    stem: ConvBlock,
    down: Vec<ConvPoolBlock>,
    trailing: Vec<ConvBlock>,
    attach: Vec<Conv2d>,
    input_size: usize,
    out_channels: usize,
}

impl CnnBranch {
    /// Channels start at d/16 (at least 4) and double per pool block, capped
    /// at d/4, keeping the branch a small fraction of the ViT branch.
    pub fn new(mut pb: ParamBuilder, cfg: &ModelConfig, cba_slots: usize) -> Result<Self> {
        if cfg.patch_stride != DOWNSAMPLE {
            return Err(Error::Config {
                invariant: "CNN downsample matches patch stride",
                detail: format!("CNN branch downsamples by {DOWNSAMPLE}, patch_stride = {}", cfg.patch_stride),
            });
        }
        let d = cfg.embed_dim;
        let cap = (d / 4).max(4);
        let mut ch = (d / 16).max(4).min(cap);
        let stem = ConvBlock::new(pb.pp("stem"), 1, ch)?;
        let mut down = Vec::with_capacity(3);
        for i in 0..3 {
            let next = (ch * 2).min(cap);
            down.push(ConvPoolBlock::new(pb.pp("down").pp(i), ch, next)?);
            ch = next;
        }
        let trailing = (0..TRAILING_BLOCKS)
            .map(|i| ConvBlock::new(pb.pp("trailing").pp(i), ch, ch))
            .collect::<Result<Vec<_>>>()?;
        let attach = (0..cba_slots)
            .map(|j| {
                Conv2d::new(
                    pb.pp("attach").pp(j),
                    ch,
                    d,
                    1,
                    1,
                    0,
                    true,
                    Init::FanIn { fan_in: ch, gain: 1.0 },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem,
            down,
            trailing,
            attach,
            input_size: cfg.input_size,
            out_channels: ch,
        })
    }

    /// Channel count of the grid-resolution maps.
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        std::iter::once(&self.stem)
            .chain(self.down.iter().map(|b| &b.block))
            .chain(self.trailing.iter())
    }

    pub fn forward(&self, image: &Tensor) -> Result<CnnFeatures> {
        let (b, c, h, w) = image.dims4()?;
        if c != 1 || h != self.input_size || w != self.input_size {
            return Err(Error::shape(
                "CNN branch input",
                (b, 1, self.input_size, self.input_size),
                (b, c, h, w),
            ));
        }
        let mut x = self.stem.forward(image)?;
        for block in &self.down {
            x = block.forward(&x)?;
        }
        let mut trailing = Vec::with_capacity(TRAILING_BLOCKS);
        for block in &self.trailing {
            x = block.forward(&x)?;
            trailing.push(x.clone());
        }
        let slots = self.attach.len();
        let attachments = self
            .attach
            .iter()
            .enumerate()
            .map(|(j, proj)| {
                let src = &trailing[attachment_source(j, slots)];
                let y = nn::nchw_to_bhwc(&proj.forward(src)?)?;
                let (b, g, _, d) = y.dims4()?;
                Ok(y.reshape((b, g * g, d))?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CnnFeatures { trailing, attachments })
    }
}
