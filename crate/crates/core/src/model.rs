//! The assembled segmentation model: adapted ViT branch, optional CNN branch
//! with cross-branch attention, branch fusion, SAM-compatible prompt encoder
//! and mask decoder, and the auto prompt generator.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apg::{AutoPromptGenerator, GeneratedPrompts};
use crate::cnn::CnnBranch;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::nn::{self, Conv2d};
use crate::registry::{Component, Init, ParamBuilder, ParamRegistry};
use crate::sam_head::{MaskDecoder, MaskPrediction, Point, PromptEncoder};
use crate::vit::{VitBranch, VitOptions};

/// Which adaptation components are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub cnn_branch: bool,
    pub cba: bool,
    pub feature_adapters: bool,
    pub position_adapter: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::all_on()
    }
}

impl Ablation {
    pub const fn all_on() -> Self {
        Self {
            cnn_branch: true,
            cba: true,
            feature_adapters: true,
            position_adapter: true,
        }
    }

    pub const fn all_off() -> Self {
        Self {
            cnn_branch: false,
            cba: false,
            feature_adapters: false,
            position_adapter: false,
        }
    }

    /// The six component combinations of the ablation table, in row order.
    pub const fn table_rows() -> [Ablation; 6] {
        let off = Self::all_off();
        [
            off,
            Self { cnn_branch: true, ..off },
            Self { cnn_branch: true, cba: true, ..off },
            Self { feature_adapters: true, ..off },
            Self { position_adapter: true, ..off },
            Self::all_on(),
        ]
    }

    /// Everything on except the listed components
    /// (`cnn`, `cba`, `fadapt`, `padapt`).
    pub fn with_disabled<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut a = Self::all_on();
        for name in names {
            match name.trim() {
                "" => {}
                "cnn" => a.cnn_branch = false,
                "cba" => a.cba = false,
                "fadapt" => a.feature_adapters = false,
                "padapt" => a.position_adapter = false,
                other => return Err(Error::RunConfig(format!("unknown ablation component `{other}`"))),
            }
        }
        Ok(a)
    }

    pub fn validate(self) -> Result<Self> {
        if self.cba && !self.cnn_branch {
            return Err(Error::RunConfig("cba requires the CNN branch".into()));
        }
        Ok(self)
    }

    /// Short label such as `cnn+cba+fadapt+padapt` or `none`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.cnn_branch, "cnn"),
            (self.cba, "cba"),
            (self.feature_adapters, "fadapt"),
            (self.position_adapter, "padapt"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// How prompts reach the mask decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ManualPoint,
    Auto,
}

impl PromptMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMode::ManualPoint => "manual_point",
            PromptMode::Auto => "auto",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" | "manual_point" => Ok(PromptMode::ManualPoint),
            "auto" => Ok(PromptMode::Auto),
            other => Err(Error::RunConfig(format!("unknown prompt mode `{other}`"))),
        }
    }
}

/// The prompt side of one forward pass.
#[derive(Clone, Debug)]
pub enum Prompt<'a> {
    /// One point list per batch item.
    Points(&'a [Vec<Point>]),
    /// Auto-generated prompts for the given task id.
    Task(usize),
}

pub struct Samus {
    cfg: ModelConfig,
    ablation: Ablation,
    registry: ParamRegistry,
    vit: VitBranch,
    cnn: Option<CnnBranch>,
    fusion: Option<Conv2d>,
    prompt_encoder: PromptEncoder,
    mask_decoder: MaskDecoder,
    apg: AutoPromptGenerator,
    task_names: Vec<String>,
    seed: u64,
}

impl fmt::Debug for Samus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Samus")
            .field("ablation", &self.ablation.label())
            .field("params", &self.registry.len())
            .field("tasks", &self.task_names)
            .finish()
    }
}

impl Samus {
    /// Builds a freshly initialized model. Tasks are named `task0`, `task1`, ...
    pub fn new(cfg: ModelConfig, ablation: Ablation, dtype: DType, seed: u64) -> Result<Self> {
        let names = (0..cfg.num_tasks).map(|i| format!("task{i}")).collect();
        Self::with_tasks(cfg, ablation, dtype, seed, names)
    }

    pub fn with_tasks(
        cfg: ModelConfig,
        ablation: Ablation,
        dtype: DType,
        seed: u64,
        task_names: Vec<String>,
    ) -> Result<Self> {
        let cfg = cfg.validate()?;
        let ablation = ablation.validate()?;
        if task_names.len() != cfg.num_tasks {
            return Err(Error::Config {
                invariant: "one task name per task-token bank",
                detail: format!("{} names for num_tasks = {}", task_names.len(), cfg.num_tasks),
            });
        }
        let mut registry = ParamRegistry::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = VitOptions {
            feature_adapters: ablation.feature_adapters,
            position_adapter: ablation.position_adapter,
            cba: ablation.cba,
        };
        let vit = VitBranch::new(
            ParamBuilder::new(&mut registry, &mut rng, Component::Vit).pp("image_encoder"),
            &cfg,
            opts,
        )?;
        let (cnn, fusion) = if ablation.cnn_branch {
            let cnn = CnnBranch::new(
                ParamBuilder::new(&mut registry, &mut rng, Component::Cnn).pp("cnn"),
                &cfg,
                vit.cba_slots(),
            )?;
            let fusion = Conv2d::new(
                ParamBuilder::new(&mut registry, &mut rng, Component::Fusion)
                    .pp("fusion")
                    .pp("proj"),
                cnn.out_channels(),
                cfg.embed_dim,
                1,
                1,
                0,
                true,
                Init::TruncNormal { std: 0.02 },
            )?;
            (Some(cnn), Some(fusion))
        } else {
            (None, None)
        };
        let prompt_encoder = PromptEncoder::new(
            ParamBuilder::new(&mut registry, &mut rng, Component::PromptEncoder).pp("prompt_encoder"),
            &cfg,
        )?;
        let mask_decoder = MaskDecoder::new(
            ParamBuilder::new(&mut registry, &mut rng, Component::MaskDecoder).pp("mask_decoder"),
            &cfg,
        )?;
        let apg = AutoPromptGenerator::new(ParamBuilder::new(&mut registry, &mut rng, Component::Apg).pp("apg"), &cfg)?;
        Ok(Self {
            cfg,
            ablation,
            registry,
            vit,
            cnn,
            fusion,
            prompt_encoder,
            mask_decoder,
            apg,
            task_names,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        self.registry.dtype()
    }

    pub fn vit(&self) -> &VitBranch {
        &self.vit
    }

    pub fn cnn(&self) -> Option<&CnnBranch> {
        self.cnn.as_ref()
    }

    pub fn prompt_encoder(&self) -> &PromptEncoder {
        &self.prompt_encoder
    }

    pub fn mask_decoder(&self) -> &MaskDecoder {
        &self.mask_decoder
    }

    pub fn apg(&self) -> &AutoPromptGenerator {
        &self.apg
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn task_id(&self, name: &str) -> Result<usize> {
        self.task_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    /// Fused image embedding `(b, g, g, d)` from `(b, 1, S, S)` images in `[0, 1]`.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let image = image.to_dtype(self.dtype())?;
        let Some(cnn) = &self.cnn else {
            return self.vit.forward(&image, &[]);
        };
        let feats = cnn.forward(&image)?;
        let vit_out = self.vit.forward(&image, &feats.attachments)?;
        let fusion = self.fusion.as_ref().expect("fusion exists with the CNN branch");
        let cnn_out = nn::nchw_to_bhwc(&fusion.forward(feats.final_map())?)?;
        crate::cba::fuse_branches(&vit_out, &cnn_out)
    }

    /// Image embedding of the unadapted backbone.
    pub fn backbone_embedding(&self, image: &Tensor) -> Result<Tensor> {
        self.vit.backbone_forward(&image.to_dtype(self.dtype())?)
    }

    /// Decoder output for an image embedding and a prompt.
    pub fn decode(&self, embedding: &Tensor, prompt: &Prompt) -> Result<MaskPrediction> {
        let pe = self.prompt_encoder.dense_pe()?;
        match prompt {
            Prompt::Points(points) => {
                let bundle = self.prompt_encoder.encode_batch(points)?;
                if bundle.sparse.dim(0)? != embedding.dim(0)? {
                    return Err(Error::shape("prompt batch", embedding.dim(0)?, bundle.sparse.dim(0)?));
                }
                self.mask_decoder.forward(embedding, &pe, &bundle)
            }
            Prompt::Task(task) => {
                let gen = self.generate_prompts(embedding, *task)?;
                self.mask_decoder.forward(&gen.image_embedding, &pe, &gen.prompts)
            }
        }
    }

    /// APG pass on an image embedding, reading a frozen copy of the
    /// decoder's output tokens.
    pub fn generate_prompts(&self, embedding: &Tensor, task: usize) -> Result<GeneratedPrompts> {
        let tokens = self.mask_decoder.output_tokens()?;
        self.apg.generate(embedding, &tokens, task)
    }

    pub fn forward(&self, image: &Tensor, prompt: &Prompt) -> Result<MaskPrediction> {
        self.decode(&self.encode_image(image)?, prompt)
    }

    /// Thresholded mask (logit > 0) for one row-major `S×S` grayscale image
    /// with values in `[0, 1]`.
    pub fn segment(&self, image: &[f32], prompt: &Prompt) -> Result<BinaryMask> {
        let s = self.cfg.input_size;
        if image.len() != s * s {
            return Err(Error::shape("image pixels", s * s, image.len()));
        }
        let dev = self.registry.device().clone();
        let img = Tensor::from_slice(image, (1, 1, s, s), &dev)?;
        let logits = self.forward(&img, prompt)?.logits.detach();
        BinaryMask::from_tensor(&logits.get(0)?, 0.0)
    }

    /// Zero every adapter up-projection, every CBA output projection, the
    /// fusion projection and the APG combiners, so the encoder reduces to
    /// the backbone.
    pub fn zero_output_projections(&self) -> Result<()> {
        for (name, entry) in self.registry.iter() {
            let zero = match entry.component {
                Component::Adapter => name.contains(".up."),
                Component::Cba => name.contains(".attn.out."),
                Component::Fusion => true,
                Component::Apg => name.contains(".combine."),
                _ => false,
            };
            if zero {
                entry.param.set(&entry.param.value().zeros_like()?)?;
            }
        }
        Ok(())
    }
}
