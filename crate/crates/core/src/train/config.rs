//! Run configuration and its flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Model keys are the
//! [`ModelConfig`] field names; list values are comma separated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamConfig, LossWeights};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::metrics::HdVariant;
use crate::model::{Ablation, PromptMode};
use crate::registry::Regime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub regime: Regime,
    pub ablation: Ablation,
    pub prompt_mode: PromptMode,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Dataset ids, or `synthetic`.
    pub datasets: Vec<String>,
    pub data_root: PathBuf,
    /// Size of the generated training set when `synthetic` is selected.
    pub synthetic_count: usize,
    /// Stop once an epoch's mean train Dice reaches this value.
    pub target_train_dice: Option<f64>,
    /// Parameters to start from (e.g. an adapted model before APG tuning).
    pub init_checkpoint: Option<PathBuf>,
    pub hd_variant: HdVariant,
    /// Run in double precision (slow; for verification only).
    pub double_precision: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            regime: Regime::SamusAdapt,
            ablation: Ablation::all_on(),
            prompt_mode: PromptMode::ManualPoint,
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
            epochs: 400,
            max_steps: 2000,
            batch_size: 8,
            seed: 0,
            datasets: vec!["synthetic".into()],
            data_root: PathBuf::from("data"),
            synthetic_count: 8,
            target_train_dice: None,
            init_checkpoint: None,
            hd_variant: HdVariant::Max,
            double_precision: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::RunConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::RunConfig(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::RunConfig(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::RunConfig(format!("{}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "input_size" => m.input_size = parse(key, value)?,
            "patch_kernel" => m.patch_kernel = parse(key, value)?,
            "patch_stride" => m.patch_stride = parse(key, value)?,
            "embed_dim" => {
                let d = parse(key, value)?;
                *m = m.clone().with_embed_dim(d);
            }
            "depth" => m.depth = parse(key, value)?,
            "vit_heads" => m.vit_heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "window_size" => m.window_size = parse(key, value)?,
            "global_block_indices" => m.global_block_indices = parse_list(key, value)?,
            "adapter_bottleneck" => m.adapter_bottleneck = parse(key, value)?,
            "cba_dim" => m.cba_dim = parse(key, value)?,
            "cba_heads" => m.cba_heads = parse(key, value)?,
            "task_token_count" => m.task_token_count = parse(key, value)?,
            "output_token_count" => m.output_token_count = parse(key, value)?,
            "mask_decoder_depth" => m.mask_decoder_depth = parse(key, value)?,
            "decoder_heads" => m.decoder_heads = parse(key, value)?,
            "decoder_mlp_dim" => m.decoder_mlp_dim = parse(key, value)?,
            "num_tasks" => m.num_tasks = parse(key, value)?,
            "regime" => self.regime = parse(key, value)?,
            "cnn_branch" => self.ablation.cnn_branch = parse_bool(key, value)?,
            "cba" => self.ablation.cba = parse_bool(key, value)?,
            "feature_adapters" => self.ablation.feature_adapters = parse_bool(key, value)?,
            "position_adapter" => self.ablation.position_adapter = parse_bool(key, value)?,
            "prompt_mode" => self.prompt_mode = value.parse()?,
            "bce_weight" => self.loss.bce = parse(key, value)?,
            "dice_weight" => self.loss.dice = parse(key, value)?,
            "lr" => self.optimizer.lr = parse(key, value)?,
            "beta1" => self.optimizer.beta1 = parse(key, value)?,
            "beta2" => self.optimizer.beta2 = parse(key, value)?,
            "adam_eps" => self.optimizer.eps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "datasets" => self.datasets = parse_list(key, value)?,
            "data_root" => self.data_root = PathBuf::from(value),
            "synthetic_count" => self.synthetic_count = parse(key, value)?,
            "target_train_dice" => {
                self.target_train_dice = if value.is_empty() { None } else { Some(parse(key, value)?) }
            }
            "init_checkpoint" => {
                self.init_checkpoint = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "hd_variant" => self.hd_variant = value.parse()?,
            "double_precision" => self.double_precision = parse_bool(key, value)?,
            other => return Err(Error::RunConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Render back to the text format; `from_kv_str(to_kv_string())` is the identity.
    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("input_size = {}", m.input_size),
            format!("patch_kernel = {}", m.patch_kernel),
            format!("patch_stride = {}", m.patch_stride),
            format!("embed_dim = {}", m.embed_dim),
            format!("depth = {}", m.depth),
            format!("vit_heads = {}", m.vit_heads),
            format!("mlp_ratio = {}", m.mlp_ratio),
            format!("window_size = {}", m.window_size),
            format!("global_block_indices = {}", join(&m.global_block_indices)),
            format!("adapter_bottleneck = {}", m.adapter_bottleneck),
            format!("cba_dim = {}", m.cba_dim),
            format!("cba_heads = {}", m.cba_heads),
            format!("task_token_count = {}", m.task_token_count),
            format!("output_token_count = {}", m.output_token_count),
            format!("mask_decoder_depth = {}", m.mask_decoder_depth),
            format!("decoder_heads = {}", m.decoder_heads),
            format!("decoder_mlp_dim = {}", m.decoder_mlp_dim),
            format!("num_tasks = {}", m.num_tasks),
            format!("regime = {}", self.regime),
            format!("cnn_branch = {}", self.ablation.cnn_branch),
            format!("cba = {}", self.ablation.cba),
            format!("feature_adapters = {}", self.ablation.feature_adapters),
            format!("position_adapter = {}", self.ablation.position_adapter),
            format!("prompt_mode = {}", self.prompt_mode),
            format!("bce_weight = {}", self.loss.bce),
            format!("dice_weight = {}", self.loss.dice),
            format!("lr = {}", self.optimizer.lr),
            format!("beta1 = {}", self.optimizer.beta1),
            format!("beta2 = {}", self.optimizer.beta2),
            format!("adam_eps = {}", self.optimizer.eps),
            format!("epochs = {}", self.epochs),
            format!("max_steps = {}", self.max_steps),
            format!("batch_size = {}", self.batch_size),
            format!("seed = {}", self.seed),
            format!("datasets = {}", self.datasets.join(",")),
            format!("data_root = {}", self.data_root.display()),
            format!("synthetic_count = {}", self.synthetic_count),
            format!("hd_variant = {}", self.hd_variant),
            format!("double_precision = {}", self.double_precision),
        ];
        if let Some(t) = self.target_train_dice {
            lines.push(format!("target_train_dice = {t}"));
        }
        if let Some(p) = &self.init_checkpoint {
            lines.push(format!("init_checkpoint = {}", p.display()));
        }
        lines.join("\n") + "\n"
    }

    /// Checks the cross-field invariants and normalizes the model config.
    pub fn validate(mut self) -> Result<Self> {
        self.model = self.model.validate()?;
        self.ablation = self.ablation.validate()?;
        if self.prompt_mode == PromptMode::Auto && !self.regime.uses_apg() {
            return Err(Error::RunConfig(format!(
                "auto prompts need an APG regime, got {}",
                self.regime
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::RunConfig("batch_size must be positive".into()));
        }
        if self.datasets.is_empty() {
            return Err(Error::RunConfig("no datasets selected".into()));
        }
        if self.loss.bce < 0.0 || self.loss.dice < 0.0 {
            return Err(Error::RunConfig("loss weights must be non-negative".into()));
        }
        Ok(self)
    }
}
