//! Architecture hyperparameters and their validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of output tokens in a SAM-compatible mask decoder
/// (one quality token followed by four mask tokens).
pub const SAM_OUTPUT_TOKENS: usize = 5;

/// Input channels expected by the (SAM-layout) patch embedding.
pub const BACKBONE_IN_CHANS: usize = 3;

/// Every architecture hyperparameter of the adapted encoder, the SAM head
/// and the auto prompt generator.
///
/// Build one with [`ModelConfig::desk`] or [`ModelConfig::full_scale`] and pass
/// it through [`ModelConfig::validate`] before use; validation fills in the
/// derived `grid_side` and resolves `window_size = 0` to `grid_side / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub vit_heads: usize,
    pub mlp_ratio: usize,
    /// Local attention window side in tokens; 0 means half the grid side.
    pub window_size: usize,
    pub global_block_indices: Vec<usize>,
    pub adapter_bottleneck: usize,
    pub cba_dim: usize,
    pub cba_heads: usize,
    pub task_token_count: usize,
    pub output_token_count: usize,
    pub mask_decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    pub num_tasks: usize,
    /// Token grid side, `input_size / patch_stride`. Filled by `validate`.
    #[serde(default)]
    pub grid_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration used for tests and CPU training runs.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            patch_kernel: 16,
            patch_stride: 8,
            embed_dim: 32,
            depth: 4,
            vit_heads: 2,
            mlp_ratio: 4,
            window_size: 0,
            global_block_indices: vec![1, 3],
            adapter_bottleneck: 8,
            cba_dim: 16,
            cba_heads: 2,
            task_token_count: 4,
            output_token_count: SAM_OUTPUT_TOKENS,
            mask_decoder_depth: 2,
            decoder_heads: 2,
            decoder_mlp_dim: 64,
            num_tasks: 1,
            grid_side: 0,
        }
    }

    /// ViT-B sized encoder at 256×256 input with a 256-wide SAM decoder width
    /// folded into a single `embed_dim`.
    pub fn full_scale() -> Self {
        Self {
            input_size: 256,
            patch_kernel: 16,
            patch_stride: 8,
            embed_dim: 768,
            depth: 12,
            vit_heads: 12,
            mlp_ratio: 4,
            window_size: 14,
            global_block_indices: vec![2, 5, 8, 11],
            adapter_bottleneck: 192,
            cba_dim: 384,
            cba_heads: 2,
            task_token_count: 4,
            output_token_count: SAM_OUTPUT_TOKENS,
            mask_decoder_depth: 2,
            decoder_heads: 8,
            decoder_mlp_dim: 2048,
            num_tasks: 1,
            grid_side: 0,
        }
    }

    /// Scale the channel-related fields to a new embedding width, keeping the
    /// derived relationships (bottleneck d/4, CBA width d/2) intact.
    pub fn with_embed_dim(mut self, d: usize) -> Self {
        self.embed_dim = d;
        self.adapter_bottleneck = d / 4;
        self.cba_dim = (d / 2).max(1);
        self.decoder_mlp_dim = 2 * d;
        self
    }

    /// Check every invariant and return the normalized configuration.
    pub fn validate(mut self) -> Result<Self> {
        fn fail(invariant: &'static str, detail: String) -> Result<ModelConfig> {
            Err(Error::Config { invariant, detail })
        }
        let d = self.embed_dim;
        if self.patch_stride == 0 || self.input_size == 0 {
            return fail("nonzero sizes", "input_size and patch_stride must be positive".into());
        }
        if self.input_size % self.patch_stride != 0 {
            return fail(
                "input_size divisible by patch_stride",
                format!("{} % {} != 0", self.input_size, self.patch_stride),
            );
        }
        if self.patch_kernel < self.patch_stride || (self.patch_kernel - self.patch_stride) % 2 != 0 {
            return fail(
                "symmetric overlap padding",
                format!(
                    "patch_kernel {} - patch_stride {} must be even and non-negative",
                    self.patch_kernel, self.patch_stride
                ),
            );
        }
        if d < 8 || d % 8 != 0 {
            return fail("embed_dim multiple of 8", format!("embed_dim = {d}"));
        }
        if self.adapter_bottleneck != d / 4 {
            return fail(
                "adapter_bottleneck = d/4",
                format!("adapter_bottleneck = {}, d/4 = {}", self.adapter_bottleneck, d / 4),
            );
        }
        if self.vit_heads == 0 || d % self.vit_heads != 0 {
            return fail("vit_heads divides embed_dim", format!("{d} / {}", self.vit_heads));
        }
        if self.decoder_heads == 0 || (d / 2) % self.decoder_heads != 0 {
            return fail(
                "decoder_heads divides embed_dim / 2",
                format!("{} / {}", d / 2, self.decoder_heads),
            );
        }
        if self.depth == 0 {
            return fail("depth > 0", "depth = 0".into());
        }
        if let Some(&bad) = self.global_block_indices.iter().find(|&&i| i >= self.depth) {
            return fail(
                "global_block_index < depth",
                format!("index {bad} with depth {}", self.depth),
            );
        }
        if self.global_block_indices.windows(2).any(|w| w[0] >= w[1]) {
            return fail(
                "global_block_indices strictly increasing",
                format!("{:?}", self.global_block_indices),
            );
        }
        if self.cba_dim == 0 || self.cba_heads == 0 {
            return fail("cba dims positive", format!("d_m = {}, g = {}", self.cba_dim, self.cba_heads));
        }
        if self.task_token_count == 0 {
            return fail("task_token_count >= 1", "k = 0".into());
        }
        if self.num_tasks == 0 {
            return fail("num_tasks >= 1", "num_tasks = 0".into());
        }
        if self.output_token_count != SAM_OUTPUT_TOKENS {
            return fail(
                "output_token_count = 5",
                format!("output_token_count = {}", self.output_token_count),
            );
        }
        if self.mask_decoder_depth == 0 || self.mlp_ratio == 0 || self.decoder_mlp_dim == 0 {
            return fail("decoder dims positive", "depth, mlp_ratio and decoder_mlp_dim must be > 0".into());
        }
        let grid = self.input_size / self.patch_stride;
        if self.window_size == 0 {
            self.window_size = (grid / 2).max(1);
        }
        self.grid_side = grid;
        Ok(self)
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_stride
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Padding of the overlapped patch embedding, `(kernel - stride) / 2`.
    pub fn patch_padding(&self) -> usize {
        (self.patch_kernel - self.patch_stride) / 2
    }

    pub fn is_global(&self, block: usize) -> bool {
        self.global_block_indices.contains(&block)
    }

    pub fn mask_tokens(&self) -> usize {
        self.output_token_count - 1
    }
}
