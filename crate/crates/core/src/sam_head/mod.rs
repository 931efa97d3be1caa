//! SAM-compatible prompt encoder and mask decoder at configurable width.
//!
//! Structure follows SAM (random Fourier point encoding, five output tokens,
//! two-way transformer, transposed-conv upscaling with hypernetwork heads).
//! Both parts are frozen in every tuning regime.

mod mask_decoder;
mod prompt_encoder;
mod transformer;

use candle_core::Tensor;

pub use mask_decoder::MaskDecoder;
pub use prompt_encoder::PromptEncoder;
pub use transformer::{SamAttention, TwoWayTransformer};

/// Point label semantics, matching SAM's label ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PointLabel {
    Background = 0,
    Foreground = 1,
    BoxTopLeft = 2,
    BoxBottomRight = 3,
}

/// A prompt point in input-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

impl Point {
    pub fn foreground(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            label: PointLabel::Foreground,
        }
    }

    /// A box prompt as its two labelled corners.
    pub fn box_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> [Point; 2] {
        [
            Point {
                x: x0,
                y: y0,
                label: PointLabel::BoxTopLeft,
            },
            Point {
                x: x1,
                y: y1,
                label: PointLabel::BoxBottomRight,
            },
        ]
    }
}

/// The decoder's prompt-side input.
#[derive(Clone, Debug)]
pub struct PromptBundle {
    /// `(b, n, d)` token-form prompts.
    pub sparse: Tensor,
    /// `(b, g, g, d)` grid-form prompt.
    pub dense: Tensor,
}

#[derive(Clone, Debug)]
pub struct MaskPrediction {
    /// `(b, input_size, input_size)` mask logits.
    pub logits: Tensor,
    /// `(b, 4g, 4g)` logits before the final resize.
    pub low_res: Tensor,
    /// `(b,)` predicted mask quality.
    pub quality: Tensor,
}
