use std::f64::consts::PI;

use candle_core::{DType, Tensor};

use super::{Point, PointLabel, PromptBundle};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::registry::{Init, Param, ParamBuilder};

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    gaussian: Param,
    point_embeddings: Vec<Param>,
    not_a_point: Param,
    no_mask: Param,
    input_size: usize,
    grid: usize,
    dim: usize,
}

impl PromptEncoder {
    pub fn new(mut pb: ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let emb = Init::TruncNormal { std: 1.0 };
        let gaussian = pb
            .pp("pe_layer")
            .get("positional_encoding_gaussian_matrix", &[2, d / 2], emb)?;
        let point_embeddings = (0..4)
            .map(|i| pb.pp("point_embeddings").pp(i).get("weight", &[1, d], emb))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gaussian,
            point_embeddings,
            not_a_point: pb.pp("not_a_point_embed").get("weight", &[1, d], emb)?,
            no_mask: pb.pp("no_mask_embed").get("weight", &[1, d], emb)?,
            input_size: cfg.input_size,
            grid: cfg.grid_side(),
            dim: d,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Random Fourier features of `(n, 2)` coordinates in `[0, 1]`.
    fn pe_encoding(&self, coords: &Tensor) -> Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let proj = (c.matmul(&self.gaussian.tensor())? * (2.0 * PI))?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?)
    }

    /// Positional encoding of the image-embedding grid, `(1, g, g, d)`.
    pub fn dense_pe(&self) -> Result<Tensor> {
        let g = self.grid;
        let mut coords = Vec::with_capacity(g * g * 2);
        for y in 0..g {
            for x in 0..g {
                coords.push((x as f64 + 0.5) / g as f64);
                coords.push((y as f64 + 0.5) / g as f64);
            }
        }
        let coords = Tensor::from_vec(coords, (g * g, 2), self.gaussian.var().device())?.to_dtype(self.dtype())?;
        Ok(self.pe_encoding(&coords)?.reshape((1, g, g, self.dim))?)
    }

    fn dtype(&self) -> DType {
        self.gaussian.var().dtype()
    }

    fn embed_points(&self, points: &[Point]) -> Result<Tensor> {
        let size = self.input_size as f64;
        let mut coords = Vec::with_capacity(points.len() * 2);
        for p in points {
            if !(0.0..size).contains(&p.x) || !(0.0..size).contains(&p.y) {
                return Err(Error::Prompt(format!(
                    "point ({}, {}) outside [0, {size})",
                    p.x, p.y
                )));
            }
            coords.push((p.x + 0.5) / size);
            coords.push((p.y + 0.5) / size);
        }
        let coords =
            Tensor::from_vec(coords, (points.len(), 2), self.gaussian.var().device())?.to_dtype(self.dtype())?;
        let pe = self.pe_encoding(&coords)?;
        let labels = points
            .iter()
            .map(|p| self.point_embeddings[p.label as usize].tensor())
            .collect::<Vec<_>>();
        Ok((pe + Tensor::cat(&labels, 0)?)?)
    }

    /// Encode one prompt per batch item. All items must carry the same
    /// number of points.
    pub fn encode_batch(&self, batch: &[Vec<Point>]) -> Result<PromptBundle> {
        let b = batch.len();
        let n = batch.first().map_or(0, Vec::len);
        if batch.iter().any(|p| p.len() != n) {
            return Err(Error::Prompt("ragged point counts within a batch".into()));
        }
        let d = self.dim;
        let sparse = if n == 0 {
            Tensor::zeros((b, 0, d), self.dtype(), self.gaussian.var().device())?
        } else {
            let rows = batch
                .iter()
                .map(|pts| self.embed_points(pts))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&rows, 0)?
        };
        let g = self.grid;
        let dense = self
            .no_mask
            .tensor()
            .reshape((1, 1, 1, d))?
            .broadcast_as((b, g, g, d))?
            .contiguous()?;
        Ok(PromptBundle { sparse, dense })
    }

    pub fn encode_points(&self, points: &[Point]) -> Result<PromptBundle> {
        self.encode_batch(&[points.to_vec()])
    }

    /// Unused by SAM for plain point prompts; kept so SAM-layout checkpoints
    /// load without leftovers.
    pub fn not_a_point(&self) -> &Param {
        &self.not_a_point
    }

    pub fn label_embedding(&self, label: PointLabel) -> &Param {
        &self.point_embeddings[label as usize]
    }
}
