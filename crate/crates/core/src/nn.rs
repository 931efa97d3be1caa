//! Differentiable building blocks shared by every module.
//!
//! Layout conventions: token grids are `(batch, h, w, channels)`, convolution
//! inputs are `(batch, channels, h, w)`, token sequences are
//! `(batch, tokens, channels)`. Weights follow the PyTorch/SAM layout so that
//! SAM-style checkpoints map one to one.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::registry::{Init, Param, ParamBuilder};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Param,
    bias: Option<Param>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(mut pb: ParamBuilder, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = pb.get("weight", &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(pb.get("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Param> {
        self.bias.as_ref()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Applies `x W^T + b` over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(Error::shape("linear input channels", self.in_dim, last));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, self.in_dim))?;
        let mut y = flat.matmul(&self.weight.tensor().t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Param,
    bias: Option<Param>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mut pb: ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = pb.get("weight", &[out_ch, in_ch, kernel, kernel], init)?;
        let bias = if bias {
            Some(pb.get("bias", &[out_ch], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight.tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution with kernel == stride (pure upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Param,
    bias: Param,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(mut pb: ParamBuilder, in_ch: usize, out_ch: usize, stride: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", &[in_ch, out_ch, stride, stride], init)?,
            bias: pb.get("bias", &[out_ch], Init::Zeros)?,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight.tensor(), 0, 0, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.tensor().reshape((1, (), 1, 1))?)?)
    }
}

/// Layer norm over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Param,
    bias: Param,
}

impl LayerNorm {
    pub fn new(mut pb: ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", &[dim], Init::Ones)?,
            bias: pb.get("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.tensor())?
            .broadcast_add(&self.bias.tensor())?)
    }
}

/// Layer norm over the channel dimension of an NCHW tensor.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    weight: Param,
    bias: Param,
}

impl LayerNorm2d {
    pub fn new(mut pb: ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", &[channels], Init::Ones)?,
            bias: pb.get("bias", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.tensor().reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.bias.tensor().reshape((1, (), 1, 1))?)?)
    }
}

/// Non-overlapping `k×k` max pooling on `(b, c, h, w)`, built from reshape
/// and `max` reductions. candle's fused op scales its gradient by the
/// window's tie fraction instead of dividing by the tie count, so a unique
/// maximum receives only `1/k²` of the gradient.
pub fn max_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % k != 0 || w % k != 0 {
        return Err(Error::shape("max pool input side", format!("multiple of {k}"), (h, w)));
    }
    Ok(x.reshape((b, c, h / k, k, w / k, k))?.max(5)?.max(3)?)
}

/// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`, composed from `erf` so the
/// backward pass is exact too (candle's fused op truncates 1/sqrt(2 pi) in
/// its gradient, which shows up at the 1e-4 level in gradient checks).
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let e = (x * std::f64::consts::FRAC_1_SQRT_2)?.erf()?;
    Ok(((e + 1.0)? * 0.5)?.mul(x)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Gelu => gelu(x)?,
            Activation::Relu => x.relu()?,
        })
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn new(
        mut pb: ParamBuilder,
        dims: &[usize],
        act: Activation,
        init: impl Fn(usize) -> Init,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(pb.pp("layers").pp(i), w[0], w[1], true, init(w[0])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, act })
    }

    /// Builds from explicitly named layers (e.g. SAM's `lin1`/`lin2`).
    pub fn from_layers(layers: Vec<Linear>, act: Activation) -> Self {
        Self { layers, act }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < n {
                x = self.act.apply(&x)?;
            }
        }
        Ok(x)
    }
}

/// Softmax over the last dimension. The max shift is detached; softmax is
/// invariant to it, so gradients are unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Scaled dot-product attention on `(batch, heads, n, c)` tensors.
pub fn scaled_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let c = q.dim(D::Minus1)?;
    let scores = (q.contiguous()?.matmul(&k.t()?.contiguous()?)? / (c as f64).sqrt())?;
    Ok(softmax_last(&scores)?.matmul(&v.contiguous()?)?)
}

/// `(b, n, heads*c)` → `(b, heads, n, c)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

/// `(b, heads, n, c)` → `(b, n, heads*c)`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, c) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * c))?)
}

pub fn bhwc_to_nchw(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

pub fn nchw_to_bhwc(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

/// Row-interpolation matrix `(out, in)` for bilinear resampling with
/// half-pixel centers (PyTorch `align_corners=False`).
pub fn bilinear_matrix(in_len: usize, out_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of an NCHW tensor, expressed as two matrix products so
/// that it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let aw = bilinear_matrix(w, out_w, x.dtype(), x.device())?;
    let ah = bilinear_matrix(h, out_h, x.dtype(), x.device())?;
    let y = x.reshape((b * c * h, w))?.matmul(&aw.t()?)?; // (bch, out_w)
    let y = y.reshape((b * c, h, out_w))?.transpose(1, 2)?.contiguous()?; // (bc, out_w, h)
    let y = y.reshape((b * c * out_w, h))?.matmul(&ah.t()?)?; // (bc*out_w, out_h)
    Ok(y
        .reshape((b * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, out_h, out_w))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_full_gradient_to_the_maximum() {
        let x = candle_core::Var::new(&[[[[1f64, 5.0, 0.0, 0.0], [2.0, 3.0, 0.0, 7.0]]]], &Device::Cpu).unwrap();
        let y = max_pool(x.as_tensor(), 2).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![5.0, 7.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gelu_gradient_is_exact() {
        // d/dx = Phi(x) + x phi(x); x = -0.75 sits near the derivative's zero.
        let xs = [-2.0f64, -0.75, 0.0, 0.4, 3.0];
        let v = candle_core::Var::new(&xs, &Device::Cpu).unwrap();
        let g = gelu(v.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (x, g) in xs.iter().zip(g) {
            let pdf = (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let cdf = 0.5 * (1.0 + crate::testutil::erf(x / std::f64::consts::SQRT_2));
            assert!((g - (cdf + x * pdf)).abs() < 1e-14, "x = {x}: {g}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f64, 2.0, 3.0], [-50.0, 0.0, 50.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_halving_is_pair_average() {
        let m = bilinear_matrix(4, 2, DType::F64, &Device::Cpu).unwrap();
        let v: Vec<Vec<f64>> = m.to_vec2().unwrap();
        assert_eq!(v, vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.5]]);
    }

    #[test]
    fn bilinear_rows_are_convex() {
        let m = bilinear_matrix(8, 32, DType::F64, &Device::Cpu).unwrap();
        for row in m.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor::full(3.5f64, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 7, 9).unwrap();
        assert_eq!(y.dims(), &[1, 2, 7, 9]);
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }
}
