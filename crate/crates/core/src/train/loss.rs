use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing constant of the soft-Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 0.5, dice: 0.5 }
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?.exp()?)
}

fn check(logits: &Tensor, gt: &Tensor) -> Result<()> {
    if logits.dims() != gt.dims() {
        return Err(Error::shape("loss inputs", logits.dims(), gt.dims()));
    }
    if logits.rank() < 2 {
        return Err(Error::shape("loss inputs", "(batch, ...)", logits.dims()));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check(logits, gt)?;
    Ok((softplus(logits)? - (logits * gt)?)?.mean_all()?)
}

/// `1 - (2 Σ p g + s) / (Σ p + Σ g + s)` per sample, averaged over the batch.
pub fn soft_dice_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check(logits, gt)?;
    let b = logits.dim(0)?;
    let p = sigmoid(logits)?.reshape((b, ()))?;
    let g = gt.reshape((b, ()))?;
    let inter = (&p * &g)?.sum(1)?;
    let denom = ((p.sum(1)? + g.sum(1)?)? + DICE_SMOOTH)?;
    let score = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    Ok((1.0 - score)?.mean_all()?)
}

/// Weighted BCE + soft-Dice.
pub fn segmentation_loss(logits: &Tensor, gt: &Tensor, w: LossWeights) -> Result<Tensor> {
    let bce = bce_with_logits(logits, gt)?;
    let dice = soft_dice_loss(logits, gt)?;
    Ok(((bce * w.bce)? + (dice * w.dice)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn val(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn perfect_prediction_limit() {
        let gt = t(&[1.0, 0.0, 1.0, 0.0], (1, 2, 2));
        let logits = ((gt.clone() * 2.0).unwrap() - 1.0).unwrap() * 40.0;
        let l = val(segmentation_loss(&logits.unwrap(), &gt, LossWeights::default()).unwrap());
        assert!(l < 1e-3, "{l}");
    }

    #[test]
    fn negative_class_limit() {
        let gt = Tensor::zeros((2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let logits = Tensor::full(-40.0f64, (2, 4, 4), &Device::Cpu).unwrap();
        let l = val(segmentation_loss(&logits, &gt, LossWeights::default()).unwrap());
        assert!(l < 1e-3, "{l}");
    }

    #[test]
    fn softplus_is_stable() {
        let x = t(&[-800.0, 0.0, 800.0], (1, 1, 3));
        let v = softplus(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v[2], 800.0);
        let s = sigmoid(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(s, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let logits = t(&[0.3, -1.2, 2.0, 0.0], (1, 2, 2));
        let gt = t(&[1.0, 0.0, 0.0, 1.0], (1, 2, 2));
        let expect: f64 = [(0.3, 1.0), (-1.2, 0.0), (2.0, 0.0), (0.0, 1.0)]
            .iter()
            .map(|&(x, y): &(f64, f64)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((val(bce_with_logits(&logits, &gt).unwrap()) - expect).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(segmentation_loss(&a, &b, LossWeights::default()).is_err());
    }
}
