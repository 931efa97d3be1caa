//! Central finite-difference gradient checks over registry parameters.

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::registry::Param;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries probed per parameter; `None` probes all of them.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            max_entries: Some(24),
            seed: 0,
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}

/// Compares autograd against central differences of the scalar `loss`
/// for every named parameter. Parameters must be f64 and trainable.
pub fn check_gradients(
    params: &[(String, Param)],
    loss: impl Fn() -> Result<Tensor>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    for (name, p) in params {
        if p.var().dtype() != DType::F64 {
            return Err(Error::shape(format!("gradient check of `{name}`"), "f64", p.var().dtype()));
        }
        if !p.is_trainable() {
            return Err(Error::Config {
                invariant: "gradient check targets are trainable",
                detail: format!("`{name}` is frozen"),
            });
        }
    }
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, p) in params {
        let n = p.elem_count();
        let analytic = match grads.get(p.var().as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let original = p.value();
        let base = original.flatten_all()?.to_vec1::<f64>()?;
        let indices: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let probe = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                p.set(&Tensor::from_vec(v, original.shape(), original.device())?)?;
                scalar(&loss()?)
            };
            let plus = probe(opts.eps)?;
            let minus = probe(-opts.eps)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
        p.set(&original)?;
    }
    Ok(report)
}

/// Fixed random weighting `R` so that `sum(out * R)` exercises every output.
pub fn random_projection(like: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = like.elem_count();
    let v: Vec<f64> = (0..n)
        .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
        .collect();
    Ok(Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// `sum(out * R)` for a fixed random `R`.
pub fn projected_sum(out: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok((out * r)?.sum_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Component, Init, ParamBuilder, ParamRegistry};

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let mut reg = ParamRegistry::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ParamBuilder::new(&mut reg, &mut rng, Component::Apg)
            .get("w", &[3], Init::TruncNormal { std: 1.0 })
            .unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let ok = check_gradients(&params, || Ok(w.tensor().sqr()?.sum_all()?), GradCheckOptions::default()).unwrap();
        assert!(ok.max_rel_err < 1e-8, "{ok:?}");
        assert_eq!(ok.checked, 3);
        // detached path: autograd sees no dependence, numeric does
        let bad = check_gradients(
            &params,
            || Ok((w.tensor().sum_all()? + w.value().sqr()?.sum_all()?)?),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(bad.max_rel_err > 0.1);
    }
}
