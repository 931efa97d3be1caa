//! Reference math for integration tests, written with plain loops over
//! `Vec<f64>` so it shares no code with the tensor implementation.
#![allow(dead_code)]

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use samus::metrics::BinaryMask;
use samus::nn::Linear;
use samus::registry::ParamRegistry;

pub type Rows = Vec<Vec<f64>>;

pub fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn rows_tensor(rows: &Rows) -> Tensor {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (1, n, d), &Device::Cpu).unwrap()
}

/// Rows of the last two dims of a `(1, n, d)` or `(n, d)` tensor.
pub fn tensor_rows(t: &Tensor) -> Rows {
    let t = t.to_dtype(candle_core::DType::F64).unwrap();
    let d = *t.dims().last().unwrap();
    let flat = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(candle_core::DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

/// Weight `(out, in)` and optional bias of a linear layer.
pub struct Affine {
    pub w: Rows,
    pub b: Option<Vec<f64>>,
}

impl Affine {
    pub fn of(lin: &Linear) -> Self {
        Self {
            w: tensor_rows(&lin.weight().value()),
            b: lin.bias().map(|b| flat(&b.value())),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .enumerate()
            .map(|(o, row)| {
                let mut s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                if let Some(b) = &self.b {
                    s += b[o];
                }
                s
            })
            .collect()
    }

    pub fn apply_rows(&self, x: &Rows) -> Rows {
        x.iter().map(|r| self.apply(r)).collect()
    }
}

/// `softmax(q k^T * scale) v` with explicit loops.
pub fn attention(q: &Rows, k: &Rows, v: &Rows, scale: f64) -> Rows {
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (w, vj) in e.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += w / z * x;
                }
            }
            out
        })
        .collect()
}

pub fn erf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 is too coarse for 1e-6; use the series and
    // a continued fraction instead.
    let a = x.abs();
    if a < 2.5 {
        let (mut sum, mut term, mut n) = (x, x, 0.0);
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        let mut f = 0.0;
        for n in (1..80).rev() {
            f = (n as f64 / 2.0) / (a + f);
        }
        x.signum() * (1.0 - (-a * a).exp() / std::f64::consts::PI.sqrt() / (a + f))
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Two affine layers with GELU in between.
pub fn mlp2(l1: &Affine, l2: &Affine, x: &Rows) -> Rows {
    x.iter()
        .map(|r| l2.apply(&l1.apply(r).into_iter().map(gelu).collect::<Vec<_>>()))
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rows_rel_err(a: &Rows, b: &Rows) -> f64 {
    let fa: Vec<f64> = a.iter().flatten().copied().collect();
    let fb: Vec<f64> = b.iter().flatten().copied().collect();
    max_rel_err(&fa, &fb, 1e-12)
}

/// Overwrite every parameter with uniform values in `[-scale, scale)`.
pub fn randomize(reg: &ParamRegistry, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, e) in reg.iter() {
        let v = e.param.value();
        let data: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-scale..scale)).collect();
        e.param
            .set(&Tensor::from_vec(data, v.shape(), v.device()).unwrap())
            .unwrap();
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> BinaryMask {
    let data = (0..w * h).map(|_| rng.random_bool(p)).collect();
    BinaryMask::new(w, h, data).unwrap()
}

pub fn brute_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        inter += (*x && *y) as usize;
        sa += *x as usize;
        sb += *y as usize;
    }
    if sa + sb == 0 {
        100.0
    } else {
        200.0 * inter as f64 / (sa + sb) as f64
    }
}

fn on_pixels(m: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.data()[y * m.width() + x] {
                out.push((x, y));
            }
        }
    }
    out
}

fn directed(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let pb = on_pixels(b);
    on_pixels(a)
        .iter()
        .map(|&(x, y)| {
            pb.iter()
                .map(|&(u, v)| {
                    let dx = x as f64 - u as f64;
                    let dy = y as f64 - v as f64;
                    (dx * dx + dy * dy).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance by all-pairs search.
pub fn brute_hausdorff(a: &BinaryMask, b: &BinaryMask) -> f64 {
    directed(a, b).max(directed(b, a))
}
