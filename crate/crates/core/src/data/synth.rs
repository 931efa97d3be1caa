use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{SampleRecord, Split};
use crate::metrics::BinaryMask;

/// Speckle look: gamma-distributed multiplicative noise with unit mean.
const SPECKLE_LOOKS: f64 = 6.0;

/// Ultrasound-like samples: dark, depth-attenuated background with a bright
/// lobed elliptical lesion, soft boundary and multiplicative speckle. The
/// mask is the generating shape. Every sample is a pure function of
/// `(seed, index, size)`.
pub fn synth_ultrasound(n: usize, seed: u64, size: usize) -> Vec<SampleRecord> {
    (0..n).map(|i| synth_one(seed, i, size)).collect()
}

fn synth_one(seed: u64, index: usize, size: usize) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let s = size as f64;
    let cx = rng.random_range(0.4..0.6) * s;
    let cy = rng.random_range(0.4..0.6) * s;
    let a = rng.random_range(0.2..0.3) * s;
    let b = rng.random_range(0.2..0.3) * s;
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let lobes = rng.random_range(2..=4) as f64;
    let lobe_amp = rng.random_range(0.0..0.1);
    let lobe_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let edge = rng.random_range(0.03..0.06);
    let lesion = rng.random_range(0.6..0.75);
    let background = rng.random_range(0.12..0.22);
    let speckle = Gamma::new(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS).expect("valid gamma parameters");

    let (sin, cos) = theta.sin_cos();
    let mut image = Vec::with_capacity(size * size);
    let mut mask = BinaryMask::empty(size, size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            let rho = (u * u + v * v).sqrt();
            let boundary = 1.0 + lobe_amp * (lobes * v.atan2(u) + lobe_phase).sin();
            let inside = rho <= boundary;
            mask.set(x, y, inside);
            let blend = 1.0 / (1.0 + ((rho - boundary) / edge).exp());
            let depth = 1.0 - 0.35 * (y as f64 / s);
            let clean = (background * depth) * (1.0 - blend) + lesion * blend;
            let noisy = clean * speckle.sample(&mut rng);
            image.push(noisy.clamp(0.0, 1.0) as f32);
        }
    }
    SampleRecord {
        id: format!("synth-{seed}-{index}"),
        image,
        mask,
        size,
        dataset: "synthetic".into(),
        category: "lesion".into(),
        patient_id: None,
        split: Split::Train,
    }
}
