//! Finite-difference checks through the assembled model at tiny scale.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use samus::gradcheck::{check_gradients, projected_sum, random_projection, GradCheckOptions};
use samus::registry::{Component, ParamRegistry};
use samus::train::{segmentation_loss, LossWeights};
use samus::{Ablation, ModelConfig, Point, Prompt, Regime, Samus};

fn tiny() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        depth: 2,
        global_block_indices: vec![1],
        decoder_mlp_dim: 16,
        task_token_count: 2,
        ..ModelConfig::desk().with_embed_dim(8)
    }
}

fn image(rng: &mut ChaCha8Rng, b: usize) -> Tensor {
    let v: Vec<f64> = (0..b * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(v, (b, 1, 32, 32), &Device::Cpu).unwrap()
}

/// Perturb only the trainable parameters so zero-initialized projections
/// stop masking the layers behind them.
fn perturb_trainable(reg: &ParamRegistry, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in reg.trainable() {
        let v = p.value();
        let noise: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-0.2..0.2)).collect();
        let noise = Tensor::from_vec(noise, v.shape(), v.device()).unwrap();
        p.set(&(v + noise).unwrap()).unwrap();
    }
}

fn opts(eps: f64) -> GradCheckOptions {
    GradCheckOptions {
        max_entries: Some(3),
        eps,
        ..GradCheckOptions::default()
    }
}

#[test]
fn encoder_adaptation_gradients() {
    let model = Samus::new(tiny(), Ablation::all_on(), DType::F64, 4).unwrap();
    model.registry().apply_freeze_plan(Regime::SamusAdapt).unwrap();
    perturb_trainable(model.registry(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = image(&mut rng, 1);
    let r = random_projection(&model.encode_image(&img).unwrap(), 3).unwrap();
    let report = check_gradients(
        &model.registry().trainable(),
        || projected_sum(&model.encode_image(&img)?, &r),
        // Encoder gradients reach ~1e-6, where rounding in the summed output
        // outweighs truncation at smaller steps.
        opts(1e-4),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn end_to_end_loss_gradients_in_auto_mode() {
    let model = Samus::new(tiny(), Ablation::all_on(), DType::F64, 5).unwrap();
    model.registry().apply_freeze_plan(Regime::AutosamusApgOnly).unwrap();
    perturb_trainable(model.registry(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = image(&mut rng, 2);
    let gt: Vec<f64> = (0..2 * 32 * 32).map(|i| ((i % 32) > 12 && (i % 32) < 24) as u8 as f64).collect();
    let gt = Tensor::from_vec(gt, (2, 32, 32), &Device::Cpu).unwrap();
    let report = check_gradients(
        &model.registry().trainable(),
        || segmentation_loss(&model.forward(&img, &Prompt::Task(0))?.logits, &gt, LossWeights::default()),
        opts(GradCheckOptions::default().eps),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn decoder_gradients_with_point_prompts() {
    // The quality head does not feed the mask logits.
    let model = Samus::new(tiny(), Ablation::all_off(), DType::F64, 8).unwrap();
    for (name, e) in model.registry().iter() {
        e.param.set_trainable(e.component == Component::MaskDecoder && !name.contains("iou_prediction"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = image(&mut rng, 1);
    let emb = model.encode_image(&img).unwrap();
    let points = vec![vec![Point::foreground(11.0, 17.0)]];
    let probe = model.decode(&emb, &Prompt::Points(&points)).unwrap().low_res;
    let r = random_projection(&probe, 10).unwrap();
    let report = check_gradients(
        &model.registry().trainable(),
        || projected_sum(&model.decode(&emb, &Prompt::Points(&points))?.low_res, &r),
        opts(GradCheckOptions::default().eps),
    )
    .unwrap();
    assert!(report.checked > 0);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
