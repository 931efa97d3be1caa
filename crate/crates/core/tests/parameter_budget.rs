//! The CNN branch stays small next to the ViT branch.

use candle_core::DType;
use samus::{Ablation, Component, ModelConfig, Samus};

fn cnn_to_vit_ratio(cfg: ModelConfig) -> f64 {
    let model = Samus::new(cfg, Ablation::all_on(), DType::F32, 0).unwrap();
    let reg = model.registry();
    let (cnn, vit) = (reg.count(Some(Component::Cnn)), reg.count(Some(Component::Vit)));
    cnn as f64 / vit as f64
}

#[test]
fn cnn_branch_under_five_percent_at_full_scale() {
    let ratio = cnn_to_vit_ratio(ModelConfig::full_scale());
    println!("full scale cnn/vit parameters: {:.2}%", 100.0 * ratio);
    assert!(ratio < 0.05, "cnn/vit = {ratio:.4}");
}

#[test]
fn cnn_branch_under_five_percent_at_desk_scale() {
    let ratio = cnn_to_vit_ratio(ModelConfig::desk());
    println!("desk cnn/vit parameters: {:.2}%", 100.0 * ratio);
    assert!(ratio < 0.05, "cnn/vit = {ratio:.4}");
}
