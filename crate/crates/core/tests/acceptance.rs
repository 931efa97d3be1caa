//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p samus-core --test acceptance`. The process exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Result};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use samus::apg::{AutoPromptGenerator, CouplingBlock};
use samus::cba::CrossBranchAttention;
use samus::config::ModelConfig;
use samus::data::{build_splits, synth_ultrasound, DatasetId, ManifestRow, SampleRecord, Split, SplitPlan};
use samus::gradcheck::{check_gradients, projected_sum, random_projection, GradCheckOptions};
use samus::metrics::{dice, hausdorff};
use samus::registry::{Component, Init, ParamBuilder, ParamRegistry, Regime};
use samus::train::{soft_dice_loss, train, write_reports, RunConfig, Trainer};
use samus::vit::{FeatureAdapter, PositionAdapter};
use samus::{Ablation, Error, Point, Prompt, PromptMode, Samus};

const GRAD_TOL: f64 = 1e-4;

fn f64_registry() -> ParamRegistry {
    ParamRegistry::new(DType::F64)
}

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Oracle equivalence

fn oracle_equivalence() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let instances = 120;
    let mut worst_cba: f64 = 0.0;
    let mut worst_couple: f64 = 0.0;
    for _ in 0..instances {
        let hw = rng.random_range(1..=9);
        let d = rng.random_range(1..=8);
        let dm = rng.random_range(1..=4);
        let mut reg = f64_registry();
        let mut init = ChaCha8Rng::seed_from_u64(rng.random());
        let cba = CrossBranchAttention::new(ParamBuilder::new(&mut reg, &mut init, Component::Cba), d, dm, 1, hw)?;
        randomize(&reg, &mut rng, 1.0);
        cba.rel_pos().set(&cba.rel_pos().value().zeros_like()?)?;
        let f_v = rand_rows(&mut rng, hw, d);
        let f_c = rand_rows(&mut rng, hw, d);
        let got = tensor_rows(&cba.forward(&rows_tensor(&f_v), &rows_tensor(&f_c))?);
        let q = Affine::of(cba.q()).apply_rows(&f_v);
        let k = Affine::of(cba.k()).apply_rows(&f_c);
        let v = Affine::of(cba.v()).apply_rows(&f_c);
        let want = Affine::of(cba.out()).apply_rows(&attention(&q, &k, &v, 1.0 / (dm as f64).sqrt()));
        worst_cba = worst_cba.max(rows_rel_err(&got, &want));

        let n = rng.random_range(1..=9);
        let m = rng.random_range(1..=9);
        let mut reg = f64_registry();
        let blk = CouplingBlock::new(ParamBuilder::new(&mut reg, &mut init, Component::Apg), d)?;
        randomize(&reg, &mut rng, 1.0);
        let a = rand_rows(&mut rng, n, d);
        let b = rand_rows(&mut rng, m, d);
        let got = tensor_rows(&blk.forward(&rows_tensor(&a), &rows_tensor(&b))?);
        let q = Affine::of(blk.wq()).apply_rows(&a);
        let k = Affine::of(blk.wk()).apply_rows(&b);
        let v = Affine::of(blk.wv()).apply_rows(&b);
        let layers = blk.mlp().layers();
        let want = mlp2(
            &Affine::of(&layers[0]),
            &Affine::of(&layers[1]),
            &attention(&q, &k, &v, 1.0 / (d as f64).sqrt()),
        );
        ensure!(got.len() == n, "coupling changed the row count");
        worst_couple = worst_couple.max(rows_rel_err(&got, &want));
    }
    ensure!(worst_cba < 1e-6, "CBA max rel err {worst_cba:e}");
    ensure!(worst_couple < 1e-6, "coupling max rel err {worst_couple:e}");
    Ok(format!(
        "{instances} instances each, max rel err CBA {worst_cba:.1e}, coupling {worst_couple:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness

fn grad_case(reg: &ParamRegistry, loss: impl Fn() -> samus::Result<Tensor>) -> Result<f64> {
    let opts = GradCheckOptions {
        max_entries: Some(16),
        ..GradCheckOptions::default()
    };
    let report = check_gradients(&reg.trainable(), loss, opts)?;
    ensure!(report.checked > 0, "nothing checked");
    ensure!(report.max_rel_err < GRAD_TOL, "max rel err {:e} at {}", report.max_rel_err, report.worst);
    Ok(report.max_rel_err)
}

fn gradient_correctness() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut init = ChaCha8Rng::seed_from_u64(7);
    let mut parts = Vec::new();

    // Feature adapter.
    let mut reg = f64_registry();
    let fa = FeatureAdapter::new(ParamBuilder::new(&mut reg, &mut init, Component::Adapter), 8, 2)?;
    randomize(&reg, &mut rng, 0.5);
    let x = rand_input(&mut rng, &[1, 3, 3, 8]);
    let r = random_projection(&x, 1)?;
    parts.push(("feature adapter", grad_case(&reg, || projected_sum(&fa.forward(&x)?, &r))?));

    // Position adapter, including the embedding it pools.
    let mut reg = f64_registry();
    let pa = PositionAdapter::new(ParamBuilder::new(&mut reg, &mut init, Component::Adapter), 4)?;
    let pos = ParamBuilder::new(&mut reg, &mut init, Component::Adapter).get("pos", &[1, 4, 4, 4], Init::Zeros)?;
    randomize(&reg, &mut rng, 1.0);
    let r = random_projection(&Tensor::zeros((1, 2, 2, 4), DType::F64, &Device::Cpu)?, 2)?;
    parts.push(("position adapter", grad_case(&reg, || projected_sum(&pa.forward(&pos.tensor())?, &r))?));

    // Cross-branch attention with a nonzero R.
    let mut reg = f64_registry();
    let cba = CrossBranchAttention::new(ParamBuilder::new(&mut reg, &mut init, Component::Cba), 8, 4, 2, 4)?;
    randomize(&reg, &mut rng, 0.5);
    let (f_v, f_c) = (rand_input(&mut rng, &[1, 4, 8]), rand_input(&mut rng, &[1, 4, 8]));
    let r = random_projection(&f_v, 3)?;
    parts.push(("CBA incl. R", grad_case(&reg, || projected_sum(&cba.forward(&f_v, &f_c)?, &r))?));

    // Coupling block.
    let mut reg = f64_registry();
    let blk = CouplingBlock::new(ParamBuilder::new(&mut reg, &mut init, Component::Apg), 8)?;
    randomize(&reg, &mut rng, 0.5);
    let (a, b) = (rand_input(&mut rng, &[1, 3, 8]), rand_input(&mut rng, &[1, 5, 8]));
    let r = random_projection(&a, 4)?;
    parts.push(("coupling", grad_case(&reg, || projected_sum(&blk.forward(&a, &b)?, &r))?));

    // Token update through both nested couplings and combiners (k = 2, d = 8).
    let cfg = ModelConfig {
        task_token_count: 2,
        ..ModelConfig::desk().with_embed_dim(8)
    }
    .validate()?;
    let mut reg = f64_registry();
    let apg = AutoPromptGenerator::new(ParamBuilder::new(&mut reg, &mut init, Component::Apg), &cfg)?;
    randomize(&reg, &mut rng, 0.5);
    reg.set_all_trainable(false);
    for (name, e) in reg.iter() {
        e.param.set_trainable(name.starts_with("tokens."));
    }
    let (t_t, t_o) = (rand_input(&mut rng, &[1, 2, 8]), rand_input(&mut rng, &[1, 5, 8]));
    let (r_t, r_o) = (random_projection(&t_t, 5)?, random_projection(&t_o, 6)?);
    parts.push((
        "token update",
        grad_case(&reg, || {
            let (a, b) = apg.update_tokens(&t_t, &t_o)?;
            Ok((projected_sum(&a, &r_t)? + projected_sum(&b, &r_o)?)?)
        })?,
    ));

    // Dense head.
    for (name, e) in reg.iter() {
        e.param.set_trainable(name.starts_with("dense."));
    }
    let grid = rand_input(&mut rng, &[1, 4, 4, 8]);
    let r = random_projection(&grid, 7)?;
    parts.push(("dense head", grad_case(&reg, || projected_sum(&apg.dense_head(&grid)?, &r))?));

    // Soft-Dice loss with respect to the logits.
    let mut reg = f64_registry();
    let logits = ParamBuilder::new(&mut reg, &mut init, Component::Apg).get("logits", &[2, 5, 5], Init::Zeros)?;
    randomize(&reg, &mut rng, 3.0);
    let gt: Vec<f64> = (0..50).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
    let gt = Tensor::from_vec(gt, (2, 5, 5), &Device::Cpu)?;
    parts.push(("soft-Dice", grad_case(&reg, || soft_dice_loss(&logits.tensor(), &gt))?));

    let worst = parts.iter().map(|p| p.1).fold(0.0, f64::max);
    let names: Vec<&str> = parts.iter().map(|p| p.0).collect();
    Ok(format!("{} checks ({}), worst rel err {worst:.1e}", parts.len(), names.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. Zero-init identity

fn zero_init_identity() -> Result<String> {
    let model = Samus::new(ModelConfig::desk(), Ablation::all_on(), DType::F64, 3)?;
    model.zero_output_projections()?;
    let s = model.config().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let images: Vec<f64> = (0..4 * s * s).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::from_vec(images, (4, 1, s, s), &Device::Cpu)?;
    let adapted = flat(&model.encode_image(&images)?);
    let backbone = flat(&model.backbone_embedding(&images)?);
    let differing = adapted.iter().zip(&backbone).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    ensure!(differing == 0, "{differing} of {} embedding values differ", adapted.len());

    let points: Vec<Vec<Point>> = (0..4).map(|i| vec![Point::foreground(10.0 + 8.0 * i as f64, 30.0)]).collect();
    let prompt = Prompt::Points(&points);
    let a = flat(&model.forward(&images, &prompt)?.logits);
    let b = flat(&model.decode(&model.backbone_embedding(&images)?, &prompt)?.logits);
    ensure!(
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
        "mask logits differ"
    );
    Ok(format!("4 images, {} embedding values and {} logits bit-identical", adapted.len(), a.len()))
}

// ---------------------------------------------------------------------------
// 4. Freeze contracts

fn freeze_contracts() -> Result<String> {
    let records = synth_ultrasound(8, 11, ModelConfig::desk().input_size);
    let batch: Vec<&SampleRecord> = records.iter().collect();
    let mut lines = Vec::new();
    for regime in [Regime::SamusAdapt, Regime::AutosamusApgOnly, Regime::AutosamusFull] {
        let run = RunConfig {
            regime,
            prompt_mode: if regime.uses_apg() { PromptMode::Auto } else { PromptMode::ManualPoint },
            ..RunConfig::default()
        };
        let model = Samus::with_tasks(ModelConfig::desk(), Ablation::all_on(), DType::F32, 5, vec!["lesion".into()])?;
        let before = model.registry().fingerprints()?;
        let decoder_tokens = model.mask_decoder().output_tokens()?.to_vec2::<f32>()?;
        let mut trainer = Trainer::new(run, model)?;
        for _ in 0..50 {
            trainer.step(&batch)?;
        }
        let reg = trainer.model().registry();
        let after = reg.fingerprints()?;
        let changed: BTreeSet<&str> = before
            .iter()
            .filter(|(n, h)| after[*n] != **h)
            .map(|(n, _)| n.as_str())
            .collect();
        ensure!(!changed.is_empty(), "{regime}: nothing trained");
        for name in &changed {
            let c = reg.get(name).unwrap().component;
            ensure!(regime.trains(c), "{regime}: frozen `{name}` ({c}) changed");
        }
        if regime == Regime::AutosamusApgOnly {
            ensure!(
                changed.iter().all(|n| reg.get(n).unwrap().component == Component::Apg),
                "non-APG parameter changed"
            );
        }
        ensure!(
            trainer.model().mask_decoder().output_tokens()?.to_vec2::<f32>()? == decoder_tokens,
            "{regime}: decoder output tokens changed"
        );
        let trainable = reg.trainable().len();
        lines.push(format!(
            "{regime} {}/{trainable} trainable changed, {} frozen intact",
            changed.len(),
            before.len() - trainable
        ));
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------------------
// 5. Shape ledger

fn shape_ledger() -> Result<String> {
    let cfg = ModelConfig::full_scale().validate()?;
    ensure!(cfg.input_size == 256 && cfg.patch_stride == 8);
    ensure!(cfg.grid_side() == 32, "grid side {}", cfg.grid_side());
    let model = Samus::new(cfg.clone(), Ablation::all_on(), DType::F32, 0)?;
    let d = cfg.embed_dim;
    let pos = model.vit().position_embedding()?;
    ensure!(pos.dims() == [1, 32, 32, d], "adapted position embedding {:?}", pos.dims());
    let stored = model.registry().param("image_encoder.pos_embed")?;
    ensure!(stored.shape().dims() == [1, 64, 64, d], "stored position embedding {:?}", stored.shape());
    let t_o = model.mask_decoder().output_tokens()?;
    ensure!(t_o.dims() == [5, d], "T_o {:?}", t_o.dims());
    let emb = Tensor::zeros((1, 32, 32, d), DType::F32, &Device::Cpu)?;
    let gen = model.generate_prompts(&emb, 0)?;
    let k = cfg.task_token_count;
    ensure!(gen.prompts.sparse.dims() == [1, k, d], "P_s {:?}", gen.prompts.sparse.dims());
    ensure!(gen.prompts.dense.dims() == [1, 32, 32, d], "P_d {:?}", gen.prompts.dense.dims());
    ensure!(gen.tokens.dims() == [1, k + 5, d]);
    ensure!(gen.image_embedding.dims() == [1, 32, 32, d]);
    Ok(format!("grid 32x32, pos 32x32 (from 64x64), P_s {k}x{d}, T_o 5x{d}"))
}

// ---------------------------------------------------------------------------
// 6. Metric and split oracles

fn manifest_rows(n: usize, patients: usize) -> Vec<ManifestRow> {
    (0..n)
        .map(|i| ManifestRow {
            path: format!("img/{i:04}.png"),
            mask_path: format!("mask/{i:04}.png"),
            patient_id: Some(format!("p{}", i % patients)),
            category: "lesion".into(),
            split: Some(if i % patients < patients * 3 / 4 { Split::Train } else { Split::Test }),
        })
        .collect()
}

fn metric_and_split_oracles() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_hd: f64 = 0.0;
    for _ in 0..200 {
        let (pa, pb) = (rng.random_range(0.02..0.7), rng.random_range(0.02..0.7));
        let a = random_mask(&mut rng, 16, 16, pa);
        let mut b = random_mask(&mut rng, 16, 16, pb);
        if b.is_empty() {
            b.set(3, 4, true);
        }
        let got = dice(&a, &b)?;
        ensure!(got == brute_dice(&a, &b), "dice {got} vs {}", brute_dice(&a, &b));
        if !a.is_empty() {
            worst_hd = worst_hd.max((hausdorff(&a, &b)? - brute_hausdorff(&a, &b)).abs());
        }
    }
    ensure!(worst_hd <= 1e-9, "hausdorff abs err {worst_hd:e}");

    let plan = SplitPlan::standard(9);
    let rows = manifest_rows(780, 780);
    let busi = build_splits(&rows, plan.rule(DatasetId::Busi)?, plan.seed, None)?;
    let count = |s: Split| busi.iter().filter(|x| **x == s).count();
    let counts = (count(Split::Train), count(Split::Val), count(Split::Test));
    ensure!(counts == (546, 78, 156), "BUSI counts {counts:?}");
    ensure!(busi == build_splits(&rows, plan.rule(DatasetId::Busi)?, 9, None)?, "not seed-deterministic");
    ensure!(busi != build_splits(&rows, plan.rule(DatasetId::Busi)?, 10, None)?, "seed ignored");

    let rows = manifest_rows(400, 40);
    let camus = build_splits(&rows, plan.rule(DatasetId::Camus)?, plan.seed, None)?;
    ensure!(camus.len() == rows.len(), "CAMUS not exhaustive");
    for p in 0..40 {
        let ids: BTreeSet<Split> = rows
            .iter()
            .zip(&camus)
            .filter(|(r, _)| r.patient_id.as_deref() == Some(&format!("p{p}")))
            .map(|(_, s)| *s)
            .collect();
        ensure!(ids.len() == 1, "patient p{p} straddles splits {ids:?}");
    }
    ensure!(camus.contains(&Split::Val), "CAMUS has no val patients");
    Ok(format!("200 mask pairs (hd err {worst_hd:.0e}); BUSI 546/78/156 of 780; CAMUS patient-disjoint"))
}

// ---------------------------------------------------------------------------
// 7. Learning capability

fn learning_capability() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let start = Instant::now();
    let adapt = RunConfig {
        target_train_dice: Some(95.0),
        max_steps: 2000,
        epochs: 2000,
        ..RunConfig::default()
    };
    let out = dir.path().join("adapt");
    std::fs::create_dir_all(&out)?;
    let a = train(&adapt, Some(&out))?;
    ensure!(a.config.model.input_size == 64 && a.config.model.embed_dim == 32);
    ensure!(
        a.best_train_dice() >= 95.0,
        "adapted model reached train Dice {:.2} in {} steps",
        a.best_train_dice(),
        a.steps
    );
    let ckpt = a.checkpoint_path.clone().ok_or_else(|| anyhow!("no checkpoint written"))?;
    let apg = RunConfig {
        regime: Regime::AutosamusApgOnly,
        prompt_mode: PromptMode::Auto,
        init_checkpoint: Some(ckpt),
        target_train_dice: Some(85.0),
        ..adapt
    };
    let out = dir.path().join("apg");
    std::fs::create_dir_all(&out)?;
    let b = train(&apg, Some(&out))?;
    ensure!(
        b.best_train_dice() >= 85.0,
        "auto-prompt model reached train Dice {:.2} in {} steps",
        b.best_train_dice(),
        b.steps
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!(
        "manual-point Dice {:.2} after {} steps; auto-prompt Dice {:.2} after {} steps",
        a.best_train_dice(),
        a.steps,
        b.best_train_dice(),
        b.steps
    ))
}

// ---------------------------------------------------------------------------
// 8. Ablation harness

fn ablation_harness() -> Result<String> {
    let dir = tempfile::tempdir()?;
    for (i, ablation) in Ablation::table_rows().into_iter().enumerate() {
        let run = RunConfig {
            ablation,
            max_steps: 1,
            epochs: 1,
            synthetic_count: 4,
            batch_size: 4,
            ..RunConfig::default()
        };
        let out = dir.path().join(format!("row{i}"));
        std::fs::create_dir_all(&out)?;
        let rec = train(&run, Some(&out))?;
        ensure!(rec.steps == 1, "{}: {} steps", ablation.label(), rec.steps);
        ensure!(rec.final_report.rows.len() == 1);
    }
    write_reports(dir.path())?;
    let table = std::fs::read_to_string(dir.path().join("ablation.csv"))?;
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap_or("")).collect();
    let want: Vec<String> = Ablation::table_rows().iter().map(Ablation::label).collect();
    ensure!(labels == want, "ablation table rows {labels:?}");

    let bad = Ablation {
        cnn_branch: false,
        cba: true,
        ..Ablation::all_off()
    };
    let run = RunConfig {
        ablation: bad,
        ..RunConfig::default()
    };
    match run.validate() {
        Err(Error::RunConfig(_)) => {}
        other => bail!("cba without cnn accepted by the run config: {other:?}"),
    }
    ensure!(Samus::new(ModelConfig::desk(), bad, DType::F32, 0).is_err(), "model built cba without cnn");
    Ok(format!("6 combinations trained and tabulated ({})", want.join(" | ")))
}

fn main() {
    let criteria: [(&str, fn() -> Result<String>); 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient correctness", gradient_correctness),
        ("zero-init identity", zero_init_identity),
        ("freeze contracts", freeze_contracts),
        ("shape ledger", shape_ledger),
        ("metric and split oracles", metric_and_split_oracles),
        ("learning capability", learning_capability),
        ("ablation harness", ablation_harness),
    ];
    let budgets = [10.0, 60.0, f64::INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY, 600.0, f64::INFINITY];
    let mut failed = 0;
    for (i, ((name, f), budget)) in criteria.into_iter().zip(budgets).enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > budget => Err(anyhow!("{detail}; over the {budget:.0} s budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.2} s]", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name}: {e:#} [{secs:.2} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
