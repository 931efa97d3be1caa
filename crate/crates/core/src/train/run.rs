use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{segmentation_loss, Adam, RunConfig};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{load_dataset, synth_ultrasound, DatasetId, SampleRecord, Split, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{dice, sample_point_prompt, BinaryMask, HdVariant, MetricAccumulator, MetricReport};
use crate::model::{Prompt, PromptMode, Samus};
use crate::sam_head::Point;

pub const SYNTHETIC: &str = "synthetic";

/// `(b, 1, S, S)` images and `(b, S, S)` 0/1 targets.
pub fn batch_tensors(records: &[&SampleRecord], dtype: DType) -> Result<(Tensor, Tensor)> {
    let size = records
        .first()
        .map(|r| r.size)
        .ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let b = records.len();
    let mut img = Vec::with_capacity(b * size * size);
    let mut gt = Vec::with_capacity(b * size * size);
    for r in records {
        if r.size != size {
            return Err(Error::Dataset("mixed image sizes in one batch".into()));
        }
        img.extend_from_slice(&r.image);
        gt.extend(r.mask.to_f32());
    }
    let dev = Device::Cpu;
    Ok((
        Tensor::from_vec(img, (b, 1, size, size), &dev)?.to_dtype(dtype)?,
        Tensor::from_vec(gt, (b, size, size), &dev)?.to_dtype(dtype)?,
    ))
}

/// Training + evaluation records for the selected datasets.
pub fn load_records(run: &RunConfig) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for name in &run.datasets {
        if name.eq_ignore_ascii_case(SYNTHETIC) {
            out.extend(synth_ultrasound(run.synthetic_count, run.seed, run.model.input_size));
        } else {
            let id: DatasetId = name.parse()?;
            out.extend(load_dataset(&run.data_root, id, &SplitPlan::standard(run.seed), run.model.input_size)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset("selected datasets hold no records".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    /// Mean Dice (%) of the thresholded logits of this step.
    pub dice: f64,
}

/// Owns a model and its optimizer under one tuning regime.
pub struct Trainer {
    model: Samus,
    adam: Adam,
    run: RunConfig,
}

impl Trainer {
    /// Applies the run's freeze plan to `model`.
    pub fn new(run: RunConfig, model: Samus) -> Result<Self> {
        let run = run.validate()?;
        model.registry().apply_freeze_plan(run.regime)?;
        Ok(Self {
            adam: Adam::new(run.optimizer),
            model,
            run,
        })
    }

    pub fn model(&self) -> &Samus {
        &self.model
    }

    pub fn into_model(self) -> Samus {
        self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn run(&self) -> &RunConfig {
        &self.run
    }

    fn prompt_points(&self, batch: &[&SampleRecord]) -> Result<Vec<Vec<Point>>> {
        batch.iter().map(|r| Ok(vec![sample_point_prompt(&r.mask)?])).collect()
    }

    fn batch_task(&self, batch: &[&SampleRecord]) -> Result<usize> {
        let first = self.model.task_id(&batch[0].category)?;
        if batch.iter().any(|r| r.category != batch[0].category) {
            return Err(Error::Dataset("auto-prompt batches must share one task".into()));
        }
        Ok(first)
    }

    /// Logits `(b, S, S)` and targets for a batch.
    pub fn forward(&self, batch: &[&SampleRecord]) -> Result<(Tensor, Tensor)> {
        let (img, gt) = batch_tensors(batch, self.model.dtype())?;
        let pred = match self.run.prompt_mode {
            PromptMode::ManualPoint => {
                let pts = self.prompt_points(batch)?;
                self.model.forward(&img, &Prompt::Points(&pts))?
            }
            PromptMode::Auto => self.model.forward(&img, &Prompt::Task(self.batch_task(batch)?))?,
        };
        Ok((pred.logits, gt))
    }

    /// Loss gradients for a batch without updating anything.
    pub fn gradients(&self, batch: &[&SampleRecord]) -> Result<(GradStore, StepStats)> {
        let (logits, gt) = self.forward(batch)?;
        let loss = segmentation_loss(&logits, &gt, self.run.loss)?;
        let stats = StepStats {
            loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            dice: batch_dice(&logits, batch)?,
        };
        Ok((loss.backward()?, stats))
    }

    pub fn step(&mut self, batch: &[&SampleRecord]) -> Result<StepStats> {
        let (grads, stats) = self.gradients(batch)?;
        self.adam.step(self.model.registry(), &grads)?;
        Ok(stats)
    }

    /// Loss and Dice without an update.
    pub fn measure(&self, batch: &[&SampleRecord]) -> Result<StepStats> {
        let (logits, gt) = self.forward(batch)?;
        let loss = segmentation_loss(&logits, &gt, self.run.loss)?;
        Ok(StepStats {
            loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            dice: batch_dice(&logits, batch)?,
        })
    }
}

fn batch_dice(logits: &Tensor, batch: &[&SampleRecord]) -> Result<f64> {
    let logits = logits.detach();
    let mut sum = 0.0;
    for (i, r) in batch.iter().enumerate() {
        let pred = BinaryMask::from_tensor(&logits.get(i)?, 0.0)?;
        sum += dice(&pred, &r.mask)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Batches of record indices. In auto mode each batch holds one task.
fn make_batches(records: &[&SampleRecord], order: &[usize], batch_size: usize, by_task: bool) -> Vec<Vec<usize>> {
    if !by_task {
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in order {
        groups.entry(records[i].category.as_str()).or_default().push(i);
    }
    groups
        .values()
        .flat_map(|g| g.chunks(batch_size).map(<[usize]>::to_vec))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub steps: usize,
    /// Running means over the epoch's batches, each measured before its update.
    pub train_loss: f64,
    pub train_dice: f64,
    /// Training-set Dice of the end-of-epoch weights. Measured when there is
    /// no validation split or a Dice target is set.
    pub end_train_dice: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub task_names: Vec<String>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub final_report: MetricReport,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
}

impl RunRecord {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Largest training-set Dice of any end-of-epoch weights.
    pub fn best_train_dice(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.end_train_dice.unwrap_or(e.train_dice))
            .fold(0.0, f64::max)
    }
}

fn build_model(run: &RunConfig, records: &[SampleRecord]) -> Result<Samus> {
    let dtype = if run.double_precision { DType::F64 } else { DType::F32 };
    if let Some(path) = &run.init_checkpoint {
        let ck = Checkpoint::load(path)?;
        let model = ck.build_model(dtype)?;
        let mut expected = run.model.clone().validate()?;
        expected.num_tasks = model.config().num_tasks;
        if model.config() != &expected {
            return Err(Error::Checkpoint(format!(
                "{} was built with a different model config",
                path.display()
            )));
        }
        if model.ablation() != run.ablation {
            return Err(Error::Checkpoint(format!(
                "{} holds ablation `{}`, run asks for `{}`",
                path.display(),
                model.ablation().label(),
                run.ablation.label()
            )));
        }
        return Ok(model);
    }
    let tasks: Vec<String> = records
        .iter()
        .map(|r| r.category.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut cfg = run.model.clone();
    cfg.num_tasks = tasks.len();
    Samus::with_tasks(cfg, run.ablation, dtype, run.seed, tasks)
}

/// Full training run. Writes `best.ckpt` and `run.json` into `out_dir`
/// when given.
pub fn train(run: &RunConfig, out_dir: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    let run = run.clone().validate()?;
    let records = load_records(&run)?;
    let model = build_model(&run, &records)?;
    let mut trainer = Trainer::new(run.clone(), model)?;
    let train_set: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    let val_set: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Val).collect();
    if train_set.is_empty() {
        return Err(Error::Dataset("no training records".into()));
    }
    let by_task = run.prompt_mode == PromptMode::Auto;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::new();
    let mut steps = 0usize;
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..run.epochs {
        if steps >= run.max_steps {
            break;
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut dice_sum, mut seen) = (0.0, 0.0, 0usize);
        for batch in make_batches(&train_set, &order, run.batch_size, by_task) {
            if steps >= run.max_steps {
                break;
            }
            let recs: Vec<&SampleRecord> = batch.iter().map(|&i| train_set[i]).collect();
            let s = trainer.step(&recs)?;
            loss_sum += s.loss * recs.len() as f64;
            dice_sum += s.dice * recs.len() as f64;
            seen += recs.len();
            steps += 1;
        }
        if seen == 0 {
            break;
        }
        let (train_loss, train_dice) = (loss_sum / seen as f64, dice_sum / seen as f64);
        let measure_all = |set: &[&SampleRecord]| -> Result<(f64, f64)> {
            let (mut l, mut d) = (0.0, 0.0);
            let order: Vec<usize> = (0..set.len()).collect();
            for batch in make_batches(set, &order, run.batch_size, by_task) {
                let recs: Vec<&SampleRecord> = batch.iter().map(|&i| set[i]).collect();
                let s = trainer.measure(&recs)?;
                l += s.loss * recs.len() as f64;
                d += s.dice * recs.len() as f64;
            }
            Ok((l / set.len() as f64, d / set.len() as f64))
        };
        let (val_loss, val_dice) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, d) = measure_all(&val_set)?;
            (Some(l), Some(d))
        };
        let end_train_dice = if val_set.is_empty() || run.target_train_dice.is_some() {
            Some(measure_all(&train_set)?.1)
        } else {
            None
        };
        let reached = end_train_dice.unwrap_or(train_dice);
        let score = val_dice.unwrap_or(reached);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            let mut ck = Checkpoint::from_model(trainer.model());
            ck.seeds.insert("data".into(), run.seed);
            ck.optimizer = Some(trainer.optimizer().state());
            best = Some((score, epoch, ck));
        }
        info!(
            "epoch {epoch} step {steps} loss {train_loss:.4} dice {reached:.2}{}",
            val_dice.map_or(String::new(), |v| format!(" val dice {v:.2}"))
        );
        epochs.push(EpochRecord {
            epoch,
            steps,
            train_loss,
            train_dice,
            end_train_dice,
            val_loss,
            val_dice,
        });
        if run.target_train_dice.is_some_and(|t| reached >= t) {
            break;
        }
    }

    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    let mut checkpoint_path = None;
    if let Some((_, _, ck)) = &best {
        ck.load_into(trainer.model().registry())?;
        if let Some(dir) = out_dir {
            let path = dir.join("best.ckpt");
            ck.save(&path)?;
            checkpoint_path = Some(path);
        }
    }
    let model = trainer.model();
    let test_groups = group_by_dataset(records.iter().filter(|r| r.split == Split::Test));
    let groups = if test_groups.is_empty() {
        group_by_dataset(train_set.iter().copied())
    } else {
        test_groups
    };
    let predictor = ModelPredictor::new(model, run.prompt_mode);
    let final_report = evaluate(&predictor, &groups, run.hd_variant)?;
    let record = RunRecord {
        task_names: model.task_names().to_vec(),
        trainable_params: model.registry().trainable().iter().map(|(_, p)| p.elem_count()).sum(),
        total_params: model.registry().count(None),
        config: run,
        epochs,
        steps,
        best_epoch,
        final_report,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint_path,
    };
    if let Some(dir) = out_dir {
        record.save(dir.join("run.json"))?;
    }
    Ok(record)
}

fn group_by_dataset<'a>(records: impl Iterator<Item = &'a SampleRecord>) -> Vec<(String, Vec<&'a SampleRecord>)> {
    let mut groups: BTreeMap<String, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.dataset.clone()).or_default().push(r);
    }
    groups.into_iter().collect()
}

/// Produces a binary prediction for one record.
pub trait Predictor {
    fn predict(&self, record: &SampleRecord) -> Result<BinaryMask>;
}

/// Thresholded model logits under a fixed prompt rule.
pub struct ModelPredictor<'a> {
    model: &'a Samus,
    mode: PromptMode,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Samus, mode: PromptMode) -> Self {
        Self { model, mode }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, record: &SampleRecord) -> Result<BinaryMask> {
        match self.mode {
            PromptMode::ManualPoint => {
                let pts = vec![vec![sample_point_prompt(&record.mask)?]];
                self.model.segment(&record.image, &Prompt::Points(&pts))
            }
            PromptMode::Auto => self
                .model
                .segment(&record.image, &Prompt::Task(self.model.task_id(&record.category)?)),
        }
    }
}

/// Debug hook: returns the ground truth itself.
pub struct GroundTruthPredictor;

impl Predictor for GroundTruthPredictor {
    fn predict(&self, record: &SampleRecord) -> Result<BinaryMask> {
        Ok(record.mask.clone())
    }
}

/// Per-dataset Dice/HD in the given group order.
pub fn evaluate(
    predictor: &dyn Predictor,
    groups: &[(String, Vec<&SampleRecord>)],
    variant: HdVariant,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(groups.len());
    for (name, recs) in groups {
        let mut acc = MetricAccumulator::new(name.clone(), variant);
        for r in recs {
            acc.add(&predictor.predict(r)?, &r.mask)?;
        }
        rows.push(acc.finish());
    }
    Ok(MetricReport {
        hd_variant: variant,
        rows,
    })
}

/// Evaluates a saved model on the test split of each dataset (every
/// generated sample for `synthetic`, regenerated from the checkpoint's
/// data seed).
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    datasets: &[String],
    data_root: &Path,
    mode: PromptMode,
    variant: HdVariant,
    synthetic_count: usize,
) -> Result<MetricReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.build_model(DType::F32)?;
    let size = model.config().input_size;
    let seed = ck.seeds.get("data").copied().unwrap_or(0);
    let mut owned: Vec<(String, Vec<SampleRecord>)> = Vec::new();
    for name in datasets {
        if name.eq_ignore_ascii_case(SYNTHETIC) {
            owned.push((SYNTHETIC.into(), synth_ultrasound(synthetic_count, seed, size)));
        } else {
            let id: DatasetId = name.parse()?;
            let recs: Vec<_> = load_dataset(data_root, id, &SplitPlan::standard(seed), size)?
                .into_iter()
                .filter(|r| r.split == Split::Test)
                .collect();
            owned.push((id.to_string(), recs));
        }
    }
    let groups: Vec<(String, Vec<&SampleRecord>)> =
        owned.iter().map(|(n, r)| (n.clone(), r.iter().collect())).collect();
    evaluate(&ModelPredictor::new(&model, mode), &groups, variant)
}
