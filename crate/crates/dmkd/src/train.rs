//! Training loops: supervised teacher/student fitting and the distillation
//! run that pairs them, plus evaluation. One shared epoch engine guarantees
//! that a distillation run with γ = 0 executes exactly the same tensor
//! arithmetic as plain supervised training — the reduction is structural,
//! not approximate.
//!
//! ```
//! use dmkd::data::generate_dataset;
//! use dmkd::train::{supervised_run, TrainConfig};
//!
//! let dataset = generate_dataset(7, 12, 6)?;
//! let tcfg = TrainConfig {
//!     epochs: 1,
//!     batch_size: 4,
//!     n_train: 12,
//!     n_test: 6,
//!     ..TrainConfig::default()
//! };
//! let (_student, report) = supervised_run(&dataset, &tcfg, 1)?;
//! assert_eq!(report.epochs.len(), 1);
//! assert!((0.0..=1.0).contains(&report.final_test_accuracy));
//! # Ok::<(), dmkd::DmkdError>(())
//! ```

use rand::Rng;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockSet;
use crate::data::SyntheticDataset;
use crate::distill::{
    dmkd_level, overall_loss, tap_view, trainable_block_params, DistillConfig, LevelPair,
};
use crate::error::{DmkdError, Result};
use crate::model::{ToyModel, STUDENT_WIDTH, TEACHER_WIDTH};
use crate::report::{EpochRecord, RunReport};
use crate::rng::{stream_rng, Stream};
use crate::tensor::autograd::no_grad;
use crate::tensor::{Sgd, Tensor};

/// Schedule knobs shared by every run kind. Loss-side knobs live in
/// [`DistillConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig { epochs: 20, lr: 0.05, momentum: 0.9, batch_size: 32, n_train: 1024, n_test: 256 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DmkdError::ConfigInvalid(msg));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".to_string());
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad(format!("split sizes must be positive, got {}/{}", self.n_train, self.n_test));
        }
        Ok(())
    }
}

/// What one optimizer step saw: batch-mean losses, training hits, and the
/// batch-mean mask ratios.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub task_loss: f64,
    pub distill_loss: f64,
    pub mask_ratio_s: f64,
    pub mask_ratio_c: f64,
    pub correct: usize,
    pub batch_len: usize,
}

struct DistillState<'a> {
    teacher: &'a ToyModel,
    blocks: &'a BlockSet,
    cfg: &'a DistillConfig,
}

/// One optimizer step over `batch` (indices into the dataset's train split).
/// With `distill` absent — or γ = 0 — this is a plain supervised step; the
/// distillation branch is never built, not merely weighted to nothing.
/// When it is built, the teacher's side of each level comes from `taps`,
/// indexed by training-example position.
fn distill_step(
    dataset: &SyntheticDataset,
    batch: &[usize],
    student: &ToyModel,
    distill: Option<&DistillState<'_>>,
    taps: &[Tensor],
    mask_rng: &mut impl Rng,
    opt: &mut Sgd,
    params: &[Tensor],
) -> Result<StepStats> {
    let active = distill.filter(|d| d.cfg.gamma > 0.0);
    let mut total: Option<Tensor> = None;
    let mut task_sum = 0.0;
    let mut distill_sum = 0.0;
    let mut ratio_s_sum = 0.0;
    let mut ratio_c_sum = 0.0;
    let mut correct = 0usize;

    for &index in batch {
        let image = dataset.image(index);
        let label = dataset.label(index);
        let (feature, logits) = student.forward(&image)?;
        if argmax(&logits.to_vec()) == label {
            correct += 1;
        }
        let task = logits.cross_entropy(label)?;
        task_sum += task.item();

        let image_loss = match active {
            None => overall_loss(&task, &[], 0.0)?,
            Some(state) => {
                let level =
                    LevelPair { student: feature, teacher: taps[index].clone(), level_index: 0 };
                let outcome = dmkd_level(&level, state.cfg, state.blocks, mask_rng)?;
                distill_sum += outcome.loss.item();
                ratio_s_sum += outcome.mask_ratio_s;
                ratio_c_sum += outcome.mask_ratio_c;
                overall_loss(&task, &[outcome.loss], state.cfg.gamma)?
            }
        };
        total = Some(match total {
            None => image_loss,
            Some(t) => t.add(&image_loss)?,
        });
    }

    let n = batch.len();
    let batch_loss = total.expect("batches are non-empty").scale(1.0 / n as f64);
    batch_loss.backward()?;
    opt.step(params)?;

    Ok(StepStats {
        task_loss: task_sum / n as f64,
        distill_loss: distill_sum / n as f64,
        mask_ratio_s: ratio_s_sum / n as f64,
        mask_ratio_c: ratio_c_sum / n as f64,
        correct,
        batch_len: n,
    })
}

/// Mean cross-entropy and accuracy over `indices`, with no graph recorded.
pub fn evaluate(
    model: &ToyModel,
    dataset: &SyntheticDataset,
    indices: std::ops::Range<usize>,
) -> Result<(f64, f64)> {
    no_grad(|| {
        let n = indices.len();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for index in indices {
            let (_, logits) = model.forward(&dataset.image(index))?;
            loss_sum += logits.cross_entropy(dataset.label(index))?.item();
            if argmax(&logits.to_vec()) == dataset.label(index) {
                correct += 1;
            }
        }
        Ok((loss_sum / n as f64, correct as f64 / n as f64))
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// In-place Fisher–Yates. Hand-rolled so the exact draw sequence — which the
/// bitwise-reproducibility guarantees depend on — is pinned in this crate.
fn shuffle_indices(indices: &mut [usize], rng: &mut impl Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

fn fit(
    mode: &str,
    dataset: &SyntheticDataset,
    model: &ToyModel,
    distill: Option<DistillState<'_>>,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<RunReport> {
    tcfg.validate()?;
    if let Some(state) = &distill {
        state.cfg.validate()?;
    }
    if dataset.n_train < tcfg.n_train || dataset.n_test < tcfg.n_test {
        return Err(DmkdError::ConfigInvalid(format!(
            "dataset provides {}/{} examples, config asks for {}/{}",
            dataset.n_train, dataset.n_test, tcfg.n_train, tcfg.n_test
        )));
    }
    let start = std::time::Instant::now();

    let mut params = model.params();
    if let Some(state) = &distill {
        if state.cfg.gamma > 0.0 {
            params.extend(trainable_block_params(state.blocks, state.cfg.variant));
        }
    }

    // The teacher is frozen for the whole run, so its tap for a given image
    // never changes: compute every tap once, through [`tap_view`], under
    // `no_grad`, instead of re-running the teacher each epoch.
    let taps: Vec<Tensor> = match &distill {
        Some(state) if state.cfg.gamma > 0.0 => no_grad(|| -> Result<Vec<Tensor>> {
            (0..tcfg.n_train)
                .map(|index| Ok(tap_view(&state.teacher.forward(&dataset.image(index))?.0)))
                .collect()
        })?,
        _ => Vec::new(),
    };

    let mut opt = Sgd::new(tcfg.lr, tcfg.momentum);
    let mut shuffle_rng = stream_rng(seed, Stream::BatchShuffle);
    let mut mask_rng = stream_rng(seed, Stream::RandomMask);

    let test_range = dataset.n_train..dataset.n_train + tcfg.n_test;
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..tcfg.n_train).collect();
        shuffle_indices(&mut order, &mut shuffle_rng);

        let mut task_sum = 0.0;
        let mut distill_sum = 0.0;
        let mut ratio_s_sum = 0.0;
        let mut ratio_c_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            let stats = distill_step(
                dataset,
                batch,
                model,
                distill.as_ref(),
                &taps,
                &mut mask_rng,
                &mut opt,
                &params,
            )?;
            task_sum += stats.task_loss * stats.batch_len as f64;
            distill_sum += stats.distill_loss * stats.batch_len as f64;
            ratio_s_sum += stats.mask_ratio_s * stats.batch_len as f64;
            ratio_c_sum += stats.mask_ratio_c * stats.batch_len as f64;
            correct += stats.correct;
        }

        let n = tcfg.n_train as f64;
        let (test_task_loss, test_accuracy) = evaluate(model, dataset, test_range.clone())?;
        epochs.push(EpochRecord {
            epoch,
            train_task_loss: task_sum / n,
            train_accuracy: correct as f64 / n,
            test_task_loss,
            test_accuracy,
            mean_distill_loss: distill_sum / n,
            mean_mask_ratio_s: ratio_s_sum / n,
            mean_mask_ratio_c: ratio_c_sum / n,
        });
    }

    let final_test_accuracy = match epochs.last() {
        Some(record) => record.test_accuracy,
        None => evaluate(model, dataset, test_range)?.1,
    };
    Ok(RunReport {
        mode: mode.to_string(),
        seed,
        train: tcfg.clone(),
        distill: distill.map(|state| state.cfg.clone()),
        epochs,
        final_test_accuracy,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Supervised training of a fresh width-8 teacher.
pub fn train_teacher(
    dataset: &SyntheticDataset,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(ToyModel, RunReport)> {
    let model = ToyModel::new(TEACHER_WIDTH, &mut stream_rng(seed, Stream::TeacherInit));
    let report = fit("train-teacher", dataset, &model, None, tcfg, seed)?;
    Ok((model, report))
}

/// Supervised training of a fresh width-4 student — the γ = 0 reference the
/// distillation runs are measured against.
pub fn supervised_run(
    dataset: &SyntheticDataset,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(ToyModel, RunReport)> {
    let model = ToyModel::new(STUDENT_WIDTH, &mut stream_rng(seed, Stream::StudentInit));
    let report = fit("supervised", dataset, &model, None, tcfg, seed)?;
    Ok((model, report))
}

/// Distillation: freeze the teacher, train a fresh student plus
/// reconstruction blocks under the configured variant.
pub fn distill_run(
    teacher: &ToyModel,
    dataset: &SyntheticDataset,
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
) -> Result<(ToyModel, BlockSet, RunReport)> {
    dcfg.validate()?;
    teacher.freeze();
    let seed = dcfg.seed;
    let student = ToyModel::new(STUDENT_WIDTH, &mut stream_rng(seed, Stream::StudentInit));
    let blocks = BlockSet::new(
        student.width(),
        teacher.width(),
        dcfg.alpha_init,
        dcfg.beta_init,
        &mut stream_rng(seed, Stream::BlockInit),
    );
    let state = DistillState { teacher, blocks: &blocks, cfg: dcfg };
    let report = fit("distill", dataset, &student, Some(state), tcfg, seed)?;
    Ok((student, blocks, report))
}
