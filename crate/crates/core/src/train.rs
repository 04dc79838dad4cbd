//! Balanced multi-task training with the single reconstruction loss, Adam
//! updates, validation, checkpointing and per-step logs.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::Split;
use crate::nn::model::image_to_planar;
use crate::nn::{save_checkpoint, Model, ModelConfig, Scalar};
use crate::rng::{derive_seed, stream};
use crate::tasks::{build_episode, Corpus, Episode, EpisodeOptions, PoolEntry, TaskPool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub context_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Overrides the epoch-derived step count.
    pub max_steps: Option<usize>,
    pub recolor_enabled: bool,
    pub min_nonempty_context_masks: usize,
    pub max_retries: usize,
    pub seed: u64,
    /// Validate every this many steps (0: only after the last step).
    pub val_every: usize,
    /// Validation episodes per task.
    pub val_episodes: usize,
    pub lr_schedule: LrSchedule,
    /// Final learning rate of a decaying schedule, as a fraction of `learning_rate`.
    pub lr_floor: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` down to `lr_floor * learning_rate`.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            context_size: 6,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 2,
            max_steps: None,
            recolor_enabled: false,
            min_nonempty_context_masks: 2,
            max_retries: 50,
            seed: 0,
            val_every: 0,
            val_episodes: 2,
            lr_schedule: LrSchedule::Constant,
            lr_floor: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be finite and non-negative"
                )))
            }
        };
        if self.batch_size == 0 || self.context_size == 0 {
            return Err(Error::Config(
                "batch_size and context_size must be positive".into(),
            ));
        }
        if self.min_nonempty_context_masks > self.context_size {
            return Err(Error::Config(format!(
                "min_nonempty_context_masks {} exceeds context_size {}",
                self.min_nonempty_context_masks, self.context_size
            )));
        }
        positive(self.learning_rate, "learning_rate")?;
        positive(self.adam_eps, "adam_eps")?;
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config(format!(
                "lr_floor {} outside [0, 1]",
                self.lr_floor
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn episode_options(
        &self,
        unseen_foreground: [u8; 3],
        min_color_distance: f64,
    ) -> EpisodeOptions {
        EpisodeOptions {
            context_size: self.context_size,
            min_nonempty: self.min_nonempty_context_masks,
            recolor: self.recolor_enabled,
            min_color_distance,
            max_retries: self.max_retries,
            unseen_foreground,
        }
    }

    /// Learning rate at `step` of a `total`-step run.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = if total > 1 {
                    step as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                let floor = self.lr_floor * self.learning_rate;
                floor
                    + (self.learning_rate - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// ⌈total train samples / batch⌉ steps per epoch, times epochs.
    pub fn total_steps(&self, train_samples: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * train_samples.div_ceil(self.batch_size))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<Episode>,
}

/// Uniform task choice, then a uniform query from that task's train split.
pub fn sample_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    pool: &TaskPool,
    batch_size: usize,
    opts: &EpisodeOptions,
    rng: &mut R,
) -> Result<Batch> {
    let entries = pool.entries();
    if entries.is_empty() {
        return Err(Error::Config("no tasks to sample from".into()));
    }
    let items = (0..batch_size)
        .map(|_| {
            let entry = &entries[rng.random_range(0..entries.len())];
            sample_item(corpus, entry, opts, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { items })
}

fn sample_item<R: Rng + ?Sized>(
    corpus: &Corpus,
    entry: &PoolEntry,
    opts: &EpisodeOptions,
    rng: &mut R,
) -> Result<Episode> {
    if entry.train.len() < opts.context_size + 1 {
        return Err(Error::Sampling {
            task: entry.task.id.clone(),
            message: format!(
                "{} train samples, need at least {}",
                entry.train.len(),
                opts.context_size + 1
            ),
        });
    }
    let query = entry.train[rng.random_range(0..entry.train.len())];
    build_episode(corpus, &entry.task, query, &entry.train, opts, rng)
}

/// (1/|B|) Σ_i ‖y_i − p_i‖², the squared norm over all pixels and channels.
pub fn mse_loss(predictions: &[Image], targets: &[Image]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (i, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.dims() != t.dims() {
            return Err(Error::Shape(format!(
                "item {i}: {:?} vs {:?}",
                p.dims(),
                t.dims()
            )));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        if !s.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at batch index {i}"
            )));
        }
        total += s;
    }
    Ok(total / predictions.len() as f64)
}

/// Adds the gradient of (1/|B|)·‖y − raw‖² for one item to `grads` and
/// returns the item's squared error. The loss is taken before the output
/// clamp so saturated pixels still receive gradient.
pub fn accumulate_item<T: Scalar>(
    model: &Model<T>,
    item: &Episode,
    batch_size: usize,
    grads: &mut [T],
) -> Result<f64> {
    let tape = model.forward(&item.context, &item.query)?;
    let y: Vec<T> = image_to_planar(&item.target);
    let scale = T::of(2.0 / batch_size as f64);
    let mut loss = 0.0;
    let d: Vec<T> = tape
        .raw()
        .iter()
        .zip(&y)
        .map(|(&p, &t)| {
            let e = p - t;
            loss += e.to_f64() * e.to_f64();
            e * scale
        })
        .collect();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss for task {}",
            item.task
        )));
    }
    model.backward(&tape, &d, grads);
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::of(self.lr / c1);
        let c2 = T::of(c2);
        let eps = T::of(self.eps);
        let one = T::one();
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p = *p - step * *m / ((*v / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub step: usize,
    pub item: usize,
    pub role: String,
    pub sample: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Mean batch loss per step.
    pub step_losses: Vec<f64>,
    pub val: Vec<ValRecord>,
    pub best_step: Option<usize>,
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub const TRAIN_LOG: &'static str = "train_log.csv";
    pub const SAMPLES_LOG: &'static str = "samples_log.csv";
    pub const VAL_LOG: &'static str = "val_log.csv";
    pub const BEST: &'static str = "best.ckpt";
    pub const LAST: &'static str = "last.ckpt";

    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

struct Logs {
    steps: csv::Writer<File>,
    samples: csv::Writer<File>,
    val: csv::Writer<File>,
    files: RunFiles,
}

impl Logs {
    fn open(files: RunFiles) -> Result<Self> {
        Ok(Self {
            steps: csv_writer(&files.path(RunFiles::TRAIN_LOG))?,
            samples: csv_writer(&files.path(RunFiles::SAMPLES_LOG))?,
            val: csv_writer(&files.path(RunFiles::VAL_LOG))?,
            files,
        })
    }

    fn flush(&mut self) -> Result<()> {
        for (w, name) in [
            (&mut self.steps, RunFiles::TRAIN_LOG),
            (&mut self.samples, RunFiles::SAMPLES_LOG),
            (&mut self.val, RunFiles::VAL_LOG),
        ] {
            w.flush().map_err(|e| Error::io(self.files.path(name), e))?;
        }
        Ok(())
    }
}

/// Fixed validation episodes: queries from each task's val split (train
/// split if val is empty), contexts from its train split.
fn validation_set(
    corpus: &Corpus,
    pool: &TaskPool,
    config: &TrainConfig,
    opts: &EpisodeOptions,
) -> Result<Vec<Episode>> {
    let mut rng = stream(derive_seed(config.seed, u64::MAX), 0);
    let mut out = Vec::new();
    for entry in pool.entries() {
        let queries = if entry.val.is_empty() {
            &entry.train
        } else {
            &entry.val
        };
        for &q in queries.iter().take(config.val_episodes) {
            match build_episode(corpus, &entry.task, q, &entry.train, opts, &mut rng) {
                Ok(ep) => out.push(ep),
                Err(Error::Sampling { task, message }) => {
                    warn!("skipping validation episode of {task}: {message}")
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

fn validation_loss(model: &Model<f32>, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Ok(f64::NAN);
    }
    let preds = episodes
        .iter()
        .map(|e| model.predict(&e.context, &e.query))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Image> = episodes.iter().map(|e| e.target.clone()).collect();
    mse_loss(&preds, &targets)
}

/// Trains on every task of `pool`. With `out` set, writes the step, sample
/// and validation logs plus `best.ckpt` and `last.ckpt` there.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    corpus: &Corpus,
    pool: &TaskPool,
    opts: &EpisodeOptions,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = Model::<f32>::new(model_config.clone())?;
    let total = config.total_steps(pool.total(Split::Train));
    let mut adam = Adam::new(model.parameter_count(), config);
    let mut logs = out
        .map(RunFiles::new)
        .transpose()?
        .map(Logs::open)
        .transpose()?;
    let val_set = validation_set(corpus, pool, config, opts)?;
    info!(
        "training {} parameters on {} tasks for {total} steps",
        model.parameter_count(),
        pool.entries().len()
    );

    let start = Instant::now();
    let mut step_losses = Vec::with_capacity(total);
    let mut val = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for step in 0..total {
        let mut rng = stream(config.seed, step as u64);
        let batch = sample_batch(corpus, pool, config.batch_size, opts, &mut rng)?;
        let mut grads = model.params().zeros_like();
        let mut batch_loss = 0.0;
        let mut item_losses = Vec::with_capacity(batch.items.len());
        for item in &batch.items {
            let l = match accumulate_item(&model, item, config.batch_size, &mut grads) {
                Ok(l) => l,
                Err(Error::Numeric(msg)) => {
                    if let Some(logs) = logs.as_mut() {
                        logs.flush()?;
                        if model.params().all_finite() {
                            save_checkpoint(&model, &logs.files.path(RunFiles::LAST))?;
                        }
                    }
                    return Err(Error::Numeric(format!("step {step}: {msg}")));
                }
                Err(e) => return Err(e),
            };
            batch_loss += l / config.batch_size as f64;
            item_losses.push(l);
        }
        adam.set_learning_rate(config.learning_rate_at(step, total));
        adam.step(model.params_mut().data_mut(), &grads);
        if !model.params().all_finite() {
            return Err(Error::Numeric(format!(
                "step {step}: parameters became non-finite"
            )));
        }
        step_losses.push(batch_loss);

        if let Some(logs) = logs.as_mut() {
            let wall_ms = start.elapsed().as_millis() as u64;
            for (i, (item, &loss)) in batch.items.iter().zip(&item_losses).enumerate() {
                let rec = StepRecord {
                    step,
                    task: item.task.clone(),
                    loss,
                    wall_ms,
                };
                logs.steps
                    .serialize(rec)
                    .map_err(|e| csv_err(&logs.files.path(RunFiles::TRAIN_LOG), e))?;
                let roles = std::iter::once(("query", item.query_ref))
                    .chain(item.context_refs.iter().map(|&r| ("context", r)));
                for (role, r) in roles {
                    logs.samples
                        .serialize(SampleRecord {
                            step,
                            item: i,
                            role: role.to_string(),
                            sample: corpus.sample_name(r),
                        })
                        .map_err(|e| csv_err(&logs.files.path(RunFiles::SAMPLES_LOG), e))?;
                }
            }
        }

        let is_last = step + 1 == total;
        if is_last || (config.val_every > 0 && (step + 1) % config.val_every == 0) {
            let vl = validation_loss(&model, &val_set)?;
            info!(
                "step {}/{total}: train {batch_loss:.3} val {vl:.3}",
                step + 1
            );
            val.push(ValRecord { step, val_loss: vl });
            if let Some(logs) = logs.as_mut() {
                logs.val
                    .serialize(ValRecord { step, val_loss: vl })
                    .map_err(|e| csv_err(&logs.files.path(RunFiles::VAL_LOG), e))?;
                if best.is_none_or(|(b, _)| vl < b) {
                    save_checkpoint(&model, &logs.files.path(RunFiles::BEST))?;
                }
            }
            if best.is_none_or(|(b, _)| vl < b) {
                best = Some((vl, step));
            }
        }
    }
    if let Some(mut logs) = logs {
        logs.flush()?;
        save_checkpoint(&model, &logs.files.path(RunFiles::LAST))?;
    }
    Ok(TrainOutcome {
        model,
        step_losses,
        val,
        best_step: best.map(|b| b.1),
    })
}

/// The same loop restricted to one task (seen or unseen).
pub fn train_single_task(
    task_id: &str,
    config: &TrainConfig,
    model_config: &ModelConfig,
    corpus: &Corpus,
    pool: &TaskPool,
    opts: &EpisodeOptions,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut single = pool.clone();
    single.retain(|t| t.id == task_id);
    if single.entries().is_empty() {
        return Err(Error::Config(format!("unknown task `{task_id}`")));
    }
    train(config, model_config, corpus, &single, opts, out)
}

/// Reads the sample names recorded in a run's samples log.
pub fn read_samples_log(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_loss_example() {
        let p = Image::zeros(2, 2);
        let t = Image::filled(2, 2, [1.0; 3]);
        assert_eq!(mse_loss(&[p.clone()], &[t.clone()]).unwrap(), 12.0);
        assert_eq!(mse_loss(&[p.clone(), p], &[t.clone(), t]).unwrap(), 12.0);
    }

    #[test]
    fn identical_prediction_has_zero_loss() {
        let t = Image::filled(4, 4, [0.2, 0.4, 0.6]);
        assert_eq!(mse_loss(&[t.clone()], &[t]).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_batches_are_shape_errors() {
        assert!(matches!(mse_loss(&[], &[]), Err(Error::Shape(_))));
        let a = Image::zeros(2, 2);
        let b = Image::zeros(4, 4);
        assert!(matches!(mse_loss(&[a], &[b]), Err(Error::Shape(_))));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut adam = Adam::<f64>::new(2, &cfg);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_runs_from_peak_to_floor() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            lr_floor: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0, 11), 1e-3);
        assert!((cfg.learning_rate_at(5, 11) - 5.5e-4).abs() < 1e-12);
        assert!((cfg.learning_rate_at(10, 11) - 1e-4).abs() < 1e-12);
        let flat = TrainConfig::default();
        assert_eq!(flat.learning_rate_at(7, 11), flat.learning_rate);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::<f32>::new(3, &cfg);
        let mut p = vec![0.5f32, 0.25, -2.0];
        let before = p.clone();
        for _ in 0..5 {
            adam.step(&mut p, &[1.0, -3.0, 0.2]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            min_nonempty_context_masks: 7,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert_eq!(TrainConfig::default().total_steps(11), 2 * 3);
    }
}
