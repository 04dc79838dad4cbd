//! Metrics, baselines and the two evaluation protocols: unseen tasks and
//! leave-one-vendor-out domain generalization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::ContextSet;
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::manifest::Split;
use crate::nn::{Model, ModelConfig};
use crate::palette::{decode_to_classes, extract_context_colors, Palette, DEFAULT_MAX_CLASSES};
use crate::rng::{derive_seed, fnv1a, stream};
use crate::tasks::{
    build_episode, enumerate_tasks, Corpus, Episode, EpisodeOptions, MetricKind, PoolEntry,
    TaskConfig, TaskDescriptor, TaskPool, TaskVariant, UnseenTaskSpec, UnseenVariant, VendorFilter,
};
use crate::train::{read_samples_log, train, train_single_task, RunFiles, TrainConfig};

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "prediction is {a:?}, ground truth is {b:?}"
        )));
    }
    Ok(())
}

/// Mean IoU (percent) over foreground classes present in either map;
/// 100 when neither has foreground.
pub fn iou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    same_dims(pred.dims(), gt.dims())?;
    let mut inter = [0u64; 256];
    let mut union = [0u64; 256];
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if p == g {
            if p != 0 {
                inter[p as usize] += 1;
                union[p as usize] += 1;
            }
        } else {
            if p != 0 {
                union[p as usize] += 1;
            }
            if g != 0 {
                union[g as usize] += 1;
            }
        }
    }
    let classes: Vec<usize> = (1..256).filter(|&c| union[c] > 0).collect();
    if classes.is_empty() {
        return Ok(100.0);
    }
    let sum: f64 = classes
        .iter()
        .map(|&c| inter[c] as f64 / union[c] as f64)
        .sum();
    Ok(100.0 * sum / classes.len() as f64)
}

/// Pixel-exact F1 (percent); 100 when both masks are empty.
pub fn f1(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask lengths {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mean absolute error over all pixels and channels.
pub fn mae(pred: &Image, gt: &Image) -> Result<f64> {
    same_dims(pred.dims(), gt.dims())?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// One context output chosen uniformly at random.
pub fn copy_baseline<R: Rng + ?Sized>(context: &ContextSet, rng: &mut R) -> Result<Image> {
    if context.is_empty() {
        return Err(Error::Context(
            "copy baseline needs at least one context pair".into(),
        ));
    }
    Ok(context.pairs()[rng.random_range(0..context.len())]
        .output
        .clone())
}

/// Anything that maps a context set and a query to a prediction.
pub trait Predictor: Sync {
    fn name(&self) -> &str;

    /// Whether a prediction for `task` is available.
    fn covers(&self, _task: &str) -> bool {
        true
    }

    fn predict(&self, task: &str, context: &ContextSet, query: &Image, seed: u64) -> Result<Image>;
}

pub const COPY: &str = "Copy";
pub const RETINALIZER: &str = "Retinalizer";
pub const RETINALIZER_REC: &str = "Retinalizer Rec.";
pub const SINGLE_TASK: &str = "Single-task";

/// A table column with no results, e.g. a checkpoint that was not supplied.
#[derive(Debug, Clone)]
pub struct Unavailable(pub String);

impl Predictor for Unavailable {
    fn name(&self) -> &str {
        &self.0
    }

    fn covers(&self, _task: &str) -> bool {
        false
    }

    fn predict(
        &self,
        task: &str,
        _context: &ContextSet,
        _query: &Image,
        _seed: u64,
    ) -> Result<Image> {
        Err(Error::Config(format!("{}: no model for {task}", self.0)))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CopyBaseline;

impl Predictor for CopyBaseline {
    fn name(&self) -> &str {
        COPY
    }

    fn predict(
        &self,
        _task: &str,
        context: &ContextSet,
        _query: &Image,
        seed: u64,
    ) -> Result<Image> {
        copy_baseline(context, &mut stream(seed, 0))
    }
}

#[derive(Debug, Clone)]
pub struct ModelPredictor {
    pub name: String,
    pub model: Model<f32>,
}

impl Predictor for ModelPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(
        &self,
        _task: &str,
        context: &ContextSet,
        query: &Image,
        _seed: u64,
    ) -> Result<Image> {
        self.model.predict(context, query)
    }
}

/// One model per task, as for the single-task baseline.
#[derive(Debug, Clone)]
pub struct PerTaskPredictor {
    pub name: String,
    pub models: BTreeMap<String, Model<f32>>,
}

impl Predictor for PerTaskPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn covers(&self, task: &str) -> bool {
        self.models.contains_key(task)
    }

    fn predict(
        &self,
        task: &str,
        context: &ContextSet,
        query: &Image,
        _seed: u64,
    ) -> Result<Image> {
        self.models
            .get(task)
            .ok_or_else(|| Error::Config(format!("{}: no model for {task}", self.name)))?
            .predict(context, query)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub context_size: usize,
    pub min_nonempty_context_masks: usize,
    pub max_retries: usize,
    /// Cap on evaluated queries per task (all test samples when unset).
    pub max_queries: Option<usize>,
    pub max_classes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context_size: 6,
            min_nonempty_context_masks: 2,
            max_retries: 50,
            max_queries: None,
            max_classes: DEFAULT_MAX_CLASSES,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn episode_options(&self, task_config: &TaskConfig) -> EpisodeOptions {
        EpisodeOptions {
            context_size: self.context_size,
            min_nonempty: self.min_nonempty_context_masks,
            recolor: false,
            min_color_distance: task_config.min_color_distance,
            max_retries: self.max_retries,
            unseen_foreground: task_config.unseen_foreground,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub predictor: String,
    pub metric: MetricKind,
    pub mean: f64,
    /// Population standard deviation of `scores`.
    pub std: f64,
    pub count: usize,
    pub samples: Vec<String>,
    pub scores: Vec<f64>,
    pub decode_failures: usize,
}

pub fn mean_std(scores: &[f64]) -> (f64, f64) {
    if scores.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Decodes a semantic prediction against the colors of the context outputs
/// and maps them to class ids through the episode palette.
pub fn decode_semantic(
    pred: &Image,
    context: &ContextSet,
    episode_palette: &Palette,
    max_classes: usize,
) -> Result<LabelMap> {
    let colors = extract_context_colors(context, max_classes)?;
    let decoded = decode_to_classes(pred, &colors)?;
    let mut lut = [0u8; 256];
    for e in colors.entries() {
        lut[e.id as usize] = episode_palette.id_of(e.color).ok_or_else(|| {
            Error::Codec(format!(
                "context color {:?} is not a class color of this episode",
                e.color
            ))
        })?;
    }
    let ids = decoded
        .labels
        .ids()
        .iter()
        .map(|&i| lut[i as usize])
        .collect();
    LabelMap::from_vec(pred.width(), pred.height(), ids)
}

/// Scores one prediction with the task's metric.
pub fn score(
    task: &TaskDescriptor,
    episode: &Episode,
    pred: &Image,
    max_classes: usize,
) -> Result<f64> {
    match task.metric {
        MetricKind::Mae => mae(pred, &episode.target),
        kind => {
            let gt = episode
                .target_labels
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{}: episode lacks target labels", task.id)))?;
            let palette = episode
                .palette
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{}: episode lacks a palette", task.id)))?;
            let labels = decode_semantic(pred, &episode.context, palette, max_classes)?;
            if kind == MetricKind::IoU {
                iou(&labels, gt)
            } else {
                f1(&labels.foreground_mask(), &gt.foreground_mask())
            }
        }
    }
}

/// Seeded evaluation episodes: queries from `split`, contexts from the
/// task's train split. Identical for every predictor.
pub fn evaluation_episodes(
    corpus: &Corpus,
    entry: &PoolEntry,
    split: Split,
    config: &EvalConfig,
    opts: &EpisodeOptions,
) -> Result<Vec<Episode>> {
    let queries = entry.split(split);
    let limit = config.max_queries.unwrap_or(usize::MAX);
    let base = derive_seed(config.seed, fnv1a(entry.task.id.as_bytes()));
    let mut out = Vec::new();
    for (i, &q) in queries.iter().take(limit).enumerate() {
        let mut rng = stream(base, i as u64);
        out.push(build_episode(
            corpus,
            &entry.task,
            q,
            &entry.train,
            opts,
            &mut rng,
        )?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "{}: no {split} samples to evaluate",
            entry.task.id
        )));
    }
    Ok(out)
}

pub fn evaluate_episodes(
    predictor: &dyn Predictor,
    corpus: &Corpus,
    task: &TaskDescriptor,
    episodes: &[Episode],
    config: &EvalConfig,
) -> Result<MetricReport> {
    let base = derive_seed(config.seed ^ 0x5eed, fnv1a(task.id.as_bytes()));
    let mut scores = Vec::with_capacity(episodes.len());
    let mut samples = Vec::with_capacity(episodes.len());
    let mut decode_failures = 0;
    for (i, ep) in episodes.iter().enumerate() {
        let pred = predictor.predict(
            &task.id,
            &ep.context,
            &ep.query,
            derive_seed(base, i as u64),
        )?;
        let s = match score(task, ep, &pred, config.max_classes) {
            Ok(s) => s,
            Err(e @ (Error::Codec(_) | Error::Context(_))) if task.variant.is_semantic() => {
                warn!(
                    "{} / {}: decoding failed ({e}); scoring 0",
                    task.id,
                    predictor.name()
                );
                decode_failures += 1;
                0.0
            }
            Err(e) => return Err(e),
        };
        scores.push(s);
        samples.push(corpus.sample_name(ep.query_ref));
    }
    let (mean, std) = mean_std(&scores);
    Ok(MetricReport {
        task: task.id.clone(),
        predictor: predictor.name().to_string(),
        metric: task.metric,
        mean,
        std,
        count: scores.len(),
        samples,
        scores,
        decode_failures,
    })
}

/// Evaluates `predictor` on `split` of one task.
pub fn evaluate(
    predictor: &dyn Predictor,
    corpus: &Corpus,
    entry: &PoolEntry,
    split: Split,
    config: &EvalConfig,
    opts: &EpisodeOptions,
) -> Result<MetricReport> {
    let episodes = evaluation_episodes(corpus, entry, split, config, opts)?;
    evaluate_episodes(predictor, corpus, &entry.task, &episodes, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub task: String,
    pub metric: MetricKind,
    /// (mean, std) per column; `None` where the column has no result.
    pub cells: Vec<Option<(f64, f64)>>,
}

/// Rows are tasks, columns are predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl ReportTable {
    pub fn cell(&self, task: &str, column: &str) -> Option<(f64, f64)> {
        let c = self.columns.iter().position(|n| n == column)?;
        self.rows.iter().find(|r| r.task == task)?.cells[c]
    }

    pub fn render_text(&self) -> String {
        let fmt_cell = |metric: MetricKind, cell: &Option<(f64, f64)>| match (metric, cell) {
            (_, None) => "n/a".to_string(),
            (MetricKind::Mae, Some((m, s))) => format!("{m:.3} ± {s:.3}"),
            (_, Some((m, s))) => format!("{m:.2} ± {s:.1}"),
        };
        let mut header = vec!["Task".to_string(), "Metric".to_string()];
        header.extend(self.columns.iter().cloned());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let arrow = if r.metric.higher_is_better() {
                    "↑"
                } else {
                    "↓"
                };
                let mut line = vec![r.task.clone(), format!("{} {arrow}", r.metric)];
                line.extend(r.cells.iter().map(|c| fmt_cell(r.metric, c)));
                line
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                std::iter::once(&header)
                    .chain(&body)
                    .map(|l| l[i].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str(" | ");
                }
                let pad = w - c.chars().count();
                s.push_str(c);
                s.extend(std::iter::repeat_n(' ', pad));
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let _ = writeln!(out, "{}", line(&header));
        let rule: usize = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
        let _ = writeln!(out, "{}", "-".repeat(rule));
        for l in &body {
            let _ = writeln!(out, "{}", line(l));
        }
        out
    }

    /// Long format: task, metric, predictor, mean, std.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["task", "metric", "predictor", "mean", "std"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            for (col, cell) in self.columns.iter().zip(&r.cells) {
                let (m, s) = cell.map_or((String::new(), String::new()), |(m, s)| {
                    (m.to_string(), s.to_string())
                });
                w.write_record([r.task.as_str(), &r.metric.to_string(), col, &m, &s])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Per-sample scores for significance testing.
pub fn write_sample_scores(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["task", "predictor", "sample", "score"])
        .map_err(|e| csv_error(path, e))?;
    for r in reports {
        for (s, v) in r.samples.iter().zip(&r.scores) {
            w.write_record([r.task.as_str(), &r.predictor, s, &v.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub table: ReportTable,
    pub reports: Vec<MetricReport>,
}

/// Evaluates every predictor on the test split of every task in `pool`.
/// All predictors see the same episodes.
pub fn run_suite(
    title: &str,
    corpus: &Corpus,
    pool: &TaskPool,
    predictors: &[&dyn Predictor],
    config: &EvalConfig,
    opts: &EpisodeOptions,
) -> Result<SuiteResult> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for entry in pool.entries() {
        let episodes = evaluation_episodes(corpus, entry, Split::Test, config, opts)?;
        let mut cells = Vec::with_capacity(predictors.len());
        for p in predictors {
            if !p.covers(&entry.task.id) {
                info!("{}: no result for {}", p.name(), entry.task.id);
                cells.push(None);
                continue;
            }
            let r = evaluate_episodes(*p, corpus, &entry.task, &episodes, config)?;
            cells.push(Some((r.mean, r.std)));
            reports.push(r);
        }
        rows.push(TableRow {
            task: entry.task.id.clone(),
            metric: entry.task.metric,
            cells,
        });
    }
    Ok(SuiteResult {
        table: ReportTable {
            title: title.to_string(),
            columns: predictors.iter().map(|p| p.name().to_string()).collect(),
            rows,
        },
        reports,
    })
}

pub const SUITE_JSON: &str = "suite.json";
pub const TABLE_TXT: &str = "table.txt";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const PER_SAMPLE_CSV: &str = "per_sample.csv";

/// Writes the text table, the summary and per-sample CSVs and the JSON
/// record of a suite into `dir`.
pub fn write_suite(suite: &SuiteResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = dir.join(TABLE_TXT);
    std::fs::write(&table, suite.table.render_text()).map_err(|e| Error::io(&table, e))?;
    suite.table.write_csv(&dir.join(SUMMARY_CSV))?;
    write_sample_scores(&suite.reports, &dir.join(PER_SAMPLE_CSV))?;
    let json = dir.join(SUITE_JSON);
    let text = serde_json::to_string_pretty(suite).expect("suite serializes");
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_suite(path: &Path) -> Result<SuiteResult> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        field: ".".into(),
        message: e.to_string(),
    })
}

/// Loads `<dir>/<task>/best.ckpt` (or `last.ckpt`) for each task present.
pub fn load_single_task_dir(dir: &Path, tasks: &[TaskDescriptor]) -> Result<PerTaskPredictor> {
    let mut models = BTreeMap::new();
    for t in tasks {
        let run = dir.join(crate::tasks::precompute::task_dir_name(&t.id));
        let path = [RunFiles::BEST, RunFiles::LAST]
            .iter()
            .map(|f| run.join(f))
            .find(|p| p.is_file());
        if let Some(p) = path {
            models.insert(t.id.clone(), crate::nn::load_checkpoint(&p)?.into_f32());
        }
    }
    Ok(PerTaskPredictor {
        name: SINGLE_TASK.into(),
        models,
    })
}

/// The unseen-task table: Copy plus the given predictors on every unseen task.
pub fn run_unseen_suite(
    corpus: &Corpus,
    tasks: &[TaskDescriptor],
    predictors: &[&dyn Predictor],
    config: &EvalConfig,
    task_config: &TaskConfig,
) -> Result<SuiteResult> {
    let unseen: Vec<TaskDescriptor> = tasks.iter().filter(|t| !t.seen).cloned().collect();
    let pool = TaskPool::new(corpus, &unseen, &VendorFilter::All)?;
    let copy = CopyBaseline;
    let mut all: Vec<&dyn Predictor> = vec![&copy];
    all.extend(predictors.iter().copied().filter(|p| p.name() != COPY));
    run_suite(
        "Generalization to unseen tasks",
        corpus,
        &pool,
        &all,
        config,
        &config.episode_options(task_config),
    )
}

/// Which vendor is held out and which remain for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub held_out_vendor: String,
    pub train_vendors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainGenConfig {
    pub vendors: Vec<String>,
    /// Dataset group holding the vendor-tagged data.
    pub group: String,
    pub tasks: Vec<UnseenVariant>,
    /// Train a single-task model per evaluated task and holdout.
    pub single_task: bool,
}

impl Default for DomainGenConfig {
    fn default() -> Self {
        Self {
            vendors: vec!["A".into(), "B".into(), "C".into()],
            group: "PD-RETOUCH".into(),
            tasks: vec![
                UnseenVariant::RecoloredFluidSeg,
                UnseenVariant::Inpaint2x,
                UnseenVariant::Outpaint,
                UnseenVariant::SpDenoise,
            ],
            single_task: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutResult {
    pub holdout: HoldoutSpec,
    pub suite: SuiteResult,
    /// Training run directories (one per trained model).
    pub runs: Vec<PathBuf>,
}

/// Unseen descriptors evaluated in the domain-generalization protocol.
pub fn domain_gen_tasks(
    corpus: &Corpus,
    task_config: &TaskConfig,
    dg: &DomainGenConfig,
) -> Result<Vec<TaskDescriptor>> {
    let mut cfg = task_config.clone();
    cfg.unseen = dg
        .tasks
        .iter()
        .map(|&variant| UnseenTaskSpec {
            variant,
            group: dg.group.clone(),
        })
        .collect();
    Ok(enumerate_tasks(&corpus.manifests(), &cfg)?
        .into_iter()
        .filter(|t| !t.seen)
        .collect())
}

/// Retrains both models once per held-out vendor (data of that vendor
/// removed from every task) and evaluates the unseen tasks on that vendor,
/// with contexts from its train split.
#[allow(clippy::too_many_arguments)]
pub fn run_domain_generalization(
    corpus: &Corpus,
    task_config: &TaskConfig,
    dg: &DomainGenConfig,
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    eval_config: &EvalConfig,
    out: &Path,
) -> Result<Vec<HoldoutResult>> {
    let vendors: Vec<String> = corpus
        .datasets()
        .iter()
        .flat_map(|d| d.manifest.samples.iter().map(|s| s.vendor.clone()))
        .collect();
    for v in &dg.vendors {
        if !vendors.contains(v) {
            return Err(Error::Config(format!(
                "vendor `{v}` does not occur in the corpus"
            )));
        }
    }
    let seen: Vec<TaskDescriptor> = enumerate_tasks(&corpus.manifests(), task_config)?
        .into_iter()
        .filter(|t| t.seen)
        .collect();
    let dg_tasks = domain_gen_tasks(corpus, task_config, dg)?;
    let opts_plain = train_config.episode_options(
        task_config.unseen_foreground,
        task_config.min_color_distance,
    );
    let rec_config = TrainConfig {
        recolor_enabled: true,
        ..train_config.clone()
    };
    let opts_rec = rec_config.episode_options(
        task_config.unseen_foreground,
        task_config.min_color_distance,
    );

    let mut results = Vec::new();
    for v in &dg.vendors {
        let holdout = HoldoutSpec {
            held_out_vendor: v.clone(),
            train_vendors: dg.vendors.iter().filter(|o| *o != v).cloned().collect(),
        };
        info!("holding out vendor {v}");
        let dir = out.join(format!("holdout-{v}"));
        let train_pool = TaskPool::new(corpus, &seen, &VendorFilter::Exclude(v.clone()))?;
        let plain_dir = dir.join("retinalizer");
        let rec_dir = dir.join("retinalizer-rec");
        let plain = train(
            train_config,
            model_config,
            corpus,
            &train_pool,
            &opts_plain,
            Some(&plain_dir),
        )?;
        let rec = train(
            &rec_config,
            model_config,
            corpus,
            &train_pool,
            &opts_rec,
            Some(&rec_dir),
        )?;
        let mut runs = vec![plain_dir, rec_dir];

        let eval_pool = TaskPool::new(corpus, &dg_tasks, &VendorFilter::Only(v.clone()))?;
        let mut single = PerTaskPredictor {
            name: SINGLE_TASK.into(),
            models: BTreeMap::new(),
        };
        if dg.single_task {
            for t in &dg_tasks {
                let d = dir
                    .join("single-task")
                    .join(crate::tasks::precompute::task_dir_name(&t.id));
                let o = train_single_task(
                    &t.id,
                    train_config,
                    model_config,
                    corpus,
                    &eval_pool,
                    &opts_plain,
                    Some(&d),
                )?;
                single.models.insert(t.id.clone(), o.model);
                runs.push(d);
            }
        }
        let plain = ModelPredictor {
            name: RETINALIZER.into(),
            model: plain.model,
        };
        let rec = ModelPredictor {
            name: RETINALIZER_REC.into(),
            model: rec.model,
        };
        let copy = CopyBaseline;
        let predictors: Vec<&dyn Predictor> = vec![&copy, &plain, &rec, &single];
        let suite = run_suite(
            &format!("Domain generalization to vendor {v}"),
            corpus,
            &eval_pool,
            &predictors,
            eval_config,
            &eval_config.episode_options(task_config),
        )?;
        results.push(HoldoutResult {
            holdout,
            suite,
            runs,
        });
    }
    Ok(results)
}

/// Number of sample-log entries that belong to `vendor`.
pub fn audit_holdout(samples_log: &Path, corpus: &Corpus, vendor: &str) -> Result<usize> {
    let mut leaks = 0;
    for rec in read_samples_log(samples_log)? {
        let (ds, id) = rec
            .sample
            .split_once('/')
            .ok_or_else(|| Error::Data(format!("malformed sample name `{}`", rec.sample)))?;
        let entry = corpus
            .dataset(ds)
            .and_then(|d| d.manifest.sample(id))
            .ok_or_else(|| Error::Data(format!("unknown sample `{}`", rec.sample)))?;
        if entry.vendor == vendor {
            leaks += 1;
        }
    }
    Ok(leaks)
}

/// Audits every training run of a holdout.
pub fn audit_result(result: &HoldoutResult, corpus: &Corpus) -> Result<usize> {
    let mut leaks = 0;
    for run in &result.runs {
        // Single-task upper bounds train on the held-out vendor by design.
        if run.components().any(|c| c.as_os_str() == "single-task") {
            continue;
        }
        leaks += audit_holdout(
            &run.join(RunFiles::SAMPLES_LOG),
            corpus,
            &result.holdout.held_out_vendor,
        )?;
    }
    Ok(leaks)
}

/// Horizontal strip of equally tall images, for qualitative dumps.
pub fn side_by_side(images: &[&Image]) -> Result<Image> {
    let h = images.first().map(|i| i.height()).unwrap_or(0);
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::Shape("strip images differ in height".into()));
    }
    let w: usize = images.iter().map(|i| i.width()).sum();
    let mut out = Image::zeros(w, h);
    let mut x0 = 0;
    for img in images {
        for y in 0..h {
            for x in 0..img.width() {
                out.set_pixel(x0 + x, y, img.pixel(x, y));
            }
        }
        x0 += img.width();
    }
    Ok(out)
}

/// Writes `query | target | prediction` strips for one predictor.
pub fn dump_predictions(
    predictor: &dyn Predictor,
    task: &TaskDescriptor,
    episodes: &[Episode],
    dir: &Path,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, ep) in episodes.iter().enumerate() {
        let pred = predictor.predict(
            &task.id,
            &ep.context,
            &ep.query,
            derive_seed(seed, i as u64),
        )?;
        let strip = side_by_side(&[&ep.query, &ep.target, &pred])?;
        strip.save_png(&dir.join(format!("{i:03}.png")))?;
    }
    Ok(())
}

/// Whether a task takes part in a semantic recoloring comparison.
pub fn is_recolored(task: &TaskDescriptor) -> bool {
    task.variant == TaskVariant::Unseen(UnseenVariant::RecoloredFluidSeg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextPair;

    fn square_map(side: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> LabelMap {
        let mut m = LabelMap::zeros(side, side);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, 1);
            }
        }
        m
    }

    #[test]
    fn iou_worked_example() {
        // Two 10x10 squares overlapping in a 5x10 half: 50 / 150.
        let a = square_map(30, 0, 10, 0, 10);
        let b = square_map(30, 5, 15, 0, 10);
        assert!((iou(&a, &b).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a).unwrap(), 100.0);
        assert_eq!(iou(&LabelMap::zeros(30, 30), &a).unwrap(), 0.0);
        assert_eq!(
            iou(&LabelMap::zeros(4, 4), &LabelMap::zeros(4, 4)).unwrap(),
            100.0
        );
    }

    #[test]
    fn f1_worked_example() {
        let mut pred = vec![false; 100];
        let mut gt = vec![false; 100];
        pred[..40].fill(true);
        gt[10..50].fill(true);
        // TP 30, FP 10, FN 10.
        assert_eq!(f1(&pred, &gt).unwrap(), 75.0);
        assert_eq!(f1(&pred, &pred).unwrap(), 100.0);
        assert_eq!(f1(&[true, false], &[false, true]).unwrap(), 0.0);
    }

    #[test]
    fn mae_worked_example() {
        let a = Image::zeros(4, 4);
        let mut b = Image::zeros(4, 4);
        for y in 0..2 {
            for x in 0..4 {
                b.set_pixel(x, y, [0.5; 3]);
            }
        }
        assert_eq!(mae(&a, &b).unwrap(), 0.25);
        assert_eq!(mae(&a, &Image::filled(4, 4, [1.0; 3])).unwrap(), 1.0);
    }

    #[test]
    fn size_mismatch_is_shape_error() {
        assert!(matches!(
            iou(&LabelMap::zeros(2, 2), &LabelMap::zeros(3, 3)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(f1(&[true], &[true, false]), Err(Error::Shape(_))));
        assert!(matches!(
            mae(&Image::zeros(2, 2), &Image::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn copy_returns_a_context_output() {
        let outs: Vec<Image> = (0..4)
            .map(|i| Image::filled(8, 8, [i as f32 / 4.0; 3]))
            .collect();
        let ctx = ContextSet::new(
            outs.iter()
                .map(|o| ContextPair::new(Image::zeros(8, 8), o.clone()).unwrap())
                .collect(),
        )
        .unwrap();
        let a = CopyBaseline
            .predict("t", &ctx, &Image::zeros(8, 8), 3)
            .unwrap();
        let b = CopyBaseline
            .predict("t", &ctx, &Image::zeros(8, 8), 3)
            .unwrap();
        assert_eq!(a, b);
        assert!(outs.contains(&a));
        let single = ContextSet::new(vec![
            ContextPair::new(Image::zeros(8, 8), outs[2].clone()).unwrap()
        ])
        .unwrap();
        assert_eq!(
            CopyBaseline
                .predict("t", &single, &Image::zeros(8, 8), 9)
                .unwrap(),
            outs[2]
        );
    }

    #[test]
    fn mean_std_recomputes() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn table_renders_all_columns() {
        let t = ReportTable {
            title: "t".into(),
            columns: vec![COPY.into(), RETINALIZER.into()],
            rows: vec![TableRow {
                task: "PD-OCTDL:inpaint2x".into(),
                metric: MetricKind::Mae,
                cells: vec![Some((0.143, 0.026)), None],
            }],
        };
        let text = t.render_text();
        assert!(text.contains("0.143 ± 0.026"));
        assert!(text.contains("n/a"));
        assert_eq!(t.cell("PD-OCTDL:inpaint2x", COPY), Some((0.143, 0.026)));
    }

    fn label_pair() -> impl proptest::strategy::Strategy<Value = (LabelMap, LabelMap)> {
        use proptest::prelude::*;
        (
            proptest::collection::vec(0u8..4, 100),
            proptest::collection::vec(0u8..4, 100),
        )
            .prop_map(|(a, b)| {
                (
                    LabelMap::from_vec(10, 10, a).unwrap(),
                    LabelMap::from_vec(10, 10, b).unwrap(),
                )
            })
    }

    proptest::proptest! {
        #[test]
        fn iou_is_bounded_symmetric_and_reflexive((a, b) in label_pair()) {
            let ab = iou(&a, &b).unwrap();
            proptest::prop_assert!((0.0..=100.0).contains(&ab));
            proptest::prop_assert!((ab - iou(&b, &a).unwrap()).abs() < 1e-9);
            proptest::prop_assert_eq!(iou(&a, &a).unwrap(), 100.0);
        }

        #[test]
        fn f1_is_bounded_and_symmetric((a, b) in label_pair()) {
            let (ma, mb) = (a.foreground_mask(), b.foreground_mask());
            let ab = f1(&ma, &mb).unwrap();
            proptest::prop_assert!((0.0..=100.0).contains(&ab));
            proptest::prop_assert!((ab - f1(&mb, &ma).unwrap()).abs() < 1e-9);
            proptest::prop_assert_eq!(f1(&ma, &ma).unwrap(), 100.0);
        }

        #[test]
        fn mae_is_a_symmetric_distance(
            a in proptest::collection::vec(0.0f32..=1.0, 16 * 16 * 3),
            b in proptest::collection::vec(0.0f32..=1.0, 16 * 16 * 3),
        ) {
            let (a, b) = (Image::from_vec(16, 16, a).unwrap(), Image::from_vec(16, 16, b).unwrap());
            let d = mae(&a, &b).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&d));
            proptest::prop_assert!((d - mae(&b, &a).unwrap()).abs() < 1e-12);
            proptest::prop_assert_eq!(mae(&a, &a).unwrap(), 0.0);
        }
    }
}
