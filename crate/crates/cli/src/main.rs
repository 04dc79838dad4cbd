//! `retinalizer`: one command driving the whole pipeline.
//!
//! Progress goes to stderr; results go to files below the output root
//! (`--out`, else `$RETINALIZER_OUT`, else `./runs`). Every subcommand
//! writes `effective_config.json` next to its outputs, and rerunning with
//! `--config <that file>` reproduces the run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};

use retinalizer::config::{load_config, RunConfig};
use retinalizer::eval::{
    audit_result, load_single_task_dir, read_suite, run_domain_generalization, run_unseen_suite,
    write_suite, ModelPredictor, Predictor, Unavailable, RETINALIZER, RETINALIZER_REC, SINGLE_TASK,
    SUITE_JSON,
};
use retinalizer::manifest::Split;
use retinalizer::nn::load_checkpoint;
use retinalizer::palette::{decode_to_classes, extract_context_colors, DEFAULT_MAX_CLASSES};
use retinalizer::phantom::build_phantom_corpus;
use retinalizer::service::{serve, ServiceState};
use retinalizer::tasks::precompute::{task_dir_name, write_precomputed_tasks};
use retinalizer::tasks::{enumerate_tasks, Corpus, TaskDescriptor, TaskPool, VendorFilter};
use retinalizer::train::{train, train_single_task};
use retinalizer::{ContextSet, Error, Image, Result};

#[derive(Debug, Parser)]
#[command(
    name = "retinalizer",
    version,
    about = "Visual in-context learning for retinal OCT scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON configuration document.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for corpus, model init, training and evaluation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Corpus root (default `<out>/corpus`).
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Dotted `key=value` override, repeatable.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the phantom corpus.
    SynthData(Common),
    /// Materialize every task's input/output pairs.
    BuildTasks(Common),
    /// Train on the seen-task mixture.
    Train {
        #[command(flatten)]
        common: Common,
        /// Enable recoloring augmentation.
        #[arg(long)]
        rec: bool,
    },
    /// Train on a single task.
    TrainSingle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<String>,
    },
    /// Evaluate checkpoints on the unseen tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint trained without recoloring.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Checkpoint trained with recoloring.
        #[arg(long, value_name = "FILE")]
        checkpoint_rec: Option<PathBuf>,
        /// Directory holding one single-task run per task.
        #[arg(long, value_name = "DIR")]
        single_task_dir: Option<PathBuf>,
    },
    /// Leave-one-vendor-out training and evaluation.
    DomainGen(Common),
    /// Run one prediction from image files.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Context pair as `INPUT,OUTPUT`, repeatable.
        #[arg(long = "pair", value_name = "INPUT,OUTPUT", required = true)]
        pairs: Vec<String>,
        /// Query image (PNG).
        #[arg(long, value_name = "FILE")]
        query: PathBuf,
        /// Also write the decoded label map.
        #[arg(long)]
        decode: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Overrides `service.port`.
        #[arg(long)]
        port: Option<u16>,
        /// Static UI bundle served at `/`.
        #[arg(long, value_name = "DIR")]
        ui_dir: Option<PathBuf>,
    },
    /// Collect saved evaluation tables into one report.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory searched for results (default: the output root).
        #[arg(long, value_name = "DIR")]
        input: Option<PathBuf>,
    },
}

fn usage_error(sub: &str, message: &str) -> ! {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = cmd.find_subcommand_mut(sub).expect("subcommand exists");
    sub.error(ErrorKind::MissingRequiredArgument, message)
        .exit()
}

fn configure(common: &Common) -> Result<RunConfig> {
    let mut cfg = load_config(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if common.out.is_some() {
        cfg.paths.out = common.out.clone();
    }
    if common.corpus.is_some() {
        cfg.paths.corpus = common.corpus.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .corpus
        .clone()
        .unwrap_or_else(|| cfg.output_root().join("corpus"))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = corpus_dir(cfg);
    info!("loading corpus from {}", dir.display());
    Corpus::load_dir(&dir)
}

fn all_tasks(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<TaskDescriptor>> {
    enumerate_tasks(&corpus.manifests(), &cfg.tasks)
}

fn seen(tasks: &[TaskDescriptor]) -> Vec<TaskDescriptor> {
    tasks.iter().filter(|t| t.seen).cloned().collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn synth_data(cfg: RunConfig) -> Result<()> {
    let dir = corpus_dir(&cfg);
    let manifests = build_phantom_corpus(&cfg.data, &dir, cfg.seed)?;
    let total: usize = manifests.iter().map(|m| m.samples.len()).sum();
    info!(
        "wrote {} datasets, {total} scans, to {}",
        manifests.len(),
        dir.display()
    );
    cfg.write_snapshot(&dir)?;
    Ok(())
}

fn build_tasks(cfg: RunConfig) -> Result<()> {
    let corpus = load_corpus(&cfg)?;
    let tasks = all_tasks(&cfg, &corpus)?;
    let pool = TaskPool::new(&corpus, &tasks, &VendorFilter::All)?;
    let dir = cfg.output_root().join("tasks");
    let m = write_precomputed_tasks(
        &corpus,
        &pool,
        &[Split::Train, Split::Val, Split::Test],
        cfg.tasks.unseen_foreground,
        &dir,
        cfg.seed,
    )?;
    info!("wrote {} task splits to {}", m.tasks.len(), dir.display());
    cfg.write_snapshot(&dir)?;
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, rec: bool) -> Result<()> {
    if rec {
        cfg.train.recolor_enabled = true;
    }
    let corpus = load_corpus(&cfg)?;
    let tasks = seen(&all_tasks(&cfg, &corpus)?);
    let pool = TaskPool::new(&corpus, &tasks, &VendorFilter::All)?;
    let dir = cfg.output_root().join(if cfg.train.recolor_enabled {
        "train-rec"
    } else {
        "train"
    });
    cfg.write_snapshot(&dir)?;
    let opts = cfg
        .train
        .episode_options(cfg.tasks.unseen_foreground, cfg.tasks.min_color_distance);
    let outcome = train(&cfg.train, &cfg.model, &corpus, &pool, &opts, Some(&dir))?;
    if let Some(last) = outcome.step_losses.last() {
        info!(
            "finished {} steps, final loss {last:.5}",
            outcome.step_losses.len()
        );
    }
    Ok(())
}

fn train_single(mut cfg: RunConfig, task: Option<String>) -> Result<()> {
    if task.is_some() {
        cfg.paths.task = task;
    }
    let Some(task) = cfg.paths.task.clone() else {
        usage_error("train-single", "a task id is required (--task)");
    };
    let corpus = load_corpus(&cfg)?;
    let tasks = all_tasks(&cfg, &corpus)?;
    if !tasks.iter().any(|t| t.id == task) {
        return Err(Error::Config(format!("unknown task `{task}`")));
    }
    let pool = TaskPool::new(&corpus, &tasks, &VendorFilter::All)?;
    let dir = cfg
        .output_root()
        .join("single-task")
        .join(task_dir_name(&task));
    cfg.write_snapshot(&dir)?;
    let opts = cfg
        .train
        .episode_options(cfg.tasks.unseen_foreground, cfg.tasks.min_color_distance);
    let outcome = train_single_task(
        &task,
        &cfg.train,
        &cfg.model,
        &corpus,
        &pool,
        &opts,
        Some(&dir),
    )?;
    if let Some(last) = outcome.step_losses.last() {
        info!(
            "finished {} steps on {task}, final loss {last:.5}",
            outcome.step_losses.len()
        );
    }
    Ok(())
}

fn eval_cmd(
    mut cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    rec: Option<PathBuf>,
    single: Option<PathBuf>,
) -> Result<()> {
    if checkpoint.is_some() {
        cfg.paths.checkpoint = checkpoint;
    }
    if rec.is_some() {
        cfg.paths.checkpoint_rec = rec;
    }
    if single.is_some() {
        cfg.paths.single_task_dir = single;
    }
    let Some(ckpt) = cfg.paths.checkpoint.clone() else {
        usage_error("eval", "a checkpoint is required (--checkpoint)");
    };
    let corpus = load_corpus(&cfg)?;
    let tasks = all_tasks(&cfg, &corpus)?;
    let dir = cfg.output_root().join("eval");
    cfg.write_snapshot(&dir)?;

    let plain = ModelPredictor {
        name: RETINALIZER.into(),
        model: load_checkpoint(&ckpt)?.into_f32(),
    };
    let rec: Box<dyn Predictor> = match &cfg.paths.checkpoint_rec {
        Some(p) => Box::new(ModelPredictor {
            name: RETINALIZER_REC.into(),
            model: load_checkpoint(p)?.into_f32(),
        }),
        None => {
            warn!("no recoloring checkpoint given; the {RETINALIZER_REC} column stays empty");
            Box::new(Unavailable(RETINALIZER_REC.into()))
        }
    };
    let single: Box<dyn Predictor> = match &cfg.paths.single_task_dir {
        Some(d) => Box::new(load_single_task_dir(d, &tasks)?),
        None => {
            warn!("no single-task directory given; the {SINGLE_TASK} column stays empty");
            Box::new(Unavailable(SINGLE_TASK.into()))
        }
    };
    let suite = run_unseen_suite(
        &corpus,
        &tasks,
        &[&plain, rec.as_ref(), single.as_ref()],
        &cfg.eval,
        &cfg.tasks,
    )?;
    write_suite(&suite, &dir)?;
    eprint!("{}", suite.table.render_text());
    info!("results in {}", dir.display());
    Ok(())
}

fn domain_gen(cfg: RunConfig) -> Result<()> {
    let corpus = load_corpus(&cfg)?;
    let dir = cfg.output_root().join("domain-gen");
    cfg.write_snapshot(&dir)?;
    let results = run_domain_generalization(
        &corpus,
        &cfg.tasks,
        &cfg.domain_gen,
        &cfg.train,
        &cfg.model,
        &cfg.eval,
        &dir,
    )?;
    let mut leaks_total = 0;
    for r in &results {
        let leaks = audit_result(r, &corpus)?;
        leaks_total += leaks;
        let sub = dir.join(format!("holdout-{}", r.holdout.held_out_vendor));
        write_suite(&r.suite, &sub)?;
        write_json(
            &sub.join("audit.json"),
            &serde_json::json!({ "holdout": r.holdout, "held_out_samples_in_training": leaks }),
        )?;
        eprint!("{}", r.suite.table.render_text());
        info!(
            "vendor {}: {leaks} held-out samples in training logs",
            r.holdout.held_out_vendor
        );
    }
    if leaks_total > 0 {
        return Err(Error::Data(format!(
            "{leaks_total} held-out samples appeared in training"
        )));
    }
    Ok(())
}

fn infer_cmd(
    cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    pairs: &[String],
    query: &Path,
    decode: bool,
) -> Result<()> {
    let Some(ckpt) = checkpoint.or(cfg.paths.checkpoint.clone()) else {
        usage_error("infer", "a checkpoint is required (--checkpoint)");
    };
    let mut images = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (i, o) = p
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("pair `{p}` is not INPUT,OUTPUT")))?;
        images.push((
            Image::load_png(Path::new(i))?,
            Image::load_png(Path::new(o))?,
        ));
    }
    let context = ContextSet::from_images(images)?;
    let query = Image::load_png(query)?;
    let model = load_checkpoint(&ckpt)?.into_f32();
    let pred = model.predict(&context, &query)?;
    let dir = cfg.output_root().join("infer");
    cfg.write_snapshot(&dir)?;
    pred.save_png(&dir.join("prediction.png"))?;
    if decode {
        let palette = extract_context_colors(&context, DEFAULT_MAX_CLASSES)?;
        let decoded = decode_to_classes(&pred, &palette)?;
        decoded
            .labels
            .save_png(&dir.join("labels.png"), &palette.lookup_table())?;
        write_json(
            &dir.join("palette.json"),
            &serde_json::to_value(&palette).expect("palette serializes"),
        )?;
    }
    info!("prediction written to {}", dir.display());
    Ok(())
}

fn serve_cmd(
    mut cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    port: Option<u16>,
    ui: Option<PathBuf>,
) -> Result<()> {
    if checkpoint.is_some() {
        cfg.paths.checkpoint = checkpoint;
    }
    if let Some(p) = port {
        cfg.service.port = p;
    }
    if ui.is_some() {
        cfg.service.ui_dir = ui;
    }
    let Some(ckpt) = cfg.paths.checkpoint.clone() else {
        usage_error("serve", "a checkpoint is required (--checkpoint)");
    };
    cfg.write_snapshot(&cfg.output_root().join("serve"))?;
    let (corpus, tasks) = match load_corpus(&cfg) {
        Ok(c) => {
            let t = all_tasks(&cfg, &c)?;
            (Some(c), t)
        }
        Err(e) => {
            warn!("serving without a corpus: {e}");
            (None, Vec::new())
        }
    };
    let mut state = ServiceState::new(cfg.service.clone(), corpus, tasks);
    state.foreground = cfg.tasks.unseen_foreground;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(serve(Arc::new(state), ckpt))
}

fn find_suites(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_suites(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == SUITE_JSON) {
            out.push(p);
        }
    }
    Ok(())
}

fn report_cmd(cfg: RunConfig, input: Option<PathBuf>) -> Result<()> {
    let root = input.unwrap_or_else(|| cfg.output_root());
    let mut suites = Vec::new();
    find_suites(&root, &mut suites)?;
    if suites.is_empty() {
        return Err(Error::Data(format!(
            "no {SUITE_JSON} files below {}",
            root.display()
        )));
    }
    let dir = cfg.output_root().join("report");
    cfg.write_snapshot(&dir)?;
    let mut text = String::new();
    for p in &suites {
        let suite = read_suite(p)?;
        text.push_str(&format!("# {}\n", p.display()));
        text.push_str(&suite.table.render_text());
        text.push('\n');
    }
    let path = dir.join("report.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    eprint!("{text}");
    info!("collected {} tables into {}", suites.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => synth_data(configure(&c)?),
        Command::BuildTasks(c) => build_tasks(configure(&c)?),
        Command::Train { common, rec } => train_cmd(configure(&common)?, rec),
        Command::TrainSingle { common, task } => train_single(configure(&common)?, task),
        Command::Eval {
            common,
            checkpoint,
            checkpoint_rec,
            single_task_dir,
        } => eval_cmd(
            configure(&common)?,
            checkpoint,
            checkpoint_rec,
            single_task_dir,
        ),
        Command::DomainGen(c) => domain_gen(configure(&c)?),
        Command::Infer {
            common,
            checkpoint,
            pairs,
            query,
            decode,
        } => infer_cmd(configure(&common)?, checkpoint, &pairs, &query, decode),
        Command::Serve {
            common,
            checkpoint,
            port,
            ui_dir,
        } => serve_cmd(configure(&common)?, checkpoint, port, ui_dir),
        Command::Report { common, input } => report_cmd(configure(&common)?, input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
