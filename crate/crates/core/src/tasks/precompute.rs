//! Optional offline mode: materializes task pairs as PNG files with a JSON
//! index, as an alternative to generating them inside the training loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{make_task_pair, Corpus, TaskDescriptor, TaskPool};
use crate::error::{Error, Result};
use crate::manifest::Split;
use crate::palette::Rgb8;
use crate::rng::{derive_seed, named_stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedPair {
    pub sample: String,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedTask {
    pub task: TaskDescriptor,
    pub split: Split,
    pub pairs: Vec<PrecomputedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub seed: u64,
    pub tasks: Vec<PrecomputedTask>,
}

pub const TASK_MANIFEST: &str = "tasks.json";

/// Directory name for a task id (`:` is not portable in file names).
pub fn task_dir_name(task_id: &str) -> String {
    task_id.replace(':', "__")
}

/// Writes one input/output PNG pair per sample of every pooled task and
/// split, plus `tasks.json` listing them.
pub fn write_precomputed_tasks(
    corpus: &Corpus,
    pool: &TaskPool,
    splits: &[Split],
    foreground: Rgb8,
    out_dir: &Path,
    seed: u64,
) -> Result<TaskManifest> {
    let mut tasks = Vec::new();
    for entry in pool.entries() {
        for &split in splits {
            let rel_dir = format!("{}/{}", task_dir_name(&entry.task.id), split);
            let dir = out_dir.join(&rel_dir);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut pairs = Vec::new();
            for (i, &r) in entry.split(split).iter().enumerate() {
                let mut rng =
                    named_stream(derive_seed(seed, split as u64), &entry.task.id, i as u64);
                let pair = make_task_pair(
                    &entry.task,
                    corpus.image(r),
                    corpus.labels(r),
                    foreground,
                    None,
                    &mut rng,
                )?;
                let stem = corpus.sample_name(r).replace('/', "_");
                let input = format!("{rel_dir}/{stem}_input.png");
                let output = format!("{rel_dir}/{stem}_output.png");
                pair.input.save_png(&out_dir.join(&input))?;
                pair.output.save_png(&out_dir.join(&output))?;
                pairs.push(PrecomputedPair {
                    sample: corpus.sample_name(r),
                    input,
                    output,
                });
            }
            tasks.push(PrecomputedTask {
                task: entry.task.clone(),
                split,
                pairs,
            });
        }
    }
    let manifest = TaskManifest { seed, tasks };
    let path = out_dir.join(TASK_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
