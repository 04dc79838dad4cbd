//! The run configuration document shared by every subcommand.
//!
//! A document is JSON with one section per module. Missing fields take
//! their defaults and unknown fields are rejected. Dotted overrides
//! (`train.epochs=1`) are applied to the JSON tree before it is typed, so
//! an override can reach any field the file can.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{DomainGenConfig, EvalConfig};
use crate::nn::ModelConfig;
use crate::phantom::PhantomConfig;
use crate::service::ServiceConfig;
use crate::tasks::TaskConfig;
use crate::train::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "RETINALIZER_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

/// Inputs and outputs a subcommand reads or writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_rec: Option<PathBuf>,
    /// Directory of single-task runs, one subdirectory per task.
    pub single_task_dir: Option<PathBuf>,
    /// Task id for `train-single`.
    pub task: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus seed.
    pub seed: u64,
    pub data: PhantomConfig,
    pub tasks: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub domain_gen: DomainGenConfig,
    pub service: ServiceConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.tasks.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.service.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from model.image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        if self.eval.context_size == 0 {
            return Err(Error::Config("eval.context_size must be positive".into()));
        }
        Ok(())
    }

    /// Sets every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    /// Output root: `paths.out`, else `$RETINALIZER_OUT`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(default_output_root)
    }

    /// Writes the document to `<dir>/effective_config.json`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn typed(value: Value, origin: &Path) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Parses a document; `origin` only labels errors.
pub fn parse_config(text: &str, origin: &Path) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        field: ".".into(),
        message: e.to_string(),
    })
}

/// Parses `key=value`. The value is read as JSON when it parses, otherwise
/// as a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!(
            "override `{raw}` has an empty key segment"
        )));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Dotted path of `key`: as given when it names a top-level field,
/// otherwise the unique section holding a field of that name.
fn resolve_key(root: &Value, key: &str) -> Result<Vec<String>> {
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    let Value::Object(top) = root else {
        return Err(Error::Config("configuration root is not an object".into()));
    };
    if top.contains_key(&parts[0]) {
        return Ok(parts);
    }
    let owners: Vec<&String> = top
        .iter()
        .filter(|(_, v)| v.as_object().is_some_and(|o| o.contains_key(&parts[0])))
        .map(|(k, _)| k)
        .collect();
    match owners.as_slice() {
        [one] => Ok(std::iter::once((*one).clone()).chain(parts).collect()),
        [] => Err(Error::Config(format!("unknown configuration key `{key}`"))),
        many => Err(Error::Config(format!(
            "configuration key `{key}` is ambiguous between sections {many:?}"
        ))),
    }
}

/// Sets `key` in the tree. Every segment must exist already.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let path = resolve_key(root, key)?;
    let mut node = root;
    for (i, part) in path.iter().enumerate() {
        let next = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        };
        node = next.ok_or_else(|| {
            Error::Config(format!(
                "unknown configuration key `{}`",
                path[..=i].join(".")
            ))
        })?;
    }
    *node = value;
    Ok(())
}

/// Reads the document (defaults when `path` is `None`), applies overrides
/// in order and validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let origin = path.unwrap_or(Path::new("<defaults>"));
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            typed(parse_config(&text, p)?, p)?
        }
        None => RunConfig::default(),
    };
    let mut tree = serde_json::to_value(&base).expect("config serializes");
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        apply_override(&mut tree, &key, value)?;
    }
    let config = typed(tree, origin)?;
    config.validate()?;
    Ok(config)
}
