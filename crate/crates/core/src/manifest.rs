//! Dataset manifests: the on-disk description of a dataset and its splits.
//!
//! Manifests are JSON documents whose relative paths resolve against the
//! manifest's own directory, so phantom and real data share one format.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::palette::Palette;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    pub vendor: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub palette: Palette,
    pub samples: Vec<SampleEntry>,
    pub splits: Splits,
}

fn parse_err(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        field: field.into(),
        message: message.into(),
    }
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Checks split disjointness, id references, palette coverage and, when
    /// `root` is given, that every referenced file exists.
    pub fn validate(&self, path: &Path, root: Option<&Path>) -> Result<()> {
        let mut ids = HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            if !ids.insert(s.id.as_str()) {
                return Err(parse_err(
                    path,
                    format!("samples[{i}].id"),
                    format!("duplicate id `{}`", s.id),
                ));
            }
            if let Some(root) = root {
                if !root.join(&s.image).is_file() {
                    return Err(parse_err(
                        path,
                        format!("samples[{i}].image"),
                        format!("missing file `{}`", s.image),
                    ));
                }
                if let Some(l) = &s.labels {
                    if !root.join(l).is_file() {
                        return Err(parse_err(
                            path,
                            format!("samples[{i}].labels"),
                            format!("missing file `{l}`"),
                        ));
                    }
                }
            }
        }
        let mut seen = HashSet::new();
        for (name, list) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            for id in list {
                if !ids.contains(id.as_str()) {
                    return Err(parse_err(
                        path,
                        format!("splits.{name}"),
                        format!("unknown sample id `{id}`"),
                    ));
                }
                if !seen.insert(id.as_str()) {
                    return Err(parse_err(
                        path,
                        format!("splits.{name}"),
                        format!("sample `{id}` in more than one split"),
                    ));
                }
            }
        }
        for class in 0..self.class_names.len() {
            if self.palette.color_of(class as u8).is_none() {
                return Err(parse_err(
                    path,
                    "palette",
                    format!("no color for class {class}"),
                ));
            }
        }
        Ok(())
    }

    pub fn sample(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: DatasetManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        parse_err(path, field, e.into_inner().to_string())
    })?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.validate(path, Some(root))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(
                "split ratios must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Deterministic shuffled partition into train/val/test.
pub fn split_samples(
    ids: &[String],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    ratios.validate()?;
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    let n_train = (n * ratios.train).round() as usize;
    let n_train_val = ((n * (ratios.train + ratios.val)).round() as usize)
        .max(n_train)
        .min(ids.len());
    let test = shuffled.split_off(n_train_val);
    let val = shuffled.split_off(n_train.min(n_train_val));
    Ok((shuffled, val, test))
}

/// A manifest with its images and label maps resident in memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub images: Vec<Image>,
    pub labels: Vec<Option<LabelMap>>,
    index: HashMap<String, usize>,
}

impl LoadedDataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let root = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        let mut images = Vec::with_capacity(manifest.samples.len());
        let mut labels = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let img = Image::load_png(&root.join(&s.image))?;
            let lab = match &s.labels {
                Some(rel) => {
                    let l = LabelMap::load_png(&root.join(rel))?;
                    if l.dims() != img.dims() {
                        return Err(Error::Data(format!(
                            "{}: labels of `{}` are {:?}, image is {:?}",
                            manifest.name,
                            s.id,
                            l.dims(),
                            img.dims()
                        )));
                    }
                    if let Some(&bad) = l
                        .unique_ids()
                        .iter()
                        .find(|&&id| id as usize >= manifest.class_names.len())
                    {
                        return Err(Error::Data(format!(
                            "{}: sample `{}` has class id {bad} beyond {} classes",
                            manifest.name,
                            s.id,
                            manifest.class_names.len()
                        )));
                    }
                    Some(l)
                }
                None => None,
            };
            images.push(img);
            labels.push(lab);
        }
        Ok(Self::from_parts(manifest, root, images, labels))
    }

    pub fn from_parts(
        manifest: DatasetManifest,
        root: PathBuf,
        images: Vec<Image>,
        labels: Vec<Option<LabelMap>>,
    ) -> Self {
        let index = manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Self {
            manifest,
            root,
            images,
            labels,
            index,
        }
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .splits
            .get(split)
            .iter()
            .filter_map(|id| self.index_of(id))
            .collect()
    }
}
