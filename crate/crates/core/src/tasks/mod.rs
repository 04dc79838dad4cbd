//! Task synthesis: turns `(image, label map)` samples into input/output
//! pairs for the seen training tasks and the unseen evaluation tasks.
//!
//! Seen tasks are the four semantic variants on every labeled dataset group
//! plus the transformation and generative variants on the image-only group.

pub mod pixel;
pub mod pool;
pub mod precompute;
pub mod semantic;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::manifest::DatasetManifest;
use crate::palette::{
    draw_separated_colors, encode_labels, Palette, Rgb8, DEFAULT_MIN_COLOR_DISTANCE,
};
use crate::phantom::DatasetRole;

pub use pixel::{
    make_generative_pair, make_transform_pair, DegradationParams, GenerativeVariant,
    TransformVariant,
};
pub use pool::{
    build_episode, Corpus, Episode, EpisodeOptions, PoolEntry, SampleRef, TaskPool, VendorFilter,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Semantic,
    Transformation,
    Generative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[serde(rename = "iou")]
    IoU,
    F1,
    Mae,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::Mae)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::IoU => "IoU",
            MetricKind::F1 => "F1",
            MetricKind::Mae => "MAE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticVariant {
    Segmentation,
    Edges,
    Skeleton,
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenVariant {
    BinaryLayerSeg,
    RetinaBoundary,
    RecoloredFluidSeg,
    SpDenoise,
    #[serde(rename = "inpaint2x")]
    Inpaint2x,
    Outpaint,
}

/// Every task kind the engine can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskVariant {
    Semantic(SemanticVariant),
    Transform(TransformVariant),
    Generative(GenerativeVariant),
    Unseen(UnseenVariant),
}

impl TaskVariant {
    pub fn family(self) -> TaskFamily {
        match self {
            TaskVariant::Semantic(_) => TaskFamily::Semantic,
            TaskVariant::Transform(_) => TaskFamily::Transformation,
            TaskVariant::Generative(_) => TaskFamily::Generative,
            TaskVariant::Unseen(u) => match u {
                UnseenVariant::BinaryLayerSeg
                | UnseenVariant::RetinaBoundary
                | UnseenVariant::RecoloredFluidSeg => TaskFamily::Semantic,
                UnseenVariant::SpDenoise | UnseenVariant::Inpaint2x | UnseenVariant::Outpaint => {
                    TaskFamily::Generative
                }
            },
        }
    }

    pub fn metric(self) -> MetricKind {
        match self {
            TaskVariant::Semantic(SemanticVariant::Segmentation | SemanticVariant::Coarse) => {
                MetricKind::IoU
            }
            TaskVariant::Semantic(SemanticVariant::Edges | SemanticVariant::Skeleton) => {
                MetricKind::F1
            }
            TaskVariant::Unseen(
                UnseenVariant::BinaryLayerSeg | UnseenVariant::RecoloredFluidSeg,
            ) => MetricKind::IoU,
            TaskVariant::Unseen(UnseenVariant::RetinaBoundary) => MetricKind::F1,
            _ => MetricKind::Mae,
        }
    }

    pub fn is_semantic(self) -> bool {
        self.family() == TaskFamily::Semantic
    }

    /// Whether this variant needs a label map on its source samples.
    pub fn needs_labels(self) -> bool {
        self.is_semantic()
    }

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }
}

impl std::str::FromStr for TaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown task variant `{s}`")))
    }
}

pub const SEEN_SEMANTIC: [SemanticVariant; 4] = [
    SemanticVariant::Segmentation,
    SemanticVariant::Edges,
    SemanticVariant::Skeleton,
    SemanticVariant::Coarse,
];
pub const SEEN_TRANSFORM: [TransformVariant; 4] = [
    TransformVariant::Rot90,
    TransformVariant::Rot270,
    TransformVariant::Invert,
    TransformVariant::Revert,
];
pub const SEEN_GENERATIVE: [GenerativeVariant; 3] = [
    GenerativeVariant::GaussDenoise,
    GenerativeVariant::Superres,
    GenerativeVariant::Inpaint,
];

/// Foreground color of the single-class unseen targets.
pub const DEFAULT_UNSEEN_FOREGROUND: Rgb8 = [255, 128, 0];

/// Datasets pooled into one task source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetGroup {
    pub name: String,
    pub role: DatasetRole,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnseenTaskSpec {
    pub variant: UnseenVariant,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub groups: Vec<DatasetGroup>,
    pub params: DegradationParams,
    pub unseen: Vec<UnseenTaskSpec>,
    pub unseen_foreground: Rgb8,
    pub min_color_distance: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let group = |name: &str, role, members: &[&str]| DatasetGroup {
            name: name.to_string(),
            role,
            members: members.iter().map(|s| s.to_string()).collect(),
        };
        let unseen = |variant, group: &str| UnseenTaskSpec {
            variant,
            group: group.to_string(),
        };
        Self {
            groups: vec![
                group("PD-LAYERS", DatasetRole::Layers, &["PD-LAYERS"]),
                group("PD-DME", DatasetRole::Dme, &["PD-DME"]),
                group("PD-UMN", DatasetRole::Umn, &["PD-UMN"]),
                group(
                    "PD-RETOUCH",
                    DatasetRole::Retouch,
                    &["PD-RETOUCH-A", "PD-RETOUCH-B", "PD-RETOUCH-C"],
                ),
                group("PD-OCTDL", DatasetRole::Octdl, &["PD-OCTDL"]),
            ],
            params: DegradationParams::default(),
            unseen: vec![
                unseen(UnseenVariant::BinaryLayerSeg, "PD-LAYERS"),
                unseen(UnseenVariant::RetinaBoundary, "PD-LAYERS"),
                unseen(UnseenVariant::RecoloredFluidSeg, "PD-RETOUCH"),
                unseen(UnseenVariant::SpDenoise, "PD-OCTDL"),
                unseen(UnseenVariant::Inpaint2x, "PD-OCTDL"),
                unseen(UnseenVariant::Outpaint, "PD-OCTDL"),
            ],
            unseen_foreground: DEFAULT_UNSEEN_FOREGROUND,
            min_color_distance: DEFAULT_MIN_COLOR_DISTANCE,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for (i, g) in self.groups.iter().enumerate() {
            if self.groups[..i].iter().any(|o| o.name == g.name) {
                return Err(Error::Config(format!(
                    "duplicate dataset group `{}`",
                    g.name
                )));
            }
            if g.members.is_empty() {
                return Err(Error::Config(format!(
                    "dataset group `{}` has no members",
                    g.name
                )));
            }
        }
        for u in &self.unseen {
            if !self.groups.iter().any(|g| g.name == u.group) {
                return Err(Error::Config(format!(
                    "unseen task refers to unknown group `{}`",
                    u.group
                )));
            }
        }
        Ok(())
    }

    pub fn group(&self, name: &str) -> Option<&DatasetGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub id: String,
    pub family: TaskFamily,
    pub variant: TaskVariant,
    /// Dataset group the task draws from.
    pub dataset: String,
    /// Member manifests of that group.
    pub sources: Vec<String>,
    pub role: DatasetRole,
    pub seen: bool,
    pub metric: MetricKind,
    pub params: DegradationParams,
    /// Class colors of semantic targets before any recoloring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<Palette>,
}

impl TaskDescriptor {
    pub fn new(
        variant: TaskVariant,
        group: &DatasetGroup,
        seen: bool,
        config: &TaskConfig,
        base_palette: Option<Palette>,
    ) -> Result<Self> {
        let palette = match variant {
            TaskVariant::Unseen(UnseenVariant::BinaryLayerSeg | UnseenVariant::RetinaBoundary) => {
                Some(Palette::from_colors(&[
                    [0, 0, 0],
                    config.unseen_foreground,
                ])?)
            }
            v if v.is_semantic() => {
                Some(base_palette.unwrap_or_else(|| group.role.default_palette()))
            }
            _ => None,
        };
        Ok(Self {
            id: format!("{}:{}", group.name, variant.name()),
            family: variant.family(),
            variant,
            dataset: group.name.clone(),
            sources: group.members.clone(),
            role: group.role,
            seen,
            metric: variant.metric(),
            params: config.params,
            palette,
        })
    }
}

fn roles_for(variant: TaskVariant) -> &'static [DatasetRole] {
    match variant {
        TaskVariant::Semantic(_) => &[
            DatasetRole::Layers,
            DatasetRole::Dme,
            DatasetRole::Umn,
            DatasetRole::Retouch,
        ],
        TaskVariant::Transform(_) | TaskVariant::Generative(_) => &[DatasetRole::Octdl],
        TaskVariant::Unseen(UnseenVariant::BinaryLayerSeg | UnseenVariant::RetinaBoundary) => {
            &[DatasetRole::Layers]
        }
        TaskVariant::Unseen(UnseenVariant::RecoloredFluidSeg) => &[DatasetRole::Retouch],
        TaskVariant::Unseen(_) => &[
            DatasetRole::Layers,
            DatasetRole::Dme,
            DatasetRole::Umn,
            DatasetRole::Retouch,
            DatasetRole::Octdl,
        ],
    }
}

/// Lists the seen tasks (semantic variants on every labeled group,
/// transformation and generative variants on image-only groups) followed by
/// the configured unseen tasks.
pub fn enumerate_tasks(
    manifests: &[DatasetManifest],
    config: &TaskConfig,
) -> Result<Vec<TaskDescriptor>> {
    config.validate()?;
    let palette_of = |group: &DatasetGroup| -> Result<Palette> {
        let first = &group.members[0];
        let m = manifests.iter().find(|m| &m.name == first).ok_or_else(|| {
            Error::Config(format!(
                "missing dataset `{first}` for group `{}`",
                group.name
            ))
        })?;
        Ok(m.palette.clone())
    };
    for g in &config.groups {
        for member in &g.members {
            if !manifests.iter().any(|m| &m.name == member) {
                return Err(Error::Config(format!(
                    "missing dataset `{member}` for group `{}`",
                    g.name
                )));
            }
        }
    }
    let mut tasks = Vec::new();
    for g in &config.groups {
        let palette = g.role.is_labeled().then(|| palette_of(g)).transpose()?;
        match g.role {
            DatasetRole::Octdl => {
                for v in SEEN_TRANSFORM {
                    tasks.push(TaskDescriptor::new(
                        TaskVariant::Transform(v),
                        g,
                        true,
                        config,
                        None,
                    )?);
                }
                for v in SEEN_GENERATIVE {
                    tasks.push(TaskDescriptor::new(
                        TaskVariant::Generative(v),
                        g,
                        true,
                        config,
                        None,
                    )?);
                }
            }
            _ => {
                for v in SEEN_SEMANTIC {
                    tasks.push(TaskDescriptor::new(
                        TaskVariant::Semantic(v),
                        g,
                        true,
                        config,
                        palette.clone(),
                    )?);
                }
            }
        }
    }
    for u in &config.unseen {
        let g = config.group(&u.group).expect("validated");
        let variant = TaskVariant::Unseen(u.variant);
        if !roles_for(variant).contains(&g.role) {
            return Err(Error::Config(format!(
                "unseen task {} cannot run on {} data",
                variant.name(),
                g.role
            )));
        }
        let palette = g.role.is_labeled().then(|| palette_of(g)).transpose()?;
        tasks.push(TaskDescriptor::new(variant, g, false, config, palette)?);
    }
    Ok(tasks)
}

/// Class structure of a semantic target.
pub fn semantic_labels(labels: &LabelMap, variant: SemanticVariant) -> LabelMap {
    match variant {
        SemanticVariant::Segmentation => labels.clone(),
        SemanticVariant::Edges => semantic::edge_labels(labels),
        SemanticVariant::Skeleton => semantic::skeleton_labels(labels),
        SemanticVariant::Coarse => semantic::coarse_labels(labels),
    }
}

pub fn make_semantic_target(
    labels: &LabelMap,
    palette: &Palette,
    variant: SemanticVariant,
) -> Result<Image> {
    encode_labels(&semantic_labels(labels, variant), palette)
}

/// Input, output and, for semantic tasks, the target's class structure.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub input: Image,
    pub output: Image,
    pub target_labels: Option<LabelMap>,
    pub palette: Option<Palette>,
}

fn require_labels<'a>(labels: Option<&'a LabelMap>, what: &str) -> Result<&'a LabelMap> {
    labels.ok_or_else(|| Error::Data(format!("{what} needs a label map")))
}

/// Builds an unseen-task pair. `episode_palette` carries the colors shared by
/// an entire recolored episode; without it a fresh palette is drawn.
pub fn make_unseen_pair<R: Rng + ?Sized>(
    image: &Image,
    labels: Option<&LabelMap>,
    variant: UnseenVariant,
    params: &DegradationParams,
    foreground: Rgb8,
    episode_palette: Option<&Palette>,
    rng: &mut R,
) -> Result<TaskPair> {
    params.validate()?;
    let binary_palette = || Palette::from_colors(&[[0, 0, 0], foreground]);
    let pair = match variant {
        UnseenVariant::BinaryLayerSeg => {
            let l = require_labels(labels, "binary_layer_seg")?;
            let merged = LabelMap::from_vec(
                l.width(),
                l.height(),
                l.ids().iter().map(|&v| u8::from(v != 0)).collect(),
            )?;
            let palette = binary_palette()?;
            TaskPair {
                input: image.clone(),
                output: encode_labels(&merged, &palette)?,
                target_labels: Some(merged),
                palette: Some(palette),
            }
        }
        UnseenVariant::RetinaBoundary => {
            let l = require_labels(labels, "retina_boundary")?;
            let (w, h) = l.dims();
            let contour = semantic::mask_contour(&l.foreground_mask(), w, h);
            let map = LabelMap::from_vec(w, h, contour.iter().map(|&b| u8::from(b)).collect())?;
            let palette = binary_palette()?;
            TaskPair {
                input: image.clone(),
                output: encode_labels(&map, &palette)?,
                target_labels: Some(map),
                palette: Some(palette),
            }
        }
        UnseenVariant::RecoloredFluidSeg => {
            let l = require_labels(labels, "recolored_fluid_seg")?;
            let palette = match episode_palette {
                Some(p) => p.clone(),
                None => {
                    let n = DatasetRole::Retouch.class_names().len();
                    let colors = draw_separated_colors(n, &[], DEFAULT_MIN_COLOR_DISTANCE, rng)?;
                    Palette::from_colors(&colors)?
                }
            };
            TaskPair {
                input: image.clone(),
                output: encode_labels(l, &palette)?,
                target_labels: Some(l.clone()),
                palette: Some(palette),
            }
        }
        UnseenVariant::SpDenoise => TaskPair {
            input: pixel::salt_and_pepper(image, params.sp_density, rng),
            output: image.clone(),
            target_labels: None,
            palette: None,
        },
        UnseenVariant::Inpaint2x => TaskPair {
            input: pixel::mask_two_patches(image, params.inpaint2x_fraction, rng)?,
            output: image.clone(),
            target_labels: None,
            palette: None,
        },
        UnseenVariant::Outpaint => TaskPair {
            input: pixel::mask_frame(image, params.outpaint_fraction),
            output: image.clone(),
            target_labels: None,
            palette: None,
        },
    };
    Ok(pair)
}

/// Generates the pair of `task` for one source sample.
pub fn make_task_pair<R: Rng + ?Sized>(
    task: &TaskDescriptor,
    image: &Image,
    labels: Option<&LabelMap>,
    foreground: Rgb8,
    episode_palette: Option<&Palette>,
    rng: &mut R,
) -> Result<TaskPair> {
    if image.width() != image.height()
        && matches!(
            task.variant,
            TaskVariant::Transform(TransformVariant::Rot90 | TransformVariant::Rot270)
        )
    {
        return Err(Error::Config("rotation tasks need square images".into()));
    }
    match task.variant {
        TaskVariant::Semantic(v) => {
            let l = require_labels(labels, &task.id)?;
            let palette = episode_palette
                .or(task.palette.as_ref())
                .ok_or_else(|| Error::Config(format!("{} has no palette", task.id)))?;
            let target = semantic_labels(l, v);
            Ok(TaskPair {
                input: image.clone(),
                output: encode_labels(&target, palette)?,
                target_labels: Some(target),
                palette: Some(palette.clone()),
            })
        }
        TaskVariant::Transform(v) => {
            let (input, output) = make_transform_pair(image, v);
            Ok(TaskPair {
                input,
                output,
                target_labels: None,
                palette: None,
            })
        }
        TaskVariant::Generative(v) => {
            let (input, output) = make_generative_pair(image, v, &task.params, rng)?;
            Ok(TaskPair {
                input,
                output,
                target_labels: None,
                palette: None,
            })
        }
        TaskVariant::Unseen(u) => make_unseen_pair(
            image,
            labels,
            u,
            &task.params,
            foreground,
            episode_palette,
            rng,
        ),
    }
}
