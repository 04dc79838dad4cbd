//! In-memory corpus, per-task sample pools and episode assembly.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{make_task_pair, TaskDescriptor, TaskPair, TaskVariant, UnseenVariant};
use crate::context::{ContextPair, ContextSet};
use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::manifest::{DatasetManifest, LoadedDataset, Split};
use crate::palette::{random_recolor, Palette, Rgb8};
use crate::phantom::manifest_path;

/// Address of one sample in a [`Corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub dataset: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    datasets: Vec<LoadedDataset>,
    by_name: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(datasets: Vec<LoadedDataset>) -> Result<Self> {
        let mut by_name = HashMap::new();
        for (i, d) in datasets.iter().enumerate() {
            if by_name.insert(d.name().to_string(), i).is_some() {
                return Err(Error::Config(format!(
                    "dataset `{}` loaded twice",
                    d.name()
                )));
            }
        }
        Ok(Self { datasets, by_name })
    }

    /// Loads `root/<name>/manifest.json` for each name.
    pub fn load(root: &Path, names: &[String]) -> Result<Self> {
        let datasets = names
            .iter()
            .map(|n| LoadedDataset::load(&manifest_path(root, n)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(datasets)
    }

    /// Loads every dataset directory below `root` holding a manifest.
    pub fn load_dir(root: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if manifest_path(root, &name).is_file() {
                names.push(name);
            }
        }
        if names.is_empty() {
            return Err(Error::Data(format!(
                "no dataset manifests below {}",
                root.display()
            )));
        }
        names.sort();
        Self::load(root, &names)
    }

    pub fn datasets(&self) -> &[LoadedDataset] {
        &self.datasets
    }

    pub fn manifests(&self) -> Vec<DatasetManifest> {
        self.datasets.iter().map(|d| d.manifest.clone()).collect()
    }

    pub fn dataset_index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn dataset(&self, name: &str) -> Option<&LoadedDataset> {
        self.dataset_index(name).map(|i| &self.datasets[i])
    }

    pub fn image(&self, r: SampleRef) -> &Image {
        &self.datasets[r.dataset].images[r.index]
    }

    pub fn labels(&self, r: SampleRef) -> Option<&LabelMap> {
        self.datasets[r.dataset].labels[r.index].as_ref()
    }

    pub fn vendor(&self, r: SampleRef) -> &str {
        &self.datasets[r.dataset].manifest.samples[r.index].vendor
    }

    /// `dataset/sample` identifier used in logs.
    pub fn sample_name(&self, r: SampleRef) -> String {
        let d = &self.datasets[r.dataset];
        format!("{}/{}", d.name(), d.manifest.samples[r.index].id)
    }

    pub fn refs(&self, dataset: &str, split: Split) -> Result<Vec<SampleRef>> {
        let di = self
            .dataset_index(dataset)
            .ok_or_else(|| Error::Config(format!("dataset `{dataset}` is not loaded")))?;
        Ok(self.datasets[di]
            .split_indices(split)
            .into_iter()
            .map(|index| SampleRef { dataset: di, index })
            .collect())
    }
}

/// Which acquisition vendors a pool admits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum VendorFilter {
    #[default]
    All,
    Exclude(String),
    Only(String),
}

impl VendorFilter {
    pub fn admits(&self, vendor: &str) -> bool {
        match self {
            VendorFilter::All => true,
            VendorFilter::Exclude(v) => vendor != v,
            VendorFilter::Only(v) => vendor == v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub task: TaskDescriptor,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

impl PoolEntry {
    pub fn split(&self, split: Split) -> &[SampleRef] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Tasks with the samples each may draw from, per split.
#[derive(Debug, Clone)]
pub struct TaskPool {
    entries: Vec<PoolEntry>,
}

impl TaskPool {
    pub fn new(corpus: &Corpus, tasks: &[TaskDescriptor], filter: &VendorFilter) -> Result<Self> {
        let mut entries = Vec::with_capacity(tasks.len());
        for task in tasks {
            let mut by_split = [Vec::new(), Vec::new(), Vec::new()];
            for source in &task.sources {
                for (slot, split) in
                    by_split
                        .iter_mut()
                        .zip([Split::Train, Split::Val, Split::Test])
                {
                    for r in corpus.refs(source, split)? {
                        if !filter.admits(corpus.vendor(r)) {
                            continue;
                        }
                        if task.variant.needs_labels() && corpus.labels(r).is_none() {
                            return Err(Error::Data(format!(
                                "{} needs labels but {} has none",
                                task.id,
                                corpus.sample_name(r)
                            )));
                        }
                        slot.push(r);
                    }
                }
            }
            let [train, val, test] = by_split;
            entries.push(PoolEntry {
                task: task.clone(),
                train,
                val,
                test,
            });
        }
        Ok(Self { entries })
    }

    /// A pool over hand-picked entries, e.g. a train split cut to a few samples.
    pub fn from_entries(entries: Vec<PoolEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn entry(&self, task_id: &str) -> Option<&PoolEntry> {
        self.entries.iter().find(|e| e.task.id == task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskDescriptor> {
        self.entries.iter().map(|e| &e.task)
    }

    /// Keeps only the tasks matching `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&TaskDescriptor) -> bool) {
        self.entries.retain(|e| keep(&e.task));
    }

    pub fn total(&self, split: Split) -> usize {
        self.entries.iter().map(|e| e.split(split).len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeOptions {
    pub context_size: usize,
    /// Minimum context pairs with a non-background target (semantic tasks).
    pub min_nonempty: usize,
    /// Recolor semantic episodes with fresh class colors.
    pub recolor: bool,
    pub min_color_distance: f64,
    pub max_retries: usize,
    pub unseen_foreground: Rgb8,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            context_size: 6,
            min_nonempty: 2,
            recolor: false,
            min_color_distance: crate::palette::DEFAULT_MIN_COLOR_DISTANCE,
            max_retries: 50,
            unseen_foreground: super::DEFAULT_UNSEEN_FOREGROUND,
        }
    }
}

/// One in-context problem: context pairs, a query and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: String,
    pub context: ContextSet,
    pub query: Image,
    pub target: Image,
    /// Class structure of the target for semantic tasks.
    pub target_labels: Option<LabelMap>,
    /// Colors in effect for this episode after any recoloring.
    pub palette: Option<Palette>,
    pub query_ref: SampleRef,
    pub context_refs: Vec<SampleRef>,
}

fn pair_for<R: Rng + ?Sized>(
    corpus: &Corpus,
    task: &TaskDescriptor,
    r: SampleRef,
    opts: &EpisodeOptions,
    base_palette: Option<&Palette>,
    rng: &mut R,
) -> Result<TaskPair> {
    make_task_pair(
        task,
        corpus.image(r),
        corpus.labels(r),
        opts.unseen_foreground,
        base_palette,
        rng,
    )
}

/// Assembles an episode around `query`. Context pairs are drawn without
/// replacement from `candidates` minus the query. Semantic episodes are
/// redrawn until at least `min_nonempty` context targets contain foreground.
pub fn build_episode<R: Rng + ?Sized>(
    corpus: &Corpus,
    task: &TaskDescriptor,
    query: SampleRef,
    candidates: &[SampleRef],
    opts: &EpisodeOptions,
    rng: &mut R,
) -> Result<Episode> {
    if opts.context_size == 0 {
        return Err(Error::Context("context size must be at least 1".into()));
    }
    let pool: Vec<SampleRef> = candidates.iter().copied().filter(|&c| c != query).collect();
    if pool.len() < opts.context_size {
        return Err(Error::Sampling {
            task: task.id.clone(),
            message: format!(
                "{} candidates for a context of {}",
                pool.len(),
                opts.context_size
            ),
        });
    }
    let recolored_task = task.variant == TaskVariant::Unseen(UnseenVariant::RecoloredFluidSeg);
    let base_palette = if recolored_task {
        task.palette.as_ref()
    } else {
        None
    };
    let need = if task.variant.is_semantic() {
        opts.min_nonempty.min(opts.context_size)
    } else {
        0
    };

    let mut chosen = None;
    for _ in 0..opts.max_retries.max(1) {
        let picks: Vec<SampleRef> = sample_indices(rng, pool.len(), opts.context_size)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let pairs = picks
            .iter()
            .map(|&r| pair_for(corpus, task, r, opts, base_palette, rng))
            .collect::<Result<Vec<_>>>()?;
        let nonempty = pairs
            .iter()
            .filter(|p| {
                p.target_labels
                    .as_ref()
                    .is_some_and(LabelMap::has_foreground)
            })
            .count();
        if nonempty >= need {
            chosen = Some((picks, pairs));
            break;
        }
    }
    let (context_refs, pairs) = chosen.ok_or_else(|| Error::Sampling {
        task: task.id.clone(),
        message: format!(
            "no context with {need} non-empty targets after {} draws",
            opts.max_retries.max(1)
        ),
    })?;

    let q = pair_for(corpus, task, query, opts, base_palette, rng)?;
    let context = ContextSet::new(
        pairs
            .into_iter()
            .map(|p| ContextPair::new(p.input, p.output))
            .collect::<Result<Vec<_>>>()?,
    )?;
    if context.dims() != q.input.dims() {
        return Err(Error::Shape(format!(
            "context is {:?} but query is {:?}",
            context.dims(),
            q.input.dims()
        )));
    }

    let recolor = task.variant.is_semantic() && (opts.recolor || recolored_task);
    let (context, target, palette) = match (&q.palette, recolor) {
        (Some(p), true) => {
            let (c, t, p) = random_recolor(&context, &q.output, p, opts.min_color_distance, rng)?;
            (c, t, Some(p))
        }
        _ => (context, q.output, q.palette),
    };
    Ok(Episode {
        task: task.id.clone(),
        context,
        query: q.input,
        target,
        target_labels: q.target_labels,
        palette,
        query_ref: query,
        context_refs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{SampleEntry, Splits};
    use crate::palette::decode_to_classes;
    use crate::phantom::{generate_phantom_scan, DatasetRole, ScanSpec, VendorStyle};
    use crate::tasks::{enumerate_tasks, TaskConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(
        name: &str,
        role: DatasetRole,
        vendor: &str,
        n: usize,
        healthy: f64,
    ) -> LoadedDataset {
        let spec = ScanSpec {
            size: 32,
            healthy_fraction: healthy,
        };
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut samples = Vec::new();
        for i in 0..n {
            let (img, lab) = generate_phantom_scan(
                i as u64 + 100 * name.len() as u64,
                &VendorStyle::default(),
                role,
                &spec,
            )
            .unwrap();
            images.push(img);
            labels.push(role.is_labeled().then_some(lab));
            samples.push(SampleEntry {
                id: format!("s{i}"),
                image: String::new(),
                labels: None,
                vendor: vendor.to_string(),
            });
        }
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let manifest = DatasetManifest {
            name: name.to_string(),
            class_names: role.class_names(),
            palette: role.default_palette(),
            samples,
            splits: Splits {
                train: ids[..n / 2].to_vec(),
                val: vec![],
                test: ids[n / 2..].to_vec(),
            },
        };
        LoadedDataset::from_parts(manifest, ".".into(), images, labels)
    }

    fn corpus() -> Corpus {
        Corpus::new(vec![
            dataset("PD-LAYERS", DatasetRole::Layers, "phantom", 12, 0.0),
            dataset("PD-DME", DatasetRole::Dme, "phantom", 16, 0.5),
            dataset("PD-UMN", DatasetRole::Umn, "phantom", 12, 0.5),
            dataset("PD-RETOUCH-A", DatasetRole::Retouch, "A", 10, 0.3),
            dataset("PD-RETOUCH-B", DatasetRole::Retouch, "B", 10, 0.3),
            dataset("PD-RETOUCH-C", DatasetRole::Retouch, "C", 10, 0.3),
            dataset("PD-OCTDL", DatasetRole::Octdl, "phantom", 12, 0.2),
        ])
        .unwrap()
    }

    fn pool(c: &Corpus, filter: &VendorFilter) -> TaskPool {
        let tasks = enumerate_tasks(&c.manifests(), &TaskConfig::default()).unwrap();
        TaskPool::new(c, &tasks, filter).unwrap()
    }

    #[test]
    fn excluded_vendor_never_enters_any_pool() {
        let c = corpus();
        let p = pool(&c, &VendorFilter::Exclude("B".into()));
        for e in p.entries() {
            for split in [Split::Train, Split::Val, Split::Test] {
                assert!(e.split(split).iter().all(|&r| c.vendor(r) != "B"));
            }
        }
        let retouch = p.entry("PD-RETOUCH:segmentation").unwrap();
        assert_eq!(retouch.train.len(), 10);
    }

    #[test]
    fn context_is_disjoint_from_query_and_has_foreground() {
        let c = corpus();
        let p = pool(&c, &VendorFilter::All);
        let e = p.entry("PD-DME:segmentation").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q in &e.test {
            let cands: Vec<SampleRef> = e.train.iter().chain(std::iter::once(q)).copied().collect();
            let ep = build_episode(
                &c,
                &e.task,
                *q,
                &cands,
                &EpisodeOptions {
                    context_size: 5,
                    ..Default::default()
                },
                &mut rng,
            );
            let ep = match ep {
                Ok(ep) => ep,
                Err(Error::Sampling { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            assert!(!ep.context_refs.contains(q));
            let mut uniq = ep.context_refs.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 5);
            let nonempty = ep
                .context_refs
                .iter()
                .filter(|&&r| c.labels(r).unwrap().has_foreground())
                .count();
            assert!(nonempty >= 2);
        }
    }

    #[test]
    fn all_healthy_candidates_give_sampling_error() {
        let c = Corpus::new(vec![dataset("PD-DME", DatasetRole::Dme, "phantom", 8, 1.0)]).unwrap();
        let task = TaskDescriptor::new(
            TaskVariant::Semantic(crate::tasks::SemanticVariant::Segmentation),
            &crate::tasks::DatasetGroup {
                name: "PD-DME".into(),
                role: DatasetRole::Dme,
                members: vec!["PD-DME".into()],
            },
            true,
            &TaskConfig::default(),
            None,
        )
        .unwrap();
        let refs = c.refs("PD-DME", Split::Train).unwrap();
        let test = c.refs("PD-DME", Split::Test).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = EpisodeOptions {
            context_size: 3,
            max_retries: 5,
            ..Default::default()
        };
        let r = build_episode(&c, &task, test[0], &refs, &opts, &mut rng);
        assert!(matches!(r, Err(Error::Sampling { .. })));
    }

    #[test]
    fn too_few_candidates_is_sampling_error() {
        let c = corpus();
        let p = pool(&c, &VendorFilter::All);
        let e = p.entry("PD-OCTDL:rot90").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = EpisodeOptions {
            context_size: 40,
            ..Default::default()
        };
        assert!(matches!(
            build_episode(&c, &e.task, e.test[0], &e.train, &opts, &mut rng),
            Err(Error::Sampling { .. })
        ));
    }

    #[test]
    fn recolored_episode_is_coherent() {
        let c = corpus();
        let p = pool(&c, &VendorFilter::All);
        let e = p.entry("PD-RETOUCH:recolored_fluid_seg").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opts = EpisodeOptions {
            context_size: 4,
            ..Default::default()
        };
        let ep = build_episode(&c, &e.task, e.test[0], &e.train, &opts, &mut rng).unwrap();
        let palette = ep.palette.clone().unwrap();
        assert_ne!(palette, DatasetRole::Retouch.default_palette());
        for (pair, &r) in ep.context.pairs().iter().zip(&ep.context_refs) {
            let decoded = decode_to_classes(&pair.output, &palette).unwrap().labels;
            assert_eq!(&decoded, c.labels(r).unwrap());
        }
        assert_eq!(
            &decode_to_classes(&ep.target, &palette).unwrap().labels,
            ep.target_labels.as_ref().unwrap()
        );
    }

    #[test]
    fn episodes_are_reproducible() {
        let c = corpus();
        let p = pool(&c, &VendorFilter::All);
        for e in p.entries() {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let opts = EpisodeOptions {
                    context_size: 3,
                    recolor: true,
                    ..Default::default()
                };
                build_episode(&c, &e.task, e.test[0], &e.train, &opts, &mut rng).unwrap()
            };
            assert_eq!(run(), run(), "{}", e.task.id);
        }
    }
}
