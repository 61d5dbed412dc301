use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::batch::{SliceBatch, SliceRef};
use crate::error::{Error, Result};
use crate::pairing::{PairBatch, PairGenerator};
use crate::rng::Rng;
use crate::synthdata::{load_split, subsample_indices, DatasetSplit, Volume, MANIFEST_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-domain access counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainAccess {
    /// Files read from disk (manifests, image and label payloads).
    pub files_read: usize,
    /// Splits materialized, from disk or memory.
    pub split_loads: usize,
    /// Slice images handed to training.
    pub image_reads: usize,
    /// Slice label sets handed to training.
    pub label_reads: usize,
}

impl DomainAccess {
    pub fn is_untouched(&self) -> bool {
        *self == Self::default()
    }
}

struct DomainEntry {
    dir: Option<PathBuf>,
    splits: [OnceLock<Vec<Volume>>; 3],
}

/// Datasets by domain id, loaded lazily split by split. Every access is counted
/// so that callers can assert which domains a run touched.
pub struct Datasets {
    entries: BTreeMap<String, DomainEntry>,
    log: Mutex<BTreeMap<String, DomainAccess>>,
}

impl std::fmt::Debug for Datasets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Datasets").field("domains", &self.entries.keys().collect::<Vec<_>>()).finish()
    }
}

impl Datasets {
    pub fn in_memory(domains: impl IntoIterator<Item = (String, DatasetSplit)>) -> Self {
        let entries = domains
            .into_iter()
            .map(|(id, split)| {
                let e = DomainEntry {
                    dir: None,
                    splits: Default::default(),
                };
                let DatasetSplit { train, val, test } = split;
                for (slot, v) in e.splits.iter().zip([train, val, test]) {
                    let _ = slot.set(v);
                }
                (id, e)
            })
            .collect();
        Self {
            entries,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    /// Every subdirectory of `root` holding `train/manifest.txt` is a domain
    /// named after the directory. Nothing is read until first access.
    pub fn from_dir(root: &Path) -> Result<Self> {
        let rd = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut entries = BTreeMap::new();
        for item in rd {
            let item = item.map_err(|e| Error::io(root, e))?;
            let path = item.path();
            if path.join("train").join(MANIFEST_FILE).is_file() {
                let id = item.file_name().to_string_lossy().into_owned();
                entries.insert(
                    id,
                    DomainEntry {
                        dir: Some(path),
                        splits: Default::default(),
                    },
                );
            }
        }
        Ok(Self {
            entries,
            log: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn contains(&self, domain: &str) -> bool {
        self.entries.contains_key(domain)
    }

    pub fn split(&self, domain: &str, split: SplitName) -> Result<&[Volume]> {
        let entry = self
            .entries
            .get(domain)
            .ok_or_else(|| Error::Missing(format!("dataset for domain `{domain}`")))?;
        let slot = &entry.splits[split.index()];
        if slot.get().is_none() {
            let dir = entry.dir.as_ref().expect("in-memory splits are preset").join(split.as_str());
            let volumes = load_split(&dir)?;
            let files = 1 + volumes.iter().map(|v| 1 + usize::from(v.labels.is_some())).sum::<usize>();
            if let Some(v) = volumes.iter().find(|v| v.domain_id != domain) {
                return Err(Error::format(&dir, format!("volume {} belongs to domain `{}`", v.volume_id, v.domain_id)));
            }
            let _ = slot.set(volumes);
            self.record(domain, |a| a.files_read += files);
        }
        self.record(domain, |a| a.split_loads += 1);
        Ok(slot.get().expect("loaded above"))
    }

    pub fn record(&self, domain: &str, f: impl FnOnce(&mut DomainAccess)) {
        let mut log = self.log.lock().expect("access log poisoned");
        f(log.entry(domain.to_string()).or_default());
    }

    pub fn access(&self, domain: &str) -> DomainAccess {
        self.log.lock().expect("access log poisoned").get(domain).cloned().unwrap_or_default()
    }

    pub fn access_log(&self) -> BTreeMap<String, DomainAccess> {
        self.log.lock().expect("access log poisoned").clone()
    }

    pub fn reset_access_log(&self) {
        self.log.lock().expect("access log poisoned").clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolRole {
    Source,
    Target,
}

/// Unlabeled images of one domain available to the contrastive branch.
#[derive(Debug)]
pub struct PairPool<'a> {
    pub domain_id: String,
    pub role: PoolRole,
    pub volumes: Vec<&'a Volume>,
    anchors: Vec<(usize, usize)>,
}

impl PairPool<'_> {
    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }
}

/// Everything one training run draws on, resolved from the datasets once.
pub struct TrainingData<'a> {
    datasets: &'a Datasets,
    pub classes: Vec<String>,
    pub shape: (usize, usize),
    /// Labeled source slices `(volume, slice)`.
    pub labeled: Vec<(&'a Volume, usize)>,
    pub pools: Vec<PairPool<'a>>,
    pub val: Vec<&'a Volume>,
    pub generator: PairGenerator,
    pub batch_size_sup: usize,
    pub batch_size_con: usize,
}

/// Batches consumed by one optimizer update.
#[derive(Clone, Debug)]
pub struct StepBatches {
    pub sup: SliceBatch,
    pub source_pairs: Vec<PairBatch>,
    pub target_pairs: Vec<PairBatch>,
}

impl StepBatches {
    pub fn pair_batches(&self) -> impl Iterator<Item = &PairBatch> {
        self.source_pairs.iter().chain(&self.target_pairs)
    }
}

impl<'a> TrainingData<'a> {
    /// Resolves the labeled source pool, the per-domain pair pools and the
    /// validation volumes. Target domains are only opened when the run
    /// actually consumes unlabeled target images.
    pub fn prepare(datasets: &'a Datasets, config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let arch = config.effective_arch();
        let classes = arch.classes();
        let mut labeled = Vec::new();
        let mut val = Vec::new();
        let mut pools = Vec::new();
        let contrastive = config.model_variant.is_contrastive() && !config.model_variant.is_pretrain();
        for d in &config.source_domains {
            let train = datasets.split(d, SplitName::Train)?;
            for v in train {
                check_volume(v, &classes, arch.input_shape)?;
                if v.labels.is_some() {
                    labeled.extend(v.labeled_slice_indices.iter().map(|&s| (v, s)));
                }
            }
            val.extend(datasets.split(d, SplitName::Val)?.iter().filter(|v| v.labels.is_some()));
            if contrastive {
                pools.push(PairPool::new(d, PoolRole::Source, train.iter().collect()));
            }
        }
        if labeled.is_empty() {
            return Err(Error::validation(
                "source_domains",
                format!("no labeled training slices in {}", config.source_domains.join(", ")),
            ));
        }
        if config.uses_target_data() {
            for d in &config.target_domains {
                let train = datasets.split(d, SplitName::Train)?;
                let keep = subsample_indices(train.len(), config.unlabeled_fraction, seed)?;
                let volumes: Vec<&Volume> = keep.into_iter().map(|i| &train[i]).collect();
                for v in &volumes {
                    check_input_shape(v, arch.input_shape)?;
                }
                if !volumes.is_empty() {
                    pools.push(PairPool::new(d, PoolRole::Target, volumes));
                }
            }
        }
        Ok(Self {
            datasets,
            classes,
            shape: arch.input_shape,
            labeled,
            pools,
            val,
            generator: config.pair_generator(),
            batch_size_sup: config.batch_size_sup,
            batch_size_con: config.batch_size_con,
        })
    }

    /// Target-only pools for contrastive pretraining. Labels are never opened.
    pub fn prepare_pretrain(datasets: &'a Datasets, config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let arch = config.effective_arch();
        let mut pools = Vec::new();
        for d in &config.target_domains {
            let train = datasets.split(d, SplitName::Train)?;
            let keep = subsample_indices(train.len(), config.unlabeled_fraction, seed)?;
            let volumes: Vec<&Volume> = keep.into_iter().map(|i| &train[i]).collect();
            for v in &volumes {
                check_input_shape(v, arch.input_shape)?;
            }
            if !volumes.is_empty() {
                pools.push(PairPool::new(d, PoolRole::Target, volumes));
            }
        }
        if pools.is_empty() {
            return Err(Error::validation("target_domains", "no unlabeled target volumes to pretrain on"));
        }
        Ok(Self {
            datasets,
            classes: arch.classes(),
            shape: arch.input_shape,
            labeled: Vec::new(),
            pools,
            val: Vec::new(),
            generator: config.pair_generator(),
            batch_size_sup: config.batch_size_sup,
            batch_size_con: config.batch_size_con,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.labeled.len().div_ceil(self.batch_size_sup)
    }

    /// Steps of a contrastive-only epoch: one pass over the pooled anchors.
    pub fn pretrain_steps_per_epoch(&self) -> usize {
        let anchors: usize = self.pools.iter().map(|p| p.n_anchors()).sum();
        anchors.div_ceil(self.batch_size_con * self.pools.len()).max(1)
    }

    /// Supervised index batches of one epoch over a fresh permutation; the
    /// last batch is completed from the start of the permutation.
    pub fn epoch_batches(&self, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.labeled.len()).collect();
        order.shuffle(rng);
        let bs = self.batch_size_sup;
        (0..self.steps_per_epoch())
            .map(|s| (0..bs).map(|j| order[(s * bs + j) % order.len()]).collect())
            .collect()
    }

    /// Labeled batch on the experiment class axis; classes a slice's domain
    /// does not annotate are masked out for that sample.
    pub fn supervised_batch(&self, ids: &[usize]) -> Result<SliceBatch> {
        if ids.is_empty() {
            return Err(Error::validation("batch_size_sup", "empty supervised batch"));
        }
        let (h, w) = self.shape;
        let plane = h * w;
        let c = self.classes.len();
        let mut batch = SliceBatch::empty(h, w, c);
        let mut labels = vec![0u8; ids.len() * c * plane];
        for (i, &id) in ids.iter().enumerate() {
            let (v, s) = *self
                .labeled
                .get(id)
                .ok_or_else(|| Error::validation("batch", format!("labeled slice index {id} out of range")))?;
            batch.images.extend_from_slice(v.slice_data(s));
            for (k, class) in self.classes.iter().enumerate() {
                let present = v.class_set.iter().position(|x| x == class);
                batch.class_mask.push(present.is_some());
                if let Some(local) = present {
                    let src = v.label_data(s, local).expect("labeled volume");
                    labels[(i * c + k) * plane..][..plane].copy_from_slice(src);
                }
            }
            batch.provenance.push(SliceRef::of(v, s));
            self.datasets.record(&v.domain_id, |a| {
                a.image_reads += 1;
                a.label_reads += 1;
            });
        }
        batch.labels = Some(labels);
        Ok(batch)
    }

    /// One pair batch per pool, anchors drawn uniformly with replacement.
    pub fn pair_batches(&self, rng: &mut Rng) -> (Vec<PairBatch>, Vec<PairBatch>) {
        let (mut src, mut tgt) = (Vec::new(), Vec::new());
        for pool in &self.pools {
            let pairs = (0..self.batch_size_con)
                .map(|_| {
                    let (vi, s) = pool.anchors[rng.gen_range(0..pool.anchors.len())];
                    self.generator.pair(pool.volumes[vi], s, rng)
                })
                .collect();
            self.datasets.record(&pool.domain_id, |a| a.image_reads += 2 * self.batch_size_con);
            let batch = PairBatch::from_pairs(pairs);
            match pool.role {
                PoolRole::Source => src.push(batch),
                PoolRole::Target => tgt.push(batch),
            }
        }
        (src, tgt)
    }
}

/// The supervised batch for `sup_ids` together with a pair batch per
/// participating domain.
pub fn assemble_step_batches(data: &TrainingData<'_>, sup_ids: &[usize], rng: &mut Rng) -> Result<StepBatches> {
    if data.labeled.is_empty() {
        return Err(Error::validation("source_domains", "empty labeled pool"));
    }
    let sup = data.supervised_batch(sup_ids)?;
    let (source_pairs, target_pairs) = data.pair_batches(rng);
    Ok(StepBatches {
        sup,
        source_pairs,
        target_pairs,
    })
}

impl<'a> PairPool<'a> {
    fn new(domain: &str, role: PoolRole, volumes: Vec<&'a Volume>) -> Self {
        let anchors = volumes
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| (0..v.n_slices).map(move |s| (vi, s)))
            .collect();
        Self {
            domain_id: domain.to_string(),
            role,
            volumes,
            anchors,
        }
    }
}

fn check_input_shape(v: &Volume, shape: (usize, usize)) -> Result<()> {
    if (v.height, v.width) != shape {
        return Err(Error::Shape(format!(
            "volume {}/{} has {}x{} slices, model input is {}x{}",
            v.domain_id, v.volume_id, v.height, v.width, shape.0, shape.1
        )));
    }
    Ok(())
}

fn check_volume(v: &Volume, classes: &[String], shape: (usize, usize)) -> Result<()> {
    check_input_shape(v, shape)?;
    if let Some(c) = v.class_set.iter().find(|c| !classes.contains(c)) {
        return Err(Error::Shape(format!(
            "domain `{}` class `{c}` is not on the experiment class axis ({})",
            v.domain_id,
            classes.join(",")
        )));
    }
    Ok(())
}
