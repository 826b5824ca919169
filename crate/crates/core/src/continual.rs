//! Class-incremental bookkeeping: which classes exist, when and where they
//! are introduced, per-node training views, and evaluation over the classes
//! seen so far.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SplitModel, TrainableHead};
use crate::objective::ClassPartition;
use crate::quant::{FrozenBackbone, QuantParams, QuantTensor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: usize,
    /// 0 for base classes.
    pub session: usize,
    /// Node that learns the class; `None` for base classes.
    pub node: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRegistry {
    entries: Vec<ClassEntry>,
}

impl ClassRegistry {
    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ClassEntry> {
        self.entries.get(id)
    }
}

/// Base classes learned jointly at T0, then one map node -> classes per
/// incremental session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    num_nodes: usize,
    base_classes: Vec<usize>,
    sessions: Vec<Vec<Vec<usize>>>,
}

impl SessionPlan {
    /// Explicit plan. Registering base classes, then each session's classes
    /// node by node, must enumerate `0..K` in order.
    pub fn new(num_nodes: usize, base_classes: Vec<usize>, sessions: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Plan("a plan needs at least one node".into()));
        }
        if base_classes.is_empty() {
            return Err(Error::Plan("at least one base class is required".into()));
        }
        for (t, s) in sessions.iter().enumerate() {
            if s.len() != num_nodes {
                return Err(Error::Plan(format!(
                    "session T{} lists {} nodes, plan has {num_nodes}",
                    t + 1,
                    s.len()
                )));
            }
        }
        let plan = Self {
            num_nodes,
            base_classes,
            sessions,
        };
        for (expected, entry) in plan.registration_order().enumerate() {
            if entry.id != expected {
                return Err(Error::Plan(format!(
                    "class {} registered where class {expected} was expected; ids must be dense and in session/node order",
                    entry.id
                )));
            }
        }
        Ok(plan)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn num_classes(&self) -> usize {
        self.base_classes.len() + self.sessions.iter().flatten().map(Vec::len).sum::<usize>()
    }

    pub fn base_classes(&self) -> &[usize] {
        &self.base_classes
    }

    /// Every class introduced in session `t` (`t = 0` is the base set).
    pub fn session_classes(&self, t: usize) -> Result<Vec<usize>> {
        if t == 0 {
            return Ok(self.base_classes.clone());
        }
        let s = self
            .sessions
            .get(t - 1)
            .ok_or_else(|| Error::Plan(format!("no session T{t}")))?;
        Ok(s.iter().flatten().copied().collect())
    }

    pub fn node_classes(&self, t: usize, node: usize) -> Result<&[usize]> {
        if t == 0 {
            return Err(Error::Plan("T0 is trained centrally, not per node".into()));
        }
        let s = self
            .sessions
            .get(t - 1)
            .ok_or_else(|| Error::Plan(format!("no session T{t}")))?;
        s.get(node)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Plan(format!("no node {node} (plan has {})", self.num_nodes)))
    }

    /// Classes introduced in sessions `0..=t`, ascending.
    pub fn seen_classes(&self, t: usize) -> Result<Vec<usize>> {
        if t > self.num_sessions() {
            return Err(Error::Plan(format!("no session T{t}")));
        }
        let mut seen = self.base_classes.clone();
        for s in &self.sessions[..t] {
            seen.extend(s.iter().flatten());
        }
        seen.sort_unstable();
        Ok(seen)
    }

    /// Old classes are everything from sessions before `t`; new classes are
    /// what `node` learns in `t`.
    pub fn partition(&self, t: usize, node: usize) -> Result<ClassPartition> {
        let new = self.node_classes(t, node)?.to_vec();
        ClassPartition::new(self.seen_classes(t - 1)?, new)
    }

    pub fn registry(&self) -> ClassRegistry {
        ClassRegistry {
            entries: self.registration_order().collect(),
        }
    }

    fn registration_order(&self) -> impl Iterator<Item = ClassEntry> + '_ {
        let base = self.base_classes.iter().map(|&id| ClassEntry {
            id,
            session: 0,
            node: None,
        });
        let incremental = self.sessions.iter().enumerate().flat_map(|(t, s)| {
            s.iter().enumerate().flat_map(move |(n, ids)| {
                ids.iter().map(move |&id| ClassEntry {
                    id,
                    session: t + 1,
                    node: Some(n),
                })
            })
        });
        base.chain(incremental)
    }
}

/// Round-robin plan: classes `0..base_count` at T0, then each session hands
/// `per_node` consecutive ids to node 0, then node 1, and so on.
pub fn make_plan(num_classes: usize, num_nodes: usize, base_count: usize, per_node: usize) -> Result<SessionPlan> {
    if base_count == 0 || base_count > num_classes {
        return Err(Error::Plan(format!(
            "base class count {base_count} must be in 1..={num_classes}"
        )));
    }
    if num_nodes == 0 {
        return Err(Error::Plan("a plan needs at least one node".into()));
    }
    let remaining = num_classes - base_count;
    let per_session = num_nodes * per_node;
    if remaining > 0 && (per_session == 0 || !remaining.is_multiple_of(per_session)) {
        return Err(Error::Plan(format!(
            "{remaining} incremental classes cannot be split into sessions of {num_nodes} nodes x {per_node} classes"
        )));
    }
    let n_sessions = if remaining == 0 { 0 } else { remaining / per_session };
    let mut next = base_count;
    let sessions = (0..n_sessions)
        .map(|_| {
            (0..num_nodes)
                .map(|_| {
                    let ids: Vec<usize> = (next..next + per_node).collect();
                    next += per_node;
                    ids
                })
                .collect()
        })
        .collect();
    SessionPlan::new(num_nodes, (0..base_count).collect(), sessions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<X> {
    /// Unique across train and test.
    pub id: usize,
    pub class: usize,
    pub input: X,
}

/// Labeled samples of one split. `X` is the raw int8 input for a
/// [`LabeledDataset`] or the pooled feature vector for a [`FeatureDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<X> {
    split: Split,
    samples: Vec<Sample<X>>,
}

pub type LabeledDataset = Dataset<QuantTensor>;
pub type FeatureDataset = Dataset<Tensor>;

impl<X: Clone> Dataset<X> {
    pub fn new(split: Split, samples: Vec<Sample<X>>) -> Self {
        Self { split, samples }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn samples(&self) -> &[Sample<X>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.class).collect()
    }

    /// Samples whose class is in `classes`, original order kept.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let keep: BTreeSet<usize> = classes.iter().copied().collect();
        Self {
            split: self.split,
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(&s.class))
                .cloned()
                .collect(),
        }
    }
}

impl LabeledDataset {
    /// Run every input through the frozen backbone once.
    pub fn embed(&self, backbone: &FrozenBackbone) -> Result<FeatureDataset> {
        let samples = self
            .samples
            .par_iter()
            .map(|s| {
                Ok(Sample {
                    id: s.id,
                    class: s.class,
                    input: backbone.forward(&s.input)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset::new(self.split, samples))
    }
}

/// Training samples node `node` sees in session `t`: only its own newly
/// assigned classes, never anything from earlier sessions.
pub fn node_train_view<X: Clone>(ds: &Dataset<X>, plan: &SessionPlan, t: usize, node: usize) -> Result<Dataset<X>> {
    if t == 0 {
        return Err(Error::Plan("node views start at session T1".into()));
    }
    if ds.split != Split::Train {
        return Err(Error::Plan("node views are drawn from the training split".into()));
    }
    Ok(ds.filter_classes(plan.node_classes(t, node)?))
}

fn accuracy_with<X, F>(ds: &Dataset<X>, seen: &[usize], mut predict: F) -> Result<f64>
where
    X: Clone,
    F: FnMut(&X) -> Result<Tensor>,
{
    if seen.is_empty() {
        return Err(Error::Evaluation("no seen classes to evaluate".into()));
    }
    let seen: BTreeSet<usize> = seen.iter().copied().collect();
    let mut total = 0usize;
    let mut correct = 0usize;
    for s in ds.samples.iter().filter(|s| seen.contains(&s.class)) {
        total += 1;
        if argmax(predict(&s.input)?.data()) == s.class {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Evaluation("test set has no samples of the seen classes".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(z: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Fraction of test samples of `seen` classes classified correctly, with
/// argmax over every classifier output.
pub fn evaluate(model: &SplitModel, ds_test: &LabeledDataset, seen: &[usize]) -> Result<f64> {
    accuracy_with(ds_test, seen, |x| model.forward(x))
}

/// [`evaluate`] on precomputed backbone features.
pub fn evaluate_head(head: &TrainableHead, ds_test: &FeatureDataset, seen: &[usize]) -> Result<f64> {
    accuracy_with(ds_test, seen, |x| head.logits(x))
}

/// Text manifest for a materialized dataset. Each sample is a raw int8 blob
/// (`C·H·W` bytes, row-major) stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub input_shape: [usize; 3],
    pub scale: f32,
    pub zero_point: i32,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: PathBuf,
    pub class: usize,
    pub split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Write blobs under `dir/samples/` and `dir/manifest.toml`.
pub fn write_dataset(dir: &Path, train: &LabeledDataset, test: &LabeledDataset) -> Result<PathBuf> {
    let blob_dir = dir.join("samples");
    std::fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let first = train
        .samples
        .first()
        .or(test.samples.first())
        .ok_or_else(|| Error::Evaluation("refusing to write an empty dataset".into()))?;
    let shape: [usize; 3] = first
        .input
        .shape()
        .try_into()
        .map_err(|_| Error::dim("manifest input", &[0, 0, 0], first.input.shape()))?;
    let qp = first.input.qparams();
    let mut entries = Vec::new();
    for ds in [train, test] {
        for s in &ds.samples {
            if s.input.shape() != shape || s.input.qparams() != qp {
                return Err(Error::dim("manifest input", &shape, s.input.shape()));
            }
            let tag = match ds.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let rel = PathBuf::from("samples").join(format!("{tag}_{:05}.i8", s.id));
            let path = dir.join(&rel);
            let bytes: Vec<u8> = s.input.data().iter().map(|&q| q as u8).collect();
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                id: s.id,
                file: rel,
                class: s.class,
                split: ds.split,
            });
        }
    }
    let manifest = Manifest {
        input_shape: shape,
        scale: qp.scale(),
        zero_point: qp.zero_point(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        what: "manifest",
        reason: e.to_string(),
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Read a manifest and its blobs; blob paths resolve relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let qp = QuantParams::new(manifest.scale, manifest.zero_point)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let numel: usize = manifest.input_shape.iter().product();
    let mut ids = BTreeSet::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in manifest.samples {
        if !ids.insert(e.id) {
            return Err(Error::Format {
                what: "manifest",
                reason: format!("duplicate sample id {}", e.id),
            });
        }
        let blob = root.join(&e.file);
        let bytes = std::fs::read(&blob).map_err(|err| Error::io(&blob, err))?;
        if bytes.len() != numel {
            return Err(Error::Format {
                what: "sample blob",
                reason: format!("{} has {} bytes, expected {numel}", blob.display(), bytes.len()),
            });
        }
        let input = QuantTensor::new(
            manifest.input_shape.to_vec(),
            bytes.into_iter().map(|b| b as i8).collect(),
            qp,
        )?;
        let sample = Sample {
            id: e.id,
            class: e.class,
            input,
        };
        match e.split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok((Dataset::new(Split::Train, train), Dataset::new(Split::Test, test)))
}
