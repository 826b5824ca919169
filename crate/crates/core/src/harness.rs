//! Experiment harness: synthetic data, config files, the three training
//! strategies and report emission.
//!
//! Every random draw comes from a stream derived from the experiment seed
//! and a label (`"backbone"`, `"data/train"`, `"shuffle"`, ...), so adding a
//! new consumer never shifts the numbers another one sees.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::continual::{self, Dataset, FeatureDataset, LabeledDataset, Sample, SessionPlan, Split};
use crate::cost::{self, CostConfig, CostReport};
use crate::error::{Error, Result};
use crate::federation::{self, RoundRecord, Swarm, TraceEvent};
use crate::model::{HeadShape, TrainableHead};
use crate::objective::{ClassPartition, LossConfig};
use crate::quant::{self, BackboneSpec, FrozenBackbone, QuantParams};
use crate::tensor::Tensor;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";

/// Seed for the stream `label`/`index` under `root` (FNV-1a of the label
/// folded through splitmix64).
pub fn stream_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(root ^ h) ^ index)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, label, index))
}

/// Gaussian clusters: one center per class, samples scattered around it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_shape: [usize; 3],
    pub input_qparams: QuantParams,
    pub sigma_between: f32,
    pub sigma_within: f32,
}

/// Train and test splits, class-major, ids `0..` with test ids after all
/// train ids.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(spec.sigma_between.is_finite() && spec.sigma_between > 0.0) {
        return Err(Error::Config("dataset.sigma_between must be > 0".into()));
    }
    if !(spec.sigma_within.is_finite() && spec.sigma_within >= 0.0) {
        return Err(Error::Config("dataset.sigma_within must be >= 0".into()));
    }
    let numel: usize = spec.input_shape.iter().product();
    let shape = spec.input_shape.to_vec();
    let between = Normal::new(0.0f32, spec.sigma_between).expect("validated");
    let within = Normal::new(0.0f32, spec.sigma_within).expect("validated");

    let mut rng = stream(seed, "data/centers", 0);
    let centers: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| (0..numel).map(|_| between.sample(&mut rng)).collect())
        .collect();

    let mut next_id = 0usize;
    let mut draw = |split: Split, per_class: usize, label: &str| -> Result<LabeledDataset> {
        let mut rng = stream(seed, label, 0);
        let mut samples = Vec::with_capacity(spec.classes * per_class);
        for (class, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let x: Vec<f32> = center.iter().map(|c| c + within.sample(&mut rng)).collect();
                let input = quant::quantize(&Tensor::new(shape.clone(), x)?, spec.input_qparams)?;
                samples.push(Sample {
                    id: next_id,
                    class,
                    input,
                });
                next_id += 1;
            }
        }
        Ok(Dataset::new(split, samples))
    };
    let train = draw(Split::Train, spec.train_per_class, "data/train")?;
    let test = draw(Split::Test, spec.test_per_class, "data/test")?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Federated pipeline without regularization.
    Naive,
    /// Federated pipeline with mean-output and proximal regularization.
    Odfcl,
    /// Centralized training on all data of every class seen so far.
    Joint,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Odfcl => "odfcl",
            Strategy::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    /// Initial weight std is `init_gain / sqrt(fan_in)`.
    pub init_gain: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            init_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub classes: usize,
    pub nodes: usize,
    pub base: usize,
    /// New classes per node per session (round-robin plan).
    pub per_node: usize,
    /// Explicit `session -> node -> class ids`; overrides `per_node`.
    pub sessions: Option<Vec<Vec<Vec<usize>>>>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            nodes: 3,
            base: 4,
            per_node: 1,
            sessions: None,
        }
    }
}

impl PlanConfig {
    pub fn build(&self) -> Result<SessionPlan> {
        let plan = match &self.sessions {
            Some(s) => SessionPlan::new(self.nodes, (0..self.base).collect(), s.clone())?,
            None => continual::make_plan(self.classes, self.nodes, self.base, self.per_node)?,
        };
        if plan.num_classes() != self.classes {
            return Err(Error::Plan(format!(
                "plan.sessions covers {} classes, plan.classes is {}",
                plan.num_classes(),
                self.classes
            )));
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sigma_between: f32,
    pub sigma_within: f32,
    /// Load a materialized dataset instead of generating one.
    pub manifest: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_per_class: 28,
            test_per_class: 7,
            sigma_between: 1.0,
            sigma_within: 0.5,
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub strategies: Vec<Strategy>,
    /// Federated rounds (one local epoch each by default) per incremental
    /// session.
    pub rounds: usize,
    /// Centralized epochs on the base classes before deployment.
    pub pretrain_epochs: usize,
    pub backbone: BackboneSpec,
    pub head: HeadConfig,
    pub plan: PlanConfig,
    pub loss: LossConfig,
    pub dataset: DatasetConfig,
    pub cost: CostConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            strategies: vec![Strategy::Naive, Strategy::Odfcl, Strategy::Joint],
            rounds: 5,
            pretrain_epochs: 30,
            backbone: BackboneSpec::default(),
            head: HeadConfig::default(),
            plan: PlanConfig::default(),
            loss: LossConfig {
                lr: 0.03,
                ..LossConfig::default()
            },
            dataset: DatasetConfig::default(),
            cost: CostConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "config",
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies must list at least one strategy".into()));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(Error::Config(format!("strategy {} listed twice", s.name())));
            }
        }
        self.backbone.validate()?;
        if self.head.hidden_dim == 0 || !(self.head.init_gain.is_finite() && self.head.init_gain > 0.0) {
            return Err(Error::Config("head.hidden_dim and head.init_gain must be positive".into()));
        }
        self.plan.build()?;
        self.loss.validate()?;
        self.cost.validate()?;
        if self.dataset.manifest.is_none() {
            if self.dataset.train_per_class == 0 || self.dataset.test_per_class == 0 {
                return Err(Error::Config(
                    "dataset.train_per_class and dataset.test_per_class must be >= 1".into(),
                ));
            }
            let ok = self.dataset.sigma_between > 0.0 && self.dataset.sigma_within >= 0.0;
            if !ok {
                return Err(Error::Config(
                    "dataset.sigma_between must be > 0 and dataset.sigma_within >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.plan.classes,
            train_per_class: self.dataset.train_per_class,
            test_per_class: self.dataset.test_per_class,
            input_shape: self.backbone.input_shape,
            input_qparams: self.backbone.input_qparams(),
            sigma_between: self.dataset.sigma_between,
            sigma_within: self.dataset.sigma_within,
        }
    }

    /// Synthetic data, or the manifest's data when one is configured.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset.manifest {
            Some(path) => continual::load_manifest(path),
            None => gen_synthetic(&self.synthetic_spec(), self.seed),
        }
    }

    pub fn backbone(&self) -> Result<FrozenBackbone> {
        FrozenBackbone::random(&self.backbone, &mut stream(self.seed, "backbone", 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub session: usize,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    /// Accuracy on all classes seen so far, after T0, T1, ...
    pub accuracy: Vec<f64>,
    /// Accuracy on the base (T0) classes only, same sessions.
    pub base_accuracy: Vec<f64>,
    pub sessions: Vec<SessionTrace>,
    pub sim_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub sessions: Vec<String>,
    pub results: Vec<StrategyResult>,
    pub cost: CostReport,
    pub config: ExperimentConfig,
}

impl MetricsReport {
    pub fn result(&self, strategy: Strategy) -> Option<&StrategyResult> {
        self.results.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "report",
            reason: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "report",
            reason: e.to_string(),
        })
    }

    /// Accuracy table: one row per strategy, one column per session.
    pub fn table(&self) -> String {
        let mut s = String::from("Accuracy [%] after each session (all classes seen so far)\n");
        let _ = write!(s, "{:<10}", "Strategy");
        for name in &self.sessions {
            let _ = write!(s, "{name:>8}");
        }
        s.push('\n');
        for r in &self.results {
            let _ = write!(s, "{:<10}", r.strategy.name());
            for a in &r.accuracy {
                let _ = write!(s, "{:>8.1}", 100.0 * a);
            }
            s.push('\n');
        }
        s
    }

    /// Load `report.json` from a run directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }
}

/// Write `report.json` (machine-readable) and `report.txt` (table plus cost
/// summary) into `dir`.
pub fn emit_report(r: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(REPORT_JSON);
    std::fs::write(&json, r.to_json()?).map_err(|e| Error::io(&json, e))?;
    let txt = dir.join(REPORT_TABLE);
    let body = format!("{}\n{}", r.table(), r.cost.table());
    std::fs::write(&txt, body).map_err(|e| Error::io(&txt, e))
}

/// Everything a run produces, including data not serialized in the report.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub backbone: Arc<FrozenBackbone>,
    pub final_heads: Vec<(Strategy, TrainableHead)>,
    pub traces: Vec<(Strategy, Vec<TraceEvent>)>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    Ok(run_experiment_detailed(cfg)?.report)
}

pub fn run_experiment_detailed(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let plan = cfg.plan.build()?;
    let backbone = Arc::new(cfg.backbone()?);
    let (train_raw, test_raw) = cfg.datasets()?;
    for ds in [&train_raw, &test_raw] {
        if let Some(&c) = ds.classes().iter().find(|&&c| c >= plan.num_classes()) {
            return Err(Error::Config(format!(
                "dataset contains class {c}, plan registers {}",
                plan.num_classes()
            )));
        }
    }
    let train = train_raw.embed(&backbone)?;
    let test = test_raw.embed(&backbone)?;

    let shape = HeadShape::new(backbone.feature_dim(), cfg.head.hidden_dim, plan.base_classes().len());
    let base_head = pretrain(cfg, &plan, shape, &train)?;
    let base_acc = continual::evaluate_head(&base_head, &test, plan.base_classes())?;

    let mut results = Vec::new();
    let mut final_heads = Vec::new();
    let mut traces = Vec::new();
    for &strategy in &cfg.strategies {
        let run = match strategy {
            Strategy::Naive => run_federated(cfg, &plan, &base_head, &train, &test, &cfg.loss.naive())?,
            Strategy::Odfcl => run_federated(cfg, &plan, &base_head, &train, &test, &cfg.loss)?,
            Strategy::Joint => run_joint(cfg, &plan, &base_head, &train, &test)?,
        };
        let mut accuracy = vec![base_acc];
        accuracy.extend(run.accuracy);
        let mut base_accuracy = vec![base_acc];
        base_accuracy.extend(run.base_accuracy);
        results.push(StrategyResult {
            strategy,
            accuracy,
            base_accuracy,
            sessions: run.sessions,
            sim_time_s: run.sim_time_s,
        });
        final_heads.push((strategy, run.head));
        traces.push((strategy, run.trace));
    }

    let final_shape = HeadShape::new(shape.feature_dim, shape.hidden_dim, plan.num_classes());
    let cost = cost::cost_report(&cfg.cost, final_shape, plan.num_nodes(), cfg.loss.batch_size)?;
    let report = MetricsReport {
        seed: cfg.seed,
        sessions: (0..=plan.num_sessions()).map(|t| format!("T{t}")).collect(),
        results,
        cost,
        config: cfg.clone(),
    };
    Ok(ExperimentOutput {
        report,
        backbone,
        final_heads,
        traces,
    })
}

/// Centralized T0 training of a fresh head on the base classes, shared by
/// every strategy.
fn pretrain(cfg: &ExperimentConfig, plan: &SessionPlan, shape: HeadShape, train: &FeatureDataset) -> Result<TrainableHead> {
    let mut head = TrainableHead::random(shape, cfg.head.init_gain, &mut stream(cfg.seed, "head", 0))?;
    let data = train.filter_classes(plan.base_classes());
    let part = ClassPartition::new([], plan.base_classes().iter().copied())?;
    let loss = cfg.loss.naive();
    let seed = stream_seed(cfg.seed, "pretrain", 0);
    for epoch in 0..cfg.pretrain_epochs as u64 {
        let anchor = head.clone();
        federation::train_epoch(&mut head, &anchor, &data, &part, &loss, seed, epoch)?;
    }
    Ok(head)
}

struct StrategyRun {
    accuracy: Vec<f64>,
    base_accuracy: Vec<f64>,
    sessions: Vec<SessionTrace>,
    sim_time_s: f64,
    head: TrainableHead,
    trace: Vec<TraceEvent>,
}

fn run_federated(
    cfg: &ExperimentConfig,
    plan: &SessionPlan,
    base_head: &TrainableHead,
    train: &FeatureDataset,
    test: &FeatureDataset,
    loss: &LossConfig,
) -> Result<StrategyRun> {
    let seeds: Vec<u64> = (0..plan.num_nodes() as u64)
        .map(|n| stream_seed(cfg.seed, "shuffle", n))
        .collect();
    let local_epoch_s = cfg.cost.train_point().local_epoch_latency_s;
    let mut swarm = Swarm::new(base_head, &seeds, cfg.cost.link, local_epoch_s)?;
    let mut out = StrategyRun {
        accuracy: Vec::new(),
        base_accuracy: Vec::new(),
        sessions: Vec::new(),
        sim_time_s: 0.0,
        head: base_head.clone(),
        trace: Vec::new(),
    };
    for t in 1..=plan.num_sessions() {
        let expanded = swarm.global().expand_classifier(&plan.session_classes(t)?)?;
        swarm.install(&expanded);
        let seen = plan.seen_classes(t)?;
        let (head, rounds) = swarm.run_session(plan, t, cfg.rounds, train, loss, Some((test, &seen)))?;
        out.accuracy.push(continual::evaluate_head(&head, test, &seen)?);
        out.base_accuracy.push(continual::evaluate_head(&head, test, plan.base_classes())?);
        out.sessions.push(SessionTrace { session: t, rounds });
        out.head = head;
    }
    out.sim_time_s = swarm.net.clock();
    out.trace = swarm.net.trace().to_vec();
    Ok(out)
}

fn run_joint(
    cfg: &ExperimentConfig,
    plan: &SessionPlan,
    base_head: &TrainableHead,
    train: &FeatureDataset,
    test: &FeatureDataset,
) -> Result<StrategyRun> {
    let loss = cfg.loss.naive();
    let mut head = base_head.clone();
    let mut out = StrategyRun {
        accuracy: Vec::new(),
        base_accuracy: Vec::new(),
        sessions: Vec::new(),
        sim_time_s: 0.0,
        head: base_head.clone(),
        trace: Vec::new(),
    };
    let epochs = cfg.rounds * cfg.loss.local_epochs_per_round;
    let per_sample = cost::per_sample_latency(cfg.cost.train_point(), cfg.cost.samples_per_epoch)?;
    let mut clock = 0.0;
    for t in 1..=plan.num_sessions() {
        head = head.expand_classifier(&plan.session_classes(t)?)?;
        let seen = plan.seen_classes(t)?;
        let data = train.filter_classes(&seen);
        let part = ClassPartition::new([], seen.iter().copied())?;
        let seed = stream_seed(cfg.seed, "joint", t as u64);
        let mut rounds = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let anchor = head.clone();
            let l = federation::train_epoch(&mut head, &anchor, &data, &part, &loss, seed, epoch as u64)?;
            clock += per_sample * data.len() as f64;
            rounds.push(RoundRecord {
                round: epoch + 1,
                mean_loss: l.map(f64::from),
                accuracy: Some(continual::evaluate_head(&head, test, &seen)?),
                sim_time_s: clock,
            });
        }
        out.accuracy.push(continual::evaluate_head(&head, test, &seen)?);
        out.base_accuracy.push(continual::evaluate_head(&head, test, plan.base_classes())?);
        out.sessions.push(SessionTrace { session: t, rounds });
    }
    out.sim_time_s = clock;
    out.head = head;
    Ok(out)
}
