//! Master/slave synchronization over a simulated serial link.
//!
//! Every round each node uploads its head to the master (node 0), the master
//! averages them, and the result is broadcast back. Messages carry only
//! flattened head parameters; there is no constructor that accepts anything
//! else.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continual::{self, FeatureDataset, SessionPlan};
use crate::cost::LinkModel;
use crate::error::{Error, Result};
use crate::model::TrainableHead;
use crate::objective::{self, ClassPartition, Example, LossConfig};

/// Weighted elementwise mean of equally long parameter vectors, summed in
/// slice order with `f64` accumulation.
///
/// The mean of identical vectors is bit-identical to the input: the `f64`
/// rounding error stays far below half an `f32` ulp.
pub fn fedavg(vectors: &[&[f32]], weights: &[f64]) -> Result<Vec<f32>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Aggregation("nothing to aggregate".into()))?;
    if weights.len() != vectors.len() {
        return Err(Error::dim("fedavg weights", &[vectors.len()], &[weights.len()]));
    }
    let len = first.len();
    if let Some(v) = vectors.iter().find(|v| v.len() != len) {
        return Err(Error::dim("fedavg", &[len], &[v.len()]));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Aggregation("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Aggregation("all aggregation weights are zero".into()));
    }
    let mut acc = vec![0.0f64; len];
    for (v, &w) in vectors.iter().zip(weights) {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += w * x as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / total) as f32).collect())
}

/// One node's contribution to an aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a> {
    pub node: usize,
    pub params: &'a [f32],
    pub weight: f64,
}

/// [`fedavg`] after ordering contributions by node id, so the result does
/// not depend on arrival order.
pub fn fedavg_by_node(contribs: &[Contribution<'_>]) -> Result<Vec<f32>> {
    let mut sorted = contribs.to_vec();
    sorted.sort_by_key(|c| c.node);
    if sorted.windows(2).any(|w| w[0].node == w[1].node) {
        return Err(Error::Aggregation("duplicate node id in aggregation".into()));
    }
    let vectors: Vec<&[f32]> = sorted.iter().map(|c| c.params).collect();
    let weights: Vec<f64> = sorted.iter().map(|c| c.weight).collect();
    fedavg(&vectors, &weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Upload,
    Broadcast,
}

/// Parameter vector on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncMessage {
    kind: MessageKind,
    sender: usize,
    receiver: usize,
    payload: Vec<f32>,
}

impl SyncMessage {
    pub fn upload(sender: usize, master: usize, head: &TrainableHead) -> Self {
        Self {
            kind: MessageKind::Upload,
            sender,
            receiver: master,
            payload: head.flatten().into_data(),
        }
    }

    pub fn broadcast(master: usize, receiver: usize, head: &TrainableHead) -> Self {
        Self {
            kind: MessageKind::Broadcast,
            sender: master,
            receiver,
            payload: head.flatten().into_data(),
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }

    pub fn sender(&self) -> usize {
        self.sender
    }

    pub fn receiver(&self) -> usize {
        self.receiver
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    pub fn byte_size(&self) -> usize {
        self.payload.len() * std::mem::size_of::<f32>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    LocalTraining,
    Upload,
    Aggregate,
    Broadcast,
}

impl EventKind {
    fn as_str(self) -> &'static str {
        match self {
            EventKind::LocalTraining => "local_training",
            EventKind::Upload => "upload",
            EventKind::Aggregate => "aggregate",
            EventKind::Broadcast => "broadcast",
        }
    }
}

/// Completed simulated event; `time_s` is when it finished.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time_s: f64,
    pub node: usize,
    pub kind: EventKind,
    pub bytes: usize,
}

/// Single serial link with a monotone clock. One message is in flight at a
/// time; nothing is lost or retried.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    link: LinkModel,
    clock_s: f64,
    trace: Vec<TraceEvent>,
}

/// CSV with header `time_s,node,event,bytes`.
pub fn trace_csv(events: &[TraceEvent]) -> String {
    let mut s = String::from("time_s,node,event,bytes\n");
    for e in events {
        let _ = writeln!(s, "{:.6},{},{},{}", e.time_s, e.node, e.kind.as_str(), e.bytes);
    }
    s
}

impl SimNetwork {
    pub fn new(link: LinkModel) -> Result<Self> {
        link.validate()?;
        Ok(Self {
            link,
            clock_s: 0.0,
            trace: Vec::new(),
        })
    }

    pub fn link(&self) -> &LinkModel {
        &self.link
    }

    pub fn clock(&self) -> f64 {
        self.clock_s
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Put a message on the link; returns its transfer time.
    pub fn transmit(&mut self, msg: &SyncMessage) -> f64 {
        let dt = self.link.message_time(msg.byte_size());
        self.clock_s += dt;
        let kind = match msg.kind {
            MessageKind::Upload => EventKind::Upload,
            MessageKind::Broadcast => EventKind::Broadcast,
        };
        let node = match msg.kind {
            MessageKind::Upload => msg.sender,
            MessageKind::Broadcast => msg.receiver,
        };
        self.record(node, kind, msg.byte_size());
        dt
    }

    /// Advance the clock for non-link work (local training, aggregation).
    pub fn advance(&mut self, dt: f64, node: usize, kind: EventKind) {
        assert!(dt >= 0.0 && dt.is_finite(), "clock must not move backwards");
        self.clock_s += dt;
        self.record(node, kind, 0);
    }

    fn record(&mut self, node: usize, kind: EventKind, bytes: usize) {
        self.trace.push(TraceEvent {
            time_s: self.clock_s,
            node,
            kind,
            bytes,
        });
    }

    /// Delimiter-separated trace, one event per line:
    /// `time_s,node,event,bytes`.
    pub fn trace_csv(&self) -> String {
        trace_csv(&self.trace)
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.trace_csv()).map_err(|e| Error::io(path, e))
    }
}

/// One swarm member.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    /// Local trainable head.
    pub head: TrainableHead,
    /// Global head from the most recent synchronization; anchor of the
    /// proximal term.
    pub global: TrainableHead,
    /// Classes this node learns in the current session.
    pub assignment: Vec<usize>,
    pub epoch: u64,
    shuffle_seed: u64,
}

impl NodeState {
    pub fn new(id: usize, head: TrainableHead, shuffle_seed: u64) -> Self {
        Self {
            id,
            global: head.clone(),
            head,
            assignment: Vec::new(),
            epoch: 0,
            shuffle_seed,
        }
    }

    /// Replace both the local head and the stored global snapshot.
    pub fn adopt(&mut self, global: &TrainableHead) {
        self.head = global.clone();
        self.global = global.clone();
    }

    /// One pass over `data` in minibatches, reshuffled per epoch. Returns
    /// the mean batch loss, or `None` when there is nothing to train on.
    pub fn local_epoch(
        &mut self,
        data: &FeatureDataset,
        part: &ClassPartition,
        cfg: &LossConfig,
    ) -> Result<Option<f32>> {
        let out = train_epoch(&mut self.head, &self.global, data, part, cfg, self.shuffle_seed, self.epoch);
        self.epoch += 1;
        out
    }
}

/// Shared minibatch SGD epoch used by nodes and by centralized training.
pub(crate) fn train_epoch(
    head: &mut TrainableHead,
    anchor: &TrainableHead,
    data: &FeatureDataset,
    part: &ClassPartition,
    cfg: &LossConfig,
    seed: u64,
    epoch: u64,
) -> Result<Option<f32>> {
    if data.is_empty() {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    let mut loss_sum = 0.0f32;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<Example> = chunk
            .iter()
            .map(|&i| {
                let s = &data.samples()[i];
                Example {
                    features: s.input.clone(),
                    target: s.class,
                }
            })
            .collect();
        let out = objective::total_loss(head, &batch, part, anchor, cfg)?;
        *head = objective::sgd_step(head, &out.grads, cfg.lr)?;
        loss_sum += out.loss;
        batches += 1;
    }
    if !head.is_finite() {
        return Err(Error::Numeric("head parameters diverged".into()));
    }
    Ok(Some(loss_sum / batches as f32))
}

/// Upload every head to `master`, average, broadcast back. All nodes end
/// with identical heads and snapshots. Returns the new global head and the
/// time spent on the link.
pub fn sync_round(nodes: &mut [NodeState], master: usize, net: &mut SimNetwork) -> Result<(TrainableHead, f64)> {
    if nodes.is_empty() {
        return Err(Error::Aggregation("no nodes to synchronize".into()));
    }
    if !nodes.iter().any(|n| n.id == master) {
        return Err(Error::Aggregation(format!("master {master} is not a swarm member")));
    }
    let shape = nodes[0].head.shape();
    if let Some(n) = nodes.iter().find(|n| n.head.shape() != shape) {
        return Err(Error::Aggregation(format!(
            "node {} head {:?} differs from {:?}",
            n.id,
            n.head.shape(),
            shape
        )));
    }
    let start = net.clock();

    let uploads: Vec<SyncMessage> = nodes
        .iter()
        .map(|n| SyncMessage::upload(n.id, master, &n.head))
        .collect();
    for msg in &uploads {
        net.transmit(msg);
    }
    let contribs: Vec<Contribution<'_>> = uploads
        .iter()
        .map(|m| Contribution {
            node: m.sender(),
            params: m.payload(),
            weight: 1.0,
        })
        .collect();
    let avg = fedavg_by_node(&contribs)?;
    let global = nodes[0].head.unflatten(&avg)?;
    net.advance(0.0, master, EventKind::Aggregate);

    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by_key(|&i| nodes[i].id);
    for i in order {
        let msg = SyncMessage::broadcast(master, nodes[i].id, &global);
        net.transmit(&msg);
        let received = global.unflatten(msg.payload())?;
        nodes[i].adopt(&received);
    }
    Ok((global, net.clock() - start))
}

/// Per-round record of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean local loss over nodes that trained this round.
    pub mean_loss: Option<f64>,
    /// Accuracy of the global head on the seen classes, if evaluated.
    pub accuracy: Option<f64>,
    /// Simulated time at the end of the round.
    pub sim_time_s: f64,
}

/// The swarm: nodes, the master id, and the link they share.
#[derive(Debug, Clone)]
pub struct Swarm {
    pub nodes: Vec<NodeState>,
    pub master: usize,
    pub net: SimNetwork,
    /// Simulated seconds per local epoch on a node.
    pub local_epoch_s: f64,
}

impl Swarm {
    /// `n` nodes all starting from `head`; node `i` shuffles with
    /// `shuffle_seeds[i]`.
    pub fn new(head: &TrainableHead, shuffle_seeds: &[u64], link: LinkModel, local_epoch_s: f64) -> Result<Self> {
        if shuffle_seeds.is_empty() {
            return Err(Error::Aggregation("a swarm needs at least one node".into()));
        }
        let nodes = shuffle_seeds
            .iter()
            .enumerate()
            .map(|(id, &seed)| NodeState::new(id, head.clone(), seed))
            .collect();
        Ok(Self {
            nodes,
            master: 0,
            net: SimNetwork::new(link)?,
            local_epoch_s,
        })
    }

    /// Current global head (the master's copy).
    pub fn global(&self) -> &TrainableHead {
        &self.nodes[self.master].global
    }

    /// Install a new head on every node, e.g. after classifier expansion.
    pub fn install(&mut self, head: &TrainableHead) {
        for n in &mut self.nodes {
            n.adopt(head);
        }
    }

    /// `rounds` federated rounds of session `t`. Each round every node runs
    /// `cfg.local_epochs_per_round` epochs on its own view (in parallel),
    /// then the swarm synchronizes. When `eval` is given the global head is
    /// scored after every round.
    pub fn run_session(
        &mut self,
        plan: &SessionPlan,
        t: usize,
        rounds: usize,
        train: &FeatureDataset,
        cfg: &LossConfig,
        eval: Option<(&FeatureDataset, &[usize])>,
    ) -> Result<(TrainableHead, Vec<RoundRecord>)> {
        if plan.num_nodes() != self.nodes.len() {
            return Err(Error::Plan(format!(
                "plan has {} nodes, swarm has {}",
                plan.num_nodes(),
                self.nodes.len()
            )));
        }
        let needed = plan.seen_classes(t)?.len();
        if let Some(n) = self.nodes.iter().find(|n| n.head.num_classes() < needed) {
            return Err(Error::Registry(format!(
                "node {} classifier has {} outputs, session T{t} needs {needed}",
                n.id,
                n.head.num_classes()
            )));
        }
        let mut work = Vec::with_capacity(self.nodes.len());
        for n in &mut self.nodes {
            n.assignment = plan.node_classes(t, n.id)?.to_vec();
            work.push((
                continual::node_train_view(train, plan, t, n.id)?,
                plan.partition(t, n.id)?,
            ));
        }

        let mut trace = Vec::with_capacity(rounds);
        for round in 0..rounds {
            let losses: Vec<Option<f32>> = self
                .nodes
                .par_iter_mut()
                .zip(work.par_iter())
                .map(|(node, (view, part))| {
                    let mut last = None;
                    for _ in 0..cfg.local_epochs_per_round {
                        last = node.local_epoch(view, part, cfg)?;
                    }
                    Ok(last)
                })
                .collect::<Result<_>>()?;

            let trained: Vec<f64> = losses.iter().flatten().map(|&l| f64::from(l)).collect();
            if !trained.is_empty() {
                // nodes train concurrently, so the clock moves once
                let mut dt = self.local_epoch_s * cfg.local_epochs_per_round as f64;
                for (node, loss) in self.nodes.iter().zip(&losses) {
                    if loss.is_some() {
                        self.net.advance(dt, node.id, EventKind::LocalTraining);
                        dt = 0.0;
                    }
                }
            }
            sync_round(&mut self.nodes, self.master, &mut self.net)?;

            let accuracy = match eval {
                Some((test, seen)) => Some(continual::evaluate_head(self.global(), test, seen)?),
                None => None,
            };
            trace.push(RoundRecord {
                round: round + 1,
                mean_loss: (!trained.is_empty())
                    .then(|| trained.iter().sum::<f64>() / trained.len() as f64),
                accuracy,
                sim_time_s: self.net.clock(),
            });
        }
        Ok((self.global().clone(), trace))
    }
}
