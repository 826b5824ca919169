//! Training objective for a node's trainable head:
//!
//! ```text
//! L = mean_batch[ CE(z, y) + mu * MOL(z, y) ] + (lambda / 2) * ||w - w_global||^2
//! ```
//!
//! `MOL` (mean output loss) is the squared gap between the mean logit of the
//! current-session classes and the mean logit of previously learned classes,
//! with the target class left out of both groups. When the target is the
//! only current-session class, the current-session mean is taken as zero so
//! the term still pulls old-class logits toward zero.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadVars, TrainableHead};
use crate::tensor::{self, Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the mean-output regularizer.
    pub mu: f32,
    /// Weight of the proximal term.
    pub lambda: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub local_epochs_per_round: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu: 2.0,
            lambda: 3.8,
            lr: 0.01,
            batch_size: 4,
            local_epochs_per_round: 1,
        }
    }
}

impl LossConfig {
    pub fn naive(&self) -> Self {
        Self {
            mu: 0.0,
            lambda: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.mu.is_finite() && self.lambda.is_finite() && self.lr.is_finite();
        if !finite || self.mu < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "loss.mu and loss.lambda must be finite and >= 0 (got {}, {})",
                self.mu, self.lambda
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("loss.lr must be > 0 (got {})", self.lr)));
        }
        if self.batch_size == 0 || self.local_epochs_per_round == 0 {
            return Err(Error::Config(
                "loss.batch_size and loss.local_epochs_per_round must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Old (earlier sessions, all nodes) versus new (this session, this node)
/// classes for one training step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassPartition {
    old: BTreeSet<usize>,
    new: BTreeSet<usize>,
}

impl ClassPartition {
    pub fn new(old: impl IntoIterator<Item = usize>, new: impl IntoIterator<Item = usize>) -> Result<Self> {
        let old: BTreeSet<usize> = old.into_iter().collect();
        let new: BTreeSet<usize> = new.into_iter().collect();
        if let Some(c) = old.intersection(&new).next() {
            return Err(Error::Registry(format!(
                "class {c} is both old and new in one partition"
            )));
        }
        Ok(Self { old, new })
    }

    pub fn old(&self) -> &BTreeSet<usize> {
        &self.old
    }

    pub fn new_classes(&self) -> &BTreeSet<usize> {
        &self.new
    }

    pub fn contains(&self, class: usize) -> bool {
        self.old.contains(&class) || self.new.contains(&class)
    }

    /// Groups compared by the regularizer for one target: (new minus target,
    /// old minus target), both ascending.
    pub fn groups_for(&self, target: usize) -> (Vec<usize>, Vec<usize>) {
        let a = self.new.iter().copied().filter(|&c| c != target).collect();
        let b = self.old.iter().copied().filter(|&c| c != target).collect();
        (a, b)
    }
}

pub(crate) fn softmax(z: &[f32]) -> Vec<f32> {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]`, stabilized by subtracting the max logit.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f32> {
    let z = logits.data();
    if target >= z.len() {
        return Err(Error::Index {
            index: target,
            len: z.len(),
        });
    }
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = z.iter().map(|&v| (v - max).exp()).sum();
    Ok(sum.ln() - (z[target] - max))
}

pub(crate) fn mean_at(z: &[f32], idx: &[usize]) -> f32 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().map(|&c| z[c]).sum::<f32>() / idx.len() as f32
}

pub(crate) fn mean_output_gap(z: &[f32], a: &[usize], b: &[usize]) -> f32 {
    if b.is_empty() {
        return 0.0;
    }
    let gap = mean_at(z, a) - mean_at(z, b);
    gap * gap
}

/// Mean-output regularizer for a single sample.
pub fn mol_loss(logits: &Tensor, target: usize, part: &ClassPartition) -> Result<f32> {
    if !part.contains(target) {
        return Err(Error::Registry(format!(
            "target class {target} is neither old nor new"
        )));
    }
    let (a, b) = part.groups_for(target);
    if let Some(&c) = a.iter().chain(&b).find(|&&c| c >= logits.len()) {
        return Err(Error::Index {
            index: c,
            len: logits.len(),
        });
    }
    Ok(mean_output_gap(logits.data(), &a, &b))
}

/// `(lambda / 2) * ||w - w_global||^2`.
pub fn prox_loss(w: &Tensor, w_global: &Tensor, lambda: f32) -> Result<f32> {
    let diff = tensor::sub(w, w_global)?;
    Ok(0.5 * lambda * tensor::sum_squares(&diff))
}

/// One training example as seen by the head: pooled backbone features plus
/// its class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f32,
    pub grads: TrainableHead,
}

/// Composite loss over a batch, with gradients for every head parameter.
pub fn total_loss(
    head: &TrainableHead,
    batch: &[Example],
    part: &ClassPartition,
    w_global: &TrainableHead,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Numeric("total_loss on an empty batch".into()));
    }
    head.check_same_architecture(w_global)?;
    let mut g = Graph::new();
    let vars = head.attach(&mut g);

    let mut data_sum = None;
    for ex in batch {
        if !part.contains(ex.target) {
            return Err(Error::Registry(format!(
                "target class {} is not registered in this partition",
                ex.target
            )));
        }
        let z = vars.logits(&mut g, &ex.features)?;
        let ce = g.cross_entropy(z, ex.target)?;
        let (a, b) = part.groups_for(ex.target);
        let mol = g.mean_output_gap(z, a, b)?;
        let weighted = g.scale(mol, cfg.mu);
        let term = g.add(ce, weighted)?;
        data_sum = Some(match data_sum {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let data_sum = data_sum.expect("non-empty batch");
    let data_mean = g.scale(data_sum, 1.0 / batch.len() as f32);

    let prox = proximal_node(&mut g, &vars, w_global)?;
    let prox = g.scale(prox, 0.5 * cfg.lambda);
    let loss = g.add(data_mean, prox)?;
    g.backward(loss)?;

    let loss_value = g.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss_value}")));
    }
    Ok(LossOutput {
        loss: loss_value,
        grads: vars.gradients(&g)?,
    })
}

fn proximal_node(g: &mut Graph, vars: &HeadVars, w_global: &TrainableHead) -> Result<tensor::Var> {
    let mut acc = None;
    for (param, global) in vars.params().into_iter().zip(w_global.tensors()) {
        let anchor = g.input(global.clone());
        let d = g.sub(param, anchor)?;
        let sq = g.sum_squares(d);
        acc = Some(match acc {
            None => sq,
            Some(a) => g.add(a, sq)?,
        });
    }
    Ok(acc.expect("head has parameters"))
}

/// Mean cross-entropy over a batch via the plain forward path (no tape).
pub fn mean_cross_entropy(head: &TrainableHead, batch: &[Example]) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::Numeric("mean_cross_entropy on an empty batch".into()));
    }
    let mut sum = None;
    for ex in batch {
        let ce = cross_entropy(&head.logits(&ex.features)?, ex.target)?;
        sum = Some(match sum {
            None => ce,
            Some(s) => s + ce,
        });
    }
    Ok(sum.expect("non-empty batch") * (1.0 / batch.len() as f32))
}

/// `w <- w - lr * g` for every head parameter.
pub fn sgd_step(head: &TrainableHead, grads: &TrainableHead, lr: f32) -> Result<TrainableHead> {
    head.check_same_architecture(grads)?;
    let updated: Vec<Tensor> = head
        .tensors()
        .into_iter()
        .zip(grads.tensors())
        .map(|(w, g)| tensor::sub(w, &tensor::scale(g, lr)))
        .collect::<Result<_>>()?;
    TrainableHead::from_tensors(updated)
}
