//! Independent `f64` reference for the head objective, and the seeded
//! gradient-check suite built on it.
//!
//! Nothing here touches the tape; the reference re-derives the loss from the
//! flat parameter vector with plain loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::{HeadShape, TrainableHead};
use crate::objective::{self, ClassPartition, Example, LossConfig};
use crate::tensor::gradcheck::{compare_gradients, finite_diff_grad, GradComparison};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;

/// Smallest |pre-activation| allowed in a random instance, so a step of
/// [`FD_STEP`] never crosses the relu kink.
const KINK_MARGIN: f64 = 0.05;

/// Full objective in `f64` for a head given as a flat canonical vector.
pub fn reference_total_loss(
    shape: HeadShape,
    params: &[f64],
    batch: &[(Vec<f64>, usize)],
    part: &ClassPartition,
    global: &[f64],
    mu: f64,
    lambda: f64,
) -> f64 {
    let (f, h, k) = (shape.feature_dim, shape.hidden_dim, shape.num_classes);
    let conv_w = &params[..h * f];
    let conv_b = &params[h * f..h * f + h];
    let cls_w = &params[h * f + h..h * f + h + k * h];
    let cls_b = &params[h * f + h + k * h..];

    let mut data = 0.0;
    for (x, target) in batch {
        let hidden: Vec<f64> = (0..h)
            .map(|o| {
                let pre = conv_b[o] + (0..f).map(|i| conv_w[o * f + i] * x[i]).sum::<f64>();
                pre.max(0.0)
            })
            .collect();
        let z: Vec<f64> = (0..k)
            .map(|c| cls_b[c] + (0..h).map(|j| cls_w[c * h + j] * hidden[j]).sum::<f64>())
            .collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let ce = lse - z[*target];

        let (a, b) = part.groups_for(*target);
        let mean = |idx: &[usize]| {
            if idx.is_empty() {
                0.0
            } else {
                idx.iter().map(|&c| z[c]).sum::<f64>() / idx.len() as f64
            }
        };
        let mol = if b.is_empty() {
            0.0
        } else {
            (mean(&a) - mean(&b)).powi(2)
        };
        data += ce + mu * mol;
    }
    let prox: f64 = params.iter().zip(global).map(|(w, g)| (w - g).powi(2)).sum();
    data / batch.len() as f64 + 0.5 * lambda * prox
}

/// Which regularizer branch a gradient-check instance exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MolBranch {
    /// Target is the only new class: compares old-class mean against zero.
    Fallback,
    /// Two or more new classes: masked mean difference.
    Both,
}

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub seed: u64,
    pub branch: MolBranch,
    pub parameter_count: usize,
    pub comparison: GradComparison,
}

/// One random instance: 4 features, 3 hidden units, 5 classes of which
/// `{0, 1, 2}` are old; batch of 3; mu = 2, lambda = 3.8; global snapshot a
/// small perturbation of the head.
pub fn head_gradcheck(seed: u64, branch: MolBranch) -> Result<GradCheckCase> {
    let shape = HeadShape::new(4, 3, 5);
    let (part, targets) = match branch {
        MolBranch::Fallback => (ClassPartition::new([0, 1, 2], [3])?, [3, 3, 3]),
        MolBranch::Both => (ClassPartition::new([0, 1, 2], [3, 4])?, [3, 4, 3]),
    };
    let cfg = LossConfig {
        mu: 2.0,
        lambda: 3.8,
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (head, batch) = loop {
        let mut head = TrainableHead::random(shape, 1.0, &mut rng)?;
        let flat: Vec<f32> = head
            .flatten()
            .data()
            .iter()
            .map(|v| v + rng.random_range(-0.3f32..0.3))
            .collect();
        head = head.unflatten(&flat)?;
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let batch: Vec<Example> = targets
            .iter()
            .map(|&target| Example {
                features: Tensor::vector((0..shape.feature_dim).map(|_| normal.sample(&mut rng)).collect()),
                target,
            })
            .collect();
        if min_preactivation(&head, &batch) > KINK_MARGIN {
            break (head, batch);
        }
    };
    let global_flat: Vec<f32> = head
        .flatten()
        .data()
        .iter()
        .map(|v| v + rng.random_range(-0.2f32..0.2))
        .collect();
    let global = head.unflatten(&global_flat)?;

    let analytic = objective::total_loss(&head, &batch, &part, &global, &cfg)?;

    let x0: Vec<f64> = head.flatten().data().iter().map(|&v| v as f64).collect();
    let g64: Vec<f64> = global_flat.iter().map(|&v| v as f64).collect();
    let batch64: Vec<(Vec<f64>, usize)> = batch
        .iter()
        .map(|e| (e.features.data().iter().map(|&v| v as f64).collect(), e.target))
        .collect();
    let numeric = finite_diff_grad(
        |p| reference_total_loss(shape, p, &batch64, &part, &g64, cfg.mu as f64, cfg.lambda as f64),
        &x0,
        FD_STEP,
    )?;
    let comparison = compare_gradients(analytic.grads.flatten().data(), &numeric, REL_TOL, ABS_TOL);
    Ok(GradCheckCase {
        seed,
        branch,
        parameter_count: shape.parameter_count(),
        comparison,
    })
}

/// `count` instances with seeds `base_seed..base_seed + count`, alternating
/// between the two regularizer branches.
pub fn gradcheck_suite(base_seed: u64, count: usize) -> Result<Vec<GradCheckCase>> {
    (0..count as u64)
        .map(|i| {
            let branch = if i % 2 == 0 { MolBranch::Fallback } else { MolBranch::Both };
            head_gradcheck(base_seed + i, branch)
        })
        .collect()
}

fn min_preactivation(head: &TrainableHead, batch: &[Example]) -> f64 {
    let [conv_w, conv_b, _, _] = head.tensors();
    let f = head.shape().feature_dim;
    let mut min = f64::INFINITY;
    for ex in batch {
        for (o, b) in conv_b.data().iter().enumerate() {
            let pre = *b as f64
                + (0..f)
                    .map(|i| conv_w.data()[o * f + i] as f64 * ex.features.data()[i] as f64)
                    .sum::<f64>();
            min = min.min(pre.abs());
        }
    }
    min
}
