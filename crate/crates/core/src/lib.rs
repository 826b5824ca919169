//! Deterministic simulator for on-device federated continual learning.
//!
//! A swarm of nodes shares a frozen int8 feature extractor and trains a small
//! float head. New classes arrive session by session, each on a single node;
//! the nodes regularize their local updates (mean output loss plus a
//! proximal term) and synchronize by FedAvg over a simulated serial radio
//! link. A closed-form cost model accounts for latency, energy, memory and
//! bandwidth on a low-power multicore SoC.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, finite differences
//! - [`quant`]: int8 affine quantization and the frozen backbone
//! - [`model`]: trainable head and the split model
//! - [`objective`]: cross-entropy, mean output loss, proximal term, SGD
//! - [`continual`]: class registry, session plans, evaluation
//! - [`federation`]: FedAvg, sync rounds, simulated link
//! - [`cost`]: latency / power / energy / memory accounting
//! - [`harness`]: synthetic data, experiment configs, reports
//! - [`oracle`]: independent f64 loss and the head gradient check

pub mod continual;
pub mod cost;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
