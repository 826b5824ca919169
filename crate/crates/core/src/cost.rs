//! Closed-form latency, power, energy, memory and bandwidth accounting for
//! local training and synchronization.
//!
//! Operating points are calibrated to measured per-epoch training cost on a
//! low-power 10-core RISC-V SoC. The radio link is calibrated from one
//! observed transfer (24 KiB in 1.7 s) with no per-message overhead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadShape;

pub const F32_BYTES: usize = 4;

/// Training samples per node and session used for the reference latencies.
pub const REFERENCE_SAMPLES_PER_EPOCH: usize = 28;

/// Reference head message: 6144 parameters.
pub const REFERENCE_MESSAGE_BYTES: usize = 24_576;
pub const REFERENCE_MESSAGE_SECONDS: f64 = 1.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingPoint {
    pub name: String,
    pub frequency_mhz: f64,
    pub voltage_mv: f64,
    pub local_epoch_latency_s: f64,
    pub power_w: f64,
}

impl OperatingPoint {
    /// Low-power mode: 240 MHz, 650 mV.
    pub fn lpm() -> Self {
        Self {
            name: "LPM".into(),
            frequency_mhz: 240.0,
            voltage_mv: 650.0,
            local_epoch_latency_s: 0.1784,
            power_w: 0.0243,
        }
    }

    /// High-performance mode: 370 MHz, 800 mV.
    pub fn hpm() -> Self {
        Self {
            name: "HPM".into(),
            frequency_mhz: 370.0,
            voltage_mv: 800.0,
            local_epoch_latency_s: 0.1176,
            power_w: 0.0531,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.frequency_mhz,
            self.voltage_mv,
            self.local_epoch_latency_s,
            self.power_w,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!(
                "operating point {} needs positive frequency, voltage, latency and power",
                self.name
            )));
        }
        Ok(())
    }
}

/// Joules per local epoch: `power × latency`.
pub fn epoch_energy(op: &OperatingPoint) -> f64 {
    op.power_w * op.local_epoch_latency_s
}

pub fn per_sample_latency(op: &OperatingPoint, samples_per_epoch: usize) -> Result<f64> {
    if samples_per_epoch == 0 {
        return Err(Error::Numeric("per-sample latency of an empty epoch".into()));
    }
    Ok(op.local_epoch_latency_s / samples_per_epoch as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    pub throughput_bytes_per_s: f64,
    pub overhead_s: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self::calibrated()
    }
}

impl LinkModel {
    pub fn new(throughput_bytes_per_s: f64, overhead_s: f64) -> Result<Self> {
        let link = Self {
            throughput_bytes_per_s,
            overhead_s,
        };
        link.validate()?;
        Ok(link)
    }

    /// One 24 KiB head in 1.7 s, zero fixed overhead.
    pub fn calibrated() -> Self {
        Self {
            throughput_bytes_per_s: REFERENCE_MESSAGE_BYTES as f64 / REFERENCE_MESSAGE_SECONDS,
            overhead_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.throughput_bytes_per_s.is_finite() && self.throughput_bytes_per_s > 0.0) {
            return Err(Error::Config("link throughput must be > 0".into()));
        }
        if !(self.overhead_s.is_finite() && self.overhead_s >= 0.0) {
            return Err(Error::Config("link overhead must be >= 0".into()));
        }
        Ok(())
    }

    pub fn message_time(&self, bytes: usize) -> f64 {
        self.overhead_s + bytes as f64 / self.throughput_bytes_per_s
    }
}

/// Wall time of one federated epoch: nodes train in parallel, then every
/// node's upload and download serialize on the shared link.
pub fn federated_epoch_time(train: &OperatingPoint, link: &LinkModel, nodes: usize, msg_bytes: usize) -> f64 {
    let round_trip = 2.0 * link.message_time(msg_bytes);
    train.local_epoch_latency_s + nodes as f64 * round_trip
}

/// Whole local epochs that fit in one federated epoch.
pub fn free_local_epochs(fed_epoch_s: f64, local_epoch_s: f64) -> u64 {
    if !(fed_epoch_s > 0.0 && local_epoch_s > 0.0) {
        return 0;
    }
    (fed_epoch_s / local_epoch_s).floor() as u64
}

/// Training memory for a head, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub param_bytes: usize,
    pub grad_bytes: usize,
    pub global_copy_bytes: usize,
    pub local_copy_bytes: usize,
    pub activation_buffer_bytes: usize,
}

impl MemoryModel {
    /// Working set while training: parameters, gradients and the largest
    /// per-layer activation footprint.
    pub fn peak_working(&self) -> usize {
        self.param_bytes + self.grad_bytes + self.activation_buffer_bytes
    }

    /// Model copies kept between synchronizations.
    pub fn resident_copies(&self) -> usize {
        self.global_copy_bytes + self.local_copy_bytes
    }
}

/// Memory for training `head` with `batch` samples whose head input has
/// `spatial` positions. Per layer the activation buffer is input + output +
/// output gradient; the peak over the two head layers is kept.
pub fn peak_training_memory(head: HeadShape, batch: usize, spatial: usize) -> MemoryModel {
    let p = head.parameter_count() * F32_BYTES;
    let conv = head.feature_dim * spatial + 2 * head.hidden_dim * spatial;
    let classifier = head.hidden_dim + 2 * head.num_classes;
    MemoryModel {
        param_bytes: p,
        grad_bytes: p,
        global_copy_bytes: p,
        local_copy_bytes: p,
        activation_buffer_bytes: batch * F32_BYTES * conv.max(classifier),
    }
}

/// Inputs for a [`CostReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub lpm: OperatingPoint,
    pub hpm: OperatingPoint,
    pub link: LinkModel,
    /// Operating point used for training during federated epochs.
    pub train_mode: Mode,
    pub samples_per_epoch: usize,
    /// Message size for the reference federated epoch.
    pub reference_message_bytes: usize,
    /// Spatial positions of the head input, for the activation term.
    pub head_spatial: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Lpm,
    Hpm,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            lpm: OperatingPoint::lpm(),
            hpm: OperatingPoint::hpm(),
            link: LinkModel::calibrated(),
            train_mode: Mode::Hpm,
            samples_per_epoch: REFERENCE_SAMPLES_PER_EPOCH,
            reference_message_bytes: REFERENCE_MESSAGE_BYTES,
            head_spatial: 1,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        self.lpm.validate()?;
        self.hpm.validate()?;
        self.link.validate()?;
        if self.samples_per_epoch == 0 || self.head_spatial == 0 || self.reference_message_bytes == 0 {
            return Err(Error::Config(
                "cost.samples_per_epoch, cost.head_spatial and cost.reference_message_bytes must be >= 1"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn train_point(&self) -> &OperatingPoint {
        match self.train_mode {
            Mode::Lpm => &self.lpm,
            Mode::Hpm => &self.hpm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: String,
    pub frequency_mhz: f64,
    pub voltage_mv: f64,
    pub latency_ms: f64,
    pub power_mw: f64,
    pub energy_mj: f64,
    pub per_sample_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub modes: Vec<ModeRow>,
    pub nodes: usize,
    pub reference_message_bytes: usize,
    pub reference_message_s: f64,
    pub reference_federated_epoch_s: f64,
    pub free_lpm_epochs: u64,
    pub head_parameters: usize,
    pub head_message_bytes: usize,
    pub head_message_s: f64,
    pub head_federated_epoch_s: f64,
    pub memory: MemoryModel,
    pub peak_working_bytes: usize,
    pub resident_copy_bytes: usize,
}

pub fn cost_report(cfg: &CostConfig, head: HeadShape, nodes: usize, batch: usize) -> Result<CostReport> {
    cfg.validate()?;
    let modes = [&cfg.lpm, &cfg.hpm]
        .into_iter()
        .map(|op| {
            Ok(ModeRow {
                mode: op.name.clone(),
                frequency_mhz: op.frequency_mhz,
                voltage_mv: op.voltage_mv,
                latency_ms: op.local_epoch_latency_s * 1e3,
                power_mw: op.power_w * 1e3,
                energy_mj: epoch_energy(op) * 1e3,
                per_sample_ms: per_sample_latency(op, cfg.samples_per_epoch)? * 1e3,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let train = cfg.train_point();
    let ref_fed = federated_epoch_time(train, &cfg.link, nodes, cfg.reference_message_bytes);
    let memory = peak_training_memory(head, batch, cfg.head_spatial);
    Ok(CostReport {
        modes,
        nodes,
        reference_message_bytes: cfg.reference_message_bytes,
        reference_message_s: cfg.link.message_time(cfg.reference_message_bytes),
        reference_federated_epoch_s: ref_fed,
        free_lpm_epochs: free_local_epochs(ref_fed, cfg.lpm.local_epoch_latency_s),
        head_parameters: head.parameter_count(),
        head_message_bytes: head.message_bytes(),
        head_message_s: cfg.link.message_time(head.message_bytes()),
        head_federated_epoch_s: federated_epoch_time(train, &cfg.link, nodes, head.message_bytes()),
        memory,
        peak_working_bytes: memory.peak_working(),
        resident_copy_bytes: memory.resident_copies(),
    })
}

impl CostReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "cost report",
            reason: e.to_string(),
        })
    }

    /// Fixed-width table, one column per operating point.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let header: Vec<String> = self.modes.iter().map(|m| format!("{:>10}", m.mode)).collect();
        s.push_str(&format!("{:<22}{}\n", "Mode", header.join("")));
        let row = |label: &str, f: &dyn Fn(&ModeRow) -> String| {
            let cells: Vec<String> = self.modes.iter().map(|m| format!("{:>10}", f(m))).collect();
            format!("{label:<22}{}\n", cells.join(""))
        };
        s.push_str(&row("Frequency [MHz]", &|m| format!("{:.0}", m.frequency_mhz)));
        s.push_str(&row("Voltage [mV]", &|m| format!("{:.0}", m.voltage_mv)));
        s.push_str(&row("Latency [ms]", &|m| format!("{:.1}", m.latency_ms)));
        s.push_str(&row("Power [mW]", &|m| format!("{:.1}", m.power_mw)));
        s.push_str(&row("Energy [mJ]", &|m| format!("{:.1}", m.energy_mj)));
        s.push_str(&row("Per sample [ms]", &|m| format!("{:.2}", m.per_sample_ms)));
        s.push('\n');
        s.push_str(&format!(
            "reference message: {} B in {:.2} s; federated epoch ({} nodes): {:.3} s; free LPM epochs: {}\n",
            self.reference_message_bytes,
            self.reference_message_s,
            self.nodes,
            self.reference_federated_epoch_s,
            self.free_lpm_epochs
        ));
        s.push_str(&format!(
            "head: {} params, {} B message ({:.3} s); federated epoch {:.3} s\n",
            self.head_parameters, self.head_message_bytes, self.head_message_s, self.head_federated_epoch_s
        ));
        s.push_str(&format!(
            "memory: peak working {} B (params {} + grads {} + activations {}), resident copies {} B\n",
            self.peak_working_bytes,
            self.memory.param_bytes,
            self.memory.grad_bytes,
            self.memory.activation_buffer_bytes,
            self.resident_copy_bytes
        ));
        s
    }
}
