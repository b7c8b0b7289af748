//! Analytic simulation of collaborative inference: the input is broadcast
//! from the central device, every device runs its model, class tokens are
//! sent back, and the central device aggregates.
//!
//! All times are seconds, sizes bytes, throughput FLOP/s, power watts and
//! energy joules. `MB` means 10⁶ bytes and `GB` 10⁹ bytes.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ensemble::{ensemble_predict, Ensemble};
use crate::error::{Error, Result};
use crate::vit::{count_flops, count_params, ViTConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const MB: f64 = 1e6;
pub const GB: f64 = 1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub memory_bytes: u64,
    pub throughput_flops: f64,
    pub power_active_w: f64,
    #[serde(default)]
    pub power_idle_w: f64,
}

impl DeviceProfile {
    pub fn new(name: &str, memory_gb: f64, throughput_flops: f64, power_active_w: f64) -> Self {
        DeviceProfile {
            name: name.to_string(),
            memory_bytes: (memory_gb * GB) as u64,
            throughput_flops,
            power_active_w,
            power_idle_w: 0.0,
        }
    }

    pub fn raspberry_pi_4b() -> Self {
        Self::new("raspberry-pi-4b", 4.0, 13.5e9, 7.3)
    }

    pub fn jetson_nano() -> Self {
        Self::new("jetson-nano", 4.0, 472e9, 10.0)
    }

    pub fn jetson_tx2() -> Self {
        Self::new("jetson-tx2", 8.0, 1.33e12, 15.0)
    }

    pub fn xavier_nx() -> Self {
        Self::new("xavier-nx", 16.0, 21e12, 20.0)
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "raspberry-pi-4b" => Self::raspberry_pi_4b(),
            "jetson-nano" => Self::jetson_nano(),
            "jetson-tx2" => Self::jetson_tx2(),
            "xavier-nx" => Self::xavier_nx(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.throughput_flops > 0.0 && self.throughput_flops.is_finite()) {
            return Err(Error::config(format!("device {}: throughput must be positive", self.name)));
        }
        if !(self.power_idle_w >= 0.0 && self.power_active_w >= self.power_idle_w) {
            return Err(Error::config(format!("device {}: need power_active >= power_idle >= 0", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastMode {
    /// One independent link per device; all copies leave at t = 0.
    #[default]
    Parallel,
    /// One shared link; copies are sent one after another in device order.
    Serial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    pub bandwidth_bytes_per_s: f64,
    #[serde(default)]
    pub latency_s: f64,
    #[serde(default)]
    pub broadcast: BroadcastMode,
}

impl NetworkModel {
    pub fn new(bandwidth_bytes_per_s: f64, latency_s: f64) -> Self {
        NetworkModel { bandwidth_bytes_per_s, latency_s, broadcast: BroadcastMode::Parallel }
    }

    /// `bytes / bandwidth + latency`.
    pub fn transfer_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth_bytes_per_s + self.latency_s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bytes_per_s > 0.0 && self.bandwidth_bytes_per_s.is_finite()) {
            return Err(Error::config("network bandwidth must be positive"));
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(Error::config("network latency must be non-negative"));
        }
        Ok(())
    }
}

/// Cost summary of a model as deployed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCost {
    pub name: String,
    pub flops: u64,
    pub params: u64,
    /// Bytes sent to the central device (the class token).
    pub output_bytes: u64,
    /// Working memory needed to run; `None` means the 4-byte parameter storage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_bytes: Option<u64>,
}

impl ModelCost {
    pub fn from_config(name: &str, cfg: &ViTConfig) -> Self {
        ModelCost {
            name: name.to_string(),
            flops: count_flops(cfg),
            params: count_params(cfg),
            output_bytes: 4 * cfg.embed_dim as u64,
            runtime_bytes: None,
        }
    }

    pub fn storage_bytes(&self) -> u64 {
        4 * self.params
    }

    pub fn runtime(&self) -> u64 {
        self.runtime_bytes.unwrap_or_else(|| self.storage_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub device: DeviceProfile,
    pub model: ModelCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentPlan {
    pub name: String,
    pub placements: Vec<Placement>,
    /// Index of the device that holds the input and aggregates.
    #[serde(default)]
    pub central: usize,
    pub network: NetworkModel,
    /// Size of one input image as broadcast.
    pub input_bytes: u64,
    /// FLOPs of aggregation and head on the central device.
    #[serde(default)]
    pub aggregation_flops: u64,
    /// Share of each device's memory available to the model.
    #[serde(default = "one")]
    pub memory_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_budget_bytes: Option<u64>,
}

fn one() -> f64 {
    1.0
}

/// Multiply-accumulate count of the aggregator and head: `2·(F·H + H·F + F·K)`.
pub fn aggregation_flops(fused: usize, hidden: usize, classes: usize) -> u64 {
    let (f, h, k) = (fused as u64, hidden as u64, classes as u64);
    2 * (f * h + h * f + f * k)
}

impl DeploymentPlan {
    /// `n` copies of `device`, each running a model described by `model`.
    pub fn homogeneous(name: &str, device: DeviceProfile, model: ModelCost, n: usize, network: NetworkModel, input_bytes: u64) -> Self {
        DeploymentPlan {
            name: name.to_string(),
            placements: (0..n).map(|_| Placement { device: device.clone(), model: model.clone() }).collect(),
            central: 0,
            network,
            input_bytes,
            aggregation_flops: 0,
            memory_fraction: 1.0,
            storage_budget_bytes: None,
        }
    }
}

/// Human-readable reasons the plan cannot be deployed; empty when it can.
pub fn check_feasibility(plan: &DeploymentPlan) -> Vec<String> {
    let mut v = Vec::new();
    if plan.placements.is_empty() {
        return v;
    }
    if plan.central >= plan.placements.len() {
        v.push(format!("central device {} does not exist ({} devices)", plan.central, plan.placements.len()));
    }
    for (i, p) in plan.placements.iter().enumerate() {
        let avail = plan.memory_fraction * p.device.memory_bytes as f64;
        if p.model.runtime() as f64 > avail {
            v.push(format!(
                "device {i} ({}): model {} needs {} bytes, {} available",
                p.device.name,
                p.model.name,
                p.model.runtime(),
                avail as u64
            ));
        }
        if let Some(b) = plan.storage_budget_bytes {
            if p.model.storage_bytes() > b {
                v.push(format!(
                    "device {i} ({}): model {} stores {} bytes, budget {b}",
                    p.device.name,
                    p.model.name,
                    p.model.storage_bytes()
                ));
            }
        }
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageTimes {
    pub compute_s: f64,
    pub transfer_s: f64,
}

/// `flops / throughput` and `payload / bandwidth + latency`.
pub fn estimate_latency(model_flops: u64, device: &DeviceProfile, payload_bytes: u64, net: &NetworkModel) -> StageTimes {
    StageTimes { compute_s: model_flops as f64 / device.throughput_flops, transfer_s: net.transfer_time(payload_bytes) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceTimeline {
    pub device: String,
    pub model: String,
    /// Input arrival time.
    pub receive_s: f64,
    pub compute_s: f64,
    pub send_s: f64,
    /// Token arrival at the central device.
    pub arrival_s: f64,
    pub busy_s: f64,
    pub idle_s: f64,
    pub energy_j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimReport {
    pub schema_version: u32,
    pub plan: String,
    pub central: usize,
    pub devices: Vec<DeviceTimeline>,
    pub aggregation_start_s: f64,
    pub aggregation_s: f64,
    pub latency_s: f64,
    pub energy_j: f64,
    pub average_power_w: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_samples: Option<usize>,
}

/// Labeled evaluation input for accuracy mode.
pub struct EvalSet<'a> {
    pub ensemble: &'a Ensemble,
    pub data: &'a Dataset,
    pub indices: &'a [usize],
    pub batch_size: usize,
}

/// Timeline, energy and (optionally) accuracy of one inference under `plan`.
pub fn simulate_inference(plan: &DeploymentPlan, eval: Option<EvalSet<'_>>) -> Result<SimReport> {
    if plan.placements.is_empty() {
        return Err(Error::Infeasible(vec!["plan has no devices".to_string()]));
    }
    let bad = check_feasibility(plan);
    if !bad.is_empty() {
        return Err(Error::Infeasible(bad));
    }
    plan.network.validate()?;
    for p in &plan.placements {
        p.device.validate()?;
    }
    let net = &plan.network;
    let c = plan.central;
    let mut receive = vec![0.0f64; plan.placements.len()];
    let mut clock = 0.0f64;
    for (i, r) in receive.iter_mut().enumerate() {
        if i == c {
            continue;
        }
        let t = net.transfer_time(plan.input_bytes);
        *r = match net.broadcast {
            BroadcastMode::Parallel => t,
            BroadcastMode::Serial => {
                clock += t;
                clock
            }
        };
    }
    let mut devices = Vec::with_capacity(plan.placements.len());
    let mut agg_start = 0.0f64;
    for (i, p) in plan.placements.iter().enumerate() {
        let st = estimate_latency(p.model.flops, &p.device, p.model.output_bytes, net);
        let send = if i == c { 0.0 } else { st.transfer_s };
        let arrival = receive[i] + st.compute_s + send;
        agg_start = agg_start.max(arrival);
        devices.push(DeviceTimeline {
            device: p.device.name.clone(),
            model: p.model.name.clone(),
            receive_s: receive[i],
            compute_s: st.compute_s,
            send_s: send,
            arrival_s: arrival,
            busy_s: st.compute_s,
            idle_s: 0.0,
            energy_j: 0.0,
        });
    }
    let aggregation = plan.aggregation_flops as f64 / plan.placements[c].device.throughput_flops;
    devices[c].busy_s += aggregation;
    let latency = agg_start + aggregation;
    let mut energy = 0.0;
    for (d, p) in devices.iter_mut().zip(&plan.placements) {
        d.idle_s = latency - d.busy_s;
        d.energy_j = p.device.power_active_w * d.busy_s + p.device.power_idle_w * d.idle_s;
        energy += d.energy_j;
    }
    let (accuracy, eval_samples) = match eval {
        Some(e) => {
            if e.indices.is_empty() {
                return Err(Error::contract("accuracy mode needs a nonempty evaluation set"));
            }
            let pred = ensemble_predict(e.ensemble, e.data, e.indices, e.batch_size)?;
            let labels = e.data.labels_of(e.indices);
            let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            (Some(hits as f64 / e.indices.len() as f64), Some(e.indices.len()))
        }
        None => (None, None),
    };
    Ok(SimReport {
        schema_version: SCHEMA_VERSION,
        plan: plan.name.clone(),
        central: c,
        devices,
        aggregation_start_s: agg_start,
        aggregation_s: aggregation,
        latency_s: latency,
        energy_j: energy,
        average_power_w: if latency > 0.0 { energy / latency } else { 0.0 },
        accuracy,
        eval_samples,
    })
}

/// One row of a plan comparison, relative to the first report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRow {
    pub plan: String,
    pub devices: usize,
    pub latency_s: f64,
    pub energy_j: f64,
    pub average_power_w: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub latency_ratio: f64,
    pub energy_ratio: f64,
    pub latency_delta_s: f64,
    pub energy_delta_j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub schema_version: u32,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_COLUMNS: [&str; 11] = [
    "plan",
    "devices",
    "latency_s",
    "energy_j",
    "average_power_w",
    "accuracy",
    "latency_ratio",
    "energy_ratio",
    "latency_delta_s",
    "energy_delta_j",
    "accuracy_delta",
];

/// Rows in input order; ratios and deltas are against `reports[0]`.
pub fn compare_plans(reports: &[SimReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::contract("comparison needs at least two reports"));
    }
    let base = &reports[0];
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            plan: r.plan.clone(),
            devices: r.devices.len(),
            latency_s: r.latency_s,
            energy_j: r.energy_j,
            average_power_w: r.average_power_w,
            accuracy: r.accuracy,
            latency_ratio: r.latency_s / base.latency_s,
            energy_ratio: r.energy_j / base.energy_j,
            latency_delta_s: r.latency_s - base.latency_s,
            energy_delta_j: r.energy_j - base.energy_j,
            accuracy_delta: r.accuracy.zip(base.accuracy).map(|(a, b)| a - b),
        })
        .collect();
    Ok(Comparison { schema_version: SCHEMA_VERSION, baseline: base.plan.clone(), rows })
}

impl Comparison {
    /// Tab-separated table with a header row of [`COMPARISON_COLUMNS`].
    pub fn to_table(&self) -> String {
        let mut s = COMPARISON_COLUMNS.join("\t");
        s.push('\n');
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let cells = [
                r.plan.clone(),
                r.devices.to_string(),
                format!("{:.6e}", r.latency_s),
                format!("{:.6e}", r.energy_j),
                format!("{:.6}", r.average_power_w),
                opt(r.accuracy),
                format!("{:.6}", r.latency_ratio),
                format!("{:.6}", r.energy_ratio),
                format!("{:.6e}", r.latency_delta_s),
                format!("{:.6e}", r.energy_delta_j),
                opt(r.accuracy_delta),
            ];
            s.push_str(&cells.join("\t"));
            s.push('\n');
        }
        s
    }
}
