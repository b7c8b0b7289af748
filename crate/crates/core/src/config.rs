//! Run configuration. Every field has a default, unknown keys are rejected,
//! and `key=value` overrides patch the parsed tree before it is typed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::decompose::{LayerSelection, ShrinkOptions};
use crate::distill::DistillSpec;
use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::persist::read_bytes;
use crate::sim::{BroadcastMode, DeviceProfile, MB};
use crate::train::TrainSettings;
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// CIFAR-style binary records in `path`.
    CifarBinary,
    /// `path/<class>/<image>` tree.
    ImageDir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Geometry of file sources.
    pub side: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Label bytes per CIFAR record (1 for CIFAR-10, 2 for CIFAR-100).
    pub label_bytes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            synthetic: SyntheticSpec::default(),
            side: 32,
            channels: 3,
            num_classes: 10,
            label_bytes: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub model: ViTConfig,
    pub train: TrainSettings,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            model: ViTConfig {
                image_side: 16,
                patch_size: 4,
                channels: 1,
                layers: 4,
                embed_dim: 32,
                heads: 4,
                mlp_dim: 64,
                num_classes: 8,
                head_dim: None,
            },
            train: TrainSettings { learning_rate: 3e-3, steps: 600, batch_size: 32, ..TrainSettings::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub num_partitions: usize,
    /// Fine-tuning of each partition teacher after its head is cut to the
    /// partition's classes; `steps = 0` skips it.
    pub fine_tune: TrainSettings,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig { num_partitions: 4, fine_tune: TrainSettings { steps: 0, ..TrainSettings::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Preset name of every device in the decomposed plan.
    pub device: String,
    /// Preset for the single-device plan running the teacher.
    pub teacher_device: String,
    /// Overrides `device` with explicit profiles, one per partition.
    pub devices: Option<Vec<DeviceProfile>>,
    pub bandwidth_mb_per_s: f64,
    pub latency_ms: f64,
    pub broadcast: BroadcastMode,
    pub central: usize,
    pub memory_fraction: f64,
    pub storage_budget_bytes: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            device: "jetson-nano".into(),
            teacher_device: "jetson-nano".into(),
            devices: None,
            bandwidth_mb_per_s: 2.0,
            latency_ms: 0.0,
            broadcast: BroadcastMode::Parallel,
            central: 0,
            memory_fraction: 1.0,
            storage_budget_bytes: None,
        }
    }
}

impl SimConfig {
    pub fn bandwidth_bytes_per_s(&self) -> f64 {
        self.bandwidth_mb_per_s * MB
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Batch size of evaluation and importance passes.
    pub eval_batch_size: usize,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub partition: PartitionConfig,
    pub shrink: ShrinkOptions,
    pub distill: DistillSpec,
    pub ensemble: EnsembleSpec,
    pub simulate: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("run"),
            eval_batch_size: 64,
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            partition: PartitionConfig::default(),
            shrink: ShrinkOptions { sigma: 50.0, layers: Some(2), selection: LayerSelection::Stride, ..Default::default() },
            distill: DistillSpec {
                train: TrainSettings { learning_rate: 2e-3, steps: 300, ..TrainSettings::default() },
                ..Default::default()
            },
            ensemble: EnsembleSpec {
                train: TrainSettings { learning_rate: 1e-3, steps: 200, ..TrainSettings::default() },
                ..Default::default()
            },
            simulate: SimConfig::default(),
        }
    }
}

/// Parse `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML tree, creating tables as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| Error::config(format!("override key {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Tables merge key by key; any other value replaces the base.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses `text` over the defaults, so partial tables keep their other
    /// fields, then applies the overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let mut table = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::contract(format!("serializing defaults: {e}")))?;
        merge(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `None` uses defaults; a missing file is a missing artifact.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => String::from_utf8(read_bytes(p)?).map_err(|_| Error::config(format!("{} is not UTF-8", p.display())))?,
            None => String::new(),
        };
        RunConfig::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::contract(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size must be positive"));
        }
        self.teacher.model.validate().map_err(|e| Error::config(format!("teacher.model: {e}")))?;
        for (name, t) in [
            ("teacher.train", &self.teacher.train),
            ("partition.fine_tune", &self.partition.fine_tune),
            ("distill.train", &self.distill.train),
            ("ensemble.train", &self.ensemble.train),
        ] {
            t.validate().map_err(|e| Error::config(format!("{name}: {e}")))?;
        }
        let n = self.partition.num_partitions;
        if n == 0 || n > self.teacher.model.num_classes {
            return Err(Error::config(format!(
                "partition.num_partitions must lie in 1..={}",
                self.teacher.model.num_classes
            )));
        }
        if !(0.0..100.0).contains(&self.shrink.sigma) {
            return Err(Error::config("shrink.sigma must lie in [0, 100)"));
        }
        if let Some(l) = self.shrink.layers {
            if l == 0 || l > self.teacher.model.layers {
                return Err(Error::config(format!("shrink.layers must lie in 1..={}", self.teacher.model.layers)));
            }
        }
        let s = &self.simulate;
        if !(s.bandwidth_mb_per_s > 0.0 && s.bandwidth_mb_per_s.is_finite()) || !(s.latency_ms >= 0.0) {
            return Err(Error::config("simulate: bandwidth must be positive and latency non-negative"));
        }
        if !(s.memory_fraction > 0.0 && s.memory_fraction <= 1.0) {
            return Err(Error::config("simulate.memory_fraction must lie in (0, 1]"));
        }
        match &s.devices {
            Some(d) if d.len() != n => {
                return Err(Error::config(format!("simulate.devices lists {} devices for {n} partitions", d.len())))
            }
            Some(d) => d.iter().try_for_each(DeviceProfile::validate)?,
            None => {
                for name in [&s.device, &s.teacher_device] {
                    if DeviceProfile::preset(name).is_none() {
                        return Err(Error::config(format!("unknown device preset {name:?}")));
                    }
                }
            }
        }
        if s.central >= n {
            return Err(Error::config(format!("simulate.central must be below {n}")));
        }
        if self.data.source != DataSource::Synthetic && self.data.path.is_none() {
            return Err(Error::config("data.path is required for file sources"));
        }
        Ok(())
    }
}
