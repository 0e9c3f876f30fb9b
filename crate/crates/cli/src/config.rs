//! Layered run configuration: defaults, then a TOML file, then `--set`
//! overrides and command flags.

use std::collections::BTreeSet;
use std::path::Path;

use morphobricks::damage::{DamageTrainConfig, RecoveryConfig};
use morphobricks::protocol::{ChannelModel, ProtocolConfig};
use morphobricks::sim::SimConfig;
use morphobricks::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: Vec<String>,
    pub count: usize,
    pub budget: [usize; 3],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: ["table", "chair", "plane", "guitar"].map(String::from).to_vec(),
            count: 20,
            budget: [12, 12, 12],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub trials: usize,
    pub firing_rate: f32,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: 60,
            trials: 1,
            firing_rate: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// Trace indices to write; 0 is the initial state.
    pub steps: Vec<usize>,
    pub channels: Vec<usize>,
    pub firing_rate: f32,
    pub seed: u64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            steps: vec![0, 15, 30, 60],
            channels: (1..=20).collect(),
            firing_rate: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelProfile {
    Ideal,
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub fault_rates: Vec<f64>,
    pub trials: usize,
    pub channel: ChannelProfile,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            fault_rates: vec![0.0, 0.05, 0.10, 0.15],
            trials: 5,
            channel: ChannelProfile::Ideal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub samples: usize,
    pub steps: usize,
    pub firing_rate: f32,
    pub seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            steps: 80,
            firing_rate: 0.5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub hidden: Vec<usize>,
    pub seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            hidden: vec![20, 48, 96, 128],
            seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuzzConfig {
    pub roundtrips: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self {
            roundtrips: 1_000_000,
            trials: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub export: ExportConfig,
    pub sim: SimConfig,
    pub simulate: SimulateConfig,
    pub channel: ChannelModel,
    pub protocol: ProtocolConfig,
    pub damage: DamageTrainConfig,
    pub detect: DetectConfig,
    pub recovery: RecoveryConfig,
    pub sweep: SweepConfig,
    pub fuzz: FuzzConfig,
}

/// Keys whose defaults are choices of this implementation rather than
/// published values.
const CHOSEN_DEFAULTS: &[&str] = &[
    "dataset.classes",
    "dataset.count",
    "dataset.budget",
    "dataset.seed",
    "train.clip",
    "train.batch_size",
    "train.rng_seed",
    "train.eval_every",
    "train.eval_steps",
    "train.eval_firing_rate",
    "train.target_accuracy",
    "eval.steps",
    "eval.trials",
    "eval.firing_rate",
    "eval.seed",
    "export.steps",
    "export.channels",
    "export.firing_rate",
    "export.seed",
    "sim.compute_ms",
    "sim.lag_prob",
    "sim.seed",
    "simulate.channel",
    "channel.jitter",
    "channel.drop_prob",
    "channel.truncate_prob",
    "protocol.unit_us",
    "protocol.gap_units",
    "protocol.zero_threshold",
    "protocol.header_threshold",
    "damage.width",
    "damage.encoder_channels",
    "damage.conditioning",
    "damage.clip",
    "damage.seed",
    "damage.growth_prob",
    "detect.samples",
    "detect.steps",
    "detect.firing_rate",
    "detect.seed",
    "recovery.max_iterations",
    "recovery.seed_cells",
    "recovery.seed",
    "sweep.seeds",
    "fuzz.roundtrips",
    "fuzz.trials",
    "fuzz.seed",
];

const FLAG: &str = "# artifact-default";

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<toml::Value, CliError> {
        let Some(path) = path else {
            return Ok(toml::Value::Table(Default::default()));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        text.parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| CliError::Validation(format!("config {}: {}", path.display(), e.message())))
    }

    pub fn from_value(value: toml::Value) -> Result<Self, CliError> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Validation(format!("config key `{path}`: {}", e.into_inner()))
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |r: Result<(), String>| r.map_err(CliError::Validation);
        self.train.validate()?;
        self.damage.validate()?;
        self.protocol.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.channel.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        v(check(self.eval.steps >= 1, "eval.steps must be at least 1"))?;
        v(check(self.sim.cycles >= 1, "sim.cycles must be at least 1"))?;
        v(check(
            self.simulate.fault_rates.iter().all(|r| (0.0..1.0).contains(r)),
            "simulate.fault_rates must lie in [0, 1)",
        ))?;
        v(check(self.recovery.max_iterations >= 1, "recovery.max_iterations must be at least 1"))?;
        v(check(
            self.recovery.step_range.0 >= 1 && self.recovery.step_range.0 <= self.recovery.step_range.1,
            "recovery.step_range must satisfy 1 <= lo <= hi",
        ))?;
        v(check(self.recovery.seed_cells >= 1, "recovery.seed_cells must be at least 1"))?;
        v(check(self.detect.steps >= 1, "detect.steps must be at least 1"))?;
        Ok(())
    }

    /// The full default configuration as TOML with chosen defaults flagged.
    pub fn generated() -> String {
        let text = toml::to_string(&RunConfig::default()).expect("default config serializes");
        let chosen: BTreeSet<&str> = CHOSEN_DEFAULTS.iter().copied().collect();
        let mut out = String::new();
        let mut section = String::new();
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.to_string();
                if section == "train" {
                    out.push_str(line);
                    out.push('\n');
                    out.push_str(&format!("# target_accuracy = 0.9  {FLAG} (unset: no early stop)\n"));
                    continue;
                }
            }
            out.push_str(line);
            if let Some((key, _)) = trimmed.split_once(" = ") {
                if chosen.contains(format!("{section}.{key}").as_str()) {
                    out.push_str("  ");
                    out.push_str(FLAG);
                }
            }
            out.push('\n');
        }
        out
    }
}

fn check(ok: bool, msg: &str) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

/// Applies `section.key=value`, parsing the value as a TOML literal and
/// falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = parse_literal(raw.trim());
    set_path(root, path.trim(), value)
}

pub fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Validation(format!("invalid key path {path:?}")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("key path {path:?} crosses a non-table")))?;
        node = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| CliError::Validation(format!("key path {path:?} crosses a non-table")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
