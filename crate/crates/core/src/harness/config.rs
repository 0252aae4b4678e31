//! Experiment configuration: a versioned TOML document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attack::{AttackConfig, LrSchedule, Optimizer};
use crate::data::SynthSpec;
use crate::fl::FlConfig;
use crate::models::{Architecture, ModelSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Attack,
    Oracle,
    Divergence,
    Sweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Attack => "attack",
            Mode::Oracle => "oracle",
            Mode::Divergence => "divergence",
            Mode::Sweep => "sweep",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "train" => Ok(Mode::Train),
            "attack" => Ok(Mode::Attack),
            "oracle" => Ok(Mode::Oracle),
            "divergence" => Ok(Mode::Divergence),
            "sweep" => Ok(Mode::Sweep),
            _ => Err(HarnessError::Validation(format!("unknown mode `{s}`"))),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "ModelSection::default_arch")]
    pub arch: Architecture,
    #[serde(default = "ModelSection::default_input")]
    pub input: [usize; 3],
    #[serde(default = "ModelSection::default_classes")]
    pub classes: usize,
    /// Hidden widths (mlp) or conv channels (lenet_tiny); architecture default if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
}

impl ModelSection {
    fn default_arch() -> Architecture {
        Architecture::Mlp
    }
    fn default_input() -> [usize; 3] {
        [1, 16, 16]
    }
    fn default_classes() -> usize {
        4
    }

    pub fn spec(&self) -> ModelSpec {
        let mut spec = match self.arch {
            Architecture::Mlp => ModelSpec::mlp(self.input, &[32], self.classes),
            Architecture::LenetTiny => ModelSpec::lenet_tiny(self.input, self.classes),
        };
        if let Some(w) = &self.widths {
            spec.widths = w.clone();
        }
        spec
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Self::default_arch(),
            input: Self::default_input(),
            classes: Self::default_classes(),
            widths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlSection {
    #[serde(default = "FlSection::default_clients")]
    pub clients: usize,
    #[serde(default = "FlSection::default_batch_size")]
    pub batch_size: usize,
    /// Uneven per-client sizes; overrides `clients` and `batch_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_sizes: Option<Vec<usize>>,
    #[serde(default = "FlSection::default_local_iters")]
    pub local_iters: usize,
    #[serde(default = "FlSection::default_eta")]
    pub eta: f64,
}

impl FlSection {
    fn default_clients() -> usize {
        4
    }
    fn default_batch_size() -> usize {
        16
    }
    fn default_local_iters() -> usize {
        3
    }
    fn default_eta() -> f64 {
        0.003
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.batch_sizes.clone().unwrap_or_else(|| vec![self.batch_size; self.clients])
    }
}

impl Default for FlSection {
    fn default() -> Self {
        FlSection {
            clients: Self::default_clients(),
            batch_size: Self::default_batch_size(),
            batch_sizes: None,
            local_iters: Self::default_local_iters(),
            eta: Self::default_eta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Guessed image count; the true `N` if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_count: Option<usize>,
    /// Guessed global learning rate; the true one if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Guessed local iterations; the true count if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_iters: Option<usize>,
    #[serde(default = "AttackSection::default_lr")]
    pub lr: f64,
    #[serde(default = "AttackSection::default_budget")]
    pub budget: usize,
    #[serde(default = "AttackSection::default_upsample")]
    pub upsample: usize,
    #[serde(default = "AttackSection::default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "AttackSection::default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default = "AttackSection::default_canaries")]
    pub canaries: Vec<usize>,
    /// Learning-rate guesses to search (attack mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eta_grid: Vec<f64>,
    /// Image-count guesses to search (attack mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub count_grid: Vec<usize>,
}

impl AttackSection {
    fn default_lr() -> f64 {
        0.1
    }
    fn default_budget() -> usize {
        2000
    }
    fn default_upsample() -> usize {
        2
    }
    fn default_optimizer() -> Optimizer {
        Optimizer::Adam
    }
    fn default_schedule() -> LrSchedule {
        LrSchedule::Constant
    }
    fn default_canaries() -> Vec<usize> {
        vec![0]
    }

    /// Attack config for a round with `fl` as the true setting.
    pub fn config(&self, fl: &FlSection, seed: u64) -> AttackConfig {
        AttackConfig {
            image_count: self.image_count.unwrap_or_else(|| fl.sizes().iter().sum()),
            eta: self.eta.unwrap_or(fl.eta),
            local_iters: self.local_iters.unwrap_or(fl.local_iters),
            lr: self.lr,
            budget: self.budget,
            upsample: self.upsample,
            optimizer: self.optimizer,
            schedule: self.schedule,
            seed,
            canaries: self.canaries.clone(),
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            image_count: None,
            eta: None,
            local_iters: None,
            lr: Self::default_lr(),
            budget: Self::default_budget(),
            upsample: Self::default_upsample(),
            optimizer: Self::default_optimizer(),
            schedule: Self::default_schedule(),
            canaries: Self::default_canaries(),
            eta_grid: Vec::new(),
            count_grid: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default = "SyntheticSource::default_blobs")]
    pub blobs: usize,
}

impl SyntheticSource {
    fn default_blobs() -> usize {
        3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Idx(IdxSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceSection {
    #[serde(default = "DivergenceSection::default_taus")]
    pub taus: Vec<usize>,
    /// Samples for the covariance estimate; skipped when 0.
    #[serde(default)]
    pub cov_samples: usize,
}

impl DivergenceSection {
    fn default_taus() -> Vec<usize> {
        vec![1, 2, 3]
    }
}

impl Default for DivergenceSection {
    fn default() -> Self {
        DivergenceSection {
            taus: Self::default_taus(),
            cov_samples: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTarget {
    Attack,
    Oracle,
    Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "SweepSection::default_run")]
    pub run: SweepTarget,
    /// Axis name (`section.field`) to values.
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

impl SweepSection {
    fn default_run() -> SweepTarget {
        SweepTarget::Attack
    }
}

/// Fields a sweep axis may name.
pub const SWEEP_AXES: &[&str] = &[
    "fl.clients",
    "fl.batch_size",
    "fl.local_iters",
    "fl.eta",
    "attack.image_count",
    "attack.eta",
    "attack.local_iters",
    "attack.lr",
    "attack.budget",
    "attack.upsample",
    "model.classes",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default = "one")]
    pub rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub fl: FlSection,
    #[serde(default)]
    pub attack: AttackSection,
    pub data: DataSource,
    #[serde(default)]
    pub divergence: DivergenceSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Validation(format!("{field}: {msg}"))
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::Train)
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model.spec()
    }

    pub fn fl_config(&self) -> FlConfig {
        FlConfig {
            model: self.model_spec(),
            batch_sizes: self.fl.sizes(),
            local_iters: self.fl.local_iters,
            eta: self.fl.eta,
            data_seed: 0,
            init_seed: 0,
        }
    }

    pub fn synth_spec(&self) -> Option<SynthSpec> {
        match &self.data {
            DataSource::Synthetic(s) => Some(SynthSpec {
                blobs: s.blobs,
                shape: self.model.input,
                classes: self.model.classes,
            }),
            DataSource::Idx(_) => None,
        }
    }

    /// Checks every field; errors name the offending field.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema != SCHEMA_VERSION {
            return Err(invalid(
                "schema",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema),
            ));
        }
        if self.trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        self.model_spec().validate().map_err(|e| invalid("model", e))?;
        if let Some(sizes) = &self.fl.batch_sizes {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(invalid("fl.batch_sizes", "needs at least one client and no empty client"));
            }
        }
        self.fl_config().validate().map_err(|e| invalid("fl", e))?;
        if let Some(s) = self.synth_spec() {
            s.validate().map_err(|e| invalid("data.synthetic", e))?;
        }
        let n: usize = self.fl.sizes().iter().sum();
        let attack = self.attack.config(&self.fl, 0);
        attack.validate(&self.model_spec()).map_err(|e| invalid("attack", e))?;
        if let Some(&c) = self.attack.canaries.iter().find(|&&c| c >= n) {
            return Err(invalid("attack.canaries", format!("index {c} out of range for {n} images")));
        }
        if self.attack.eta_grid.iter().any(|e| !(e.is_finite() && *e != 0.0)) {
            return Err(invalid("attack.eta_grid", "values must be finite and non-zero"));
        }
        if self.attack.count_grid.contains(&0) {
            return Err(invalid("attack.count_grid", "values must be at least 1"));
        }
        if self.divergence.taus.is_empty() || self.divergence.taus.contains(&0) {
            return Err(invalid("divergence.taus", "needs at least one value, all at least 1"));
        }
        if self.divergence.cov_samples != 0 && self.divergence.cov_samples < 10 {
            return Err(invalid("divergence.cov_samples", "must be 0 or at least 10"));
        }
        match (self.mode(), &self.sweep) {
            (Mode::Sweep, None) => return Err(invalid("sweep", "sweep mode needs a [sweep] section")),
            (Mode::Sweep, Some(sw)) => {
                if sw.axes.is_empty() {
                    return Err(invalid("sweep.axes", "needs at least one axis"));
                }
                for (name, values) in &sw.axes {
                    if !SWEEP_AXES.contains(&name.as_str()) {
                        return Err(invalid(&format!("sweep.axes.{name}"), "not a sweepable field"));
                    }
                    if values.is_empty() {
                        return Err(invalid(&format!("sweep.axes.{name}"), "empty value list"));
                    }
                    // Type checks only: a point whose combination is invalid
                    // fails on its own and is recorded in the sweep table.
                    for v in values {
                        self.clone().apply_axis(name, v)?;
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Sets one sweep axis on this spec.
    pub fn apply_axis(&mut self, name: &str, value: &toml::Value) -> Result<(), HarnessError> {
        let field = format!("sweep.axes.{name}");
        let as_usize = || -> Result<usize, HarnessError> {
            value
                .as_integer()
                .filter(|v| *v >= 0)
                .map(|v| v as usize)
                .ok_or_else(|| invalid(&field, format!("expected a non-negative integer, got {value}")))
        };
        let as_f64 = || -> Result<f64, HarnessError> {
            value
                .as_float()
                .or_else(|| value.as_integer().map(|v| v as f64))
                .ok_or_else(|| invalid(&field, format!("expected a number, got {value}")))
        };
        match name {
            "fl.clients" => {
                self.fl.clients = as_usize()?;
                self.fl.batch_sizes = None;
            }
            "fl.batch_size" => {
                self.fl.batch_size = as_usize()?;
                self.fl.batch_sizes = None;
            }
            "fl.local_iters" => self.fl.local_iters = as_usize()?,
            "fl.eta" => self.fl.eta = as_f64()?,
            "attack.image_count" => self.attack.image_count = Some(as_usize()?),
            "attack.eta" => self.attack.eta = Some(as_f64()?),
            "attack.local_iters" => self.attack.local_iters = Some(as_usize()?),
            "attack.lr" => self.attack.lr = as_f64()?,
            "attack.budget" => self.attack.budget = as_usize()?,
            "attack.upsample" => self.attack.upsample = as_usize()?,
            "model.classes" => self.model.classes = as_usize()?,
            _ => return Err(invalid(&field, "not a sweepable field")),
        }
        Ok(())
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentSpec, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    ExperimentSpec::from_toml(&text)
}
